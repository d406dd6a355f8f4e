"""Ready-made single-shot planning problems."""

from __future__ import annotations

import numpy as np

from .overlap import contour_to_overlap
from .scp import ObstacleTrack, ProblemSpec

HEAD_ON = {
    "start": (0.0, 0.0, 0.0),
    "goal": (10.0, 0.0, 0.0),
    "N": 20,
    "tau": 1.0,
    "v_bound": 2.0,
    "a_bound": 1.0,
    "cov": 0.02,
    "radius": 0.5,
}


def head_on_spec(c_min: float = 0.60, cov_scale: float = 1.0, with_obstacle: bool = True) -> ProblemSpec:
    """Drone flying 10 m along x while one obstacle flies the same line the other way.

    Both bodies have radius 0.5 m and isotropic covariance ``0.02 * cov_scale``.
    The obstacle mean moves linearly from the goal to the start over the horizon.
    """
    p = HEAD_ON
    N = p["N"]
    cov = p["cov"] * cov_scale * np.eye(3)
    obstacles = []
    if with_obstacle:
        means = np.linspace(p["goal"], p["start"], N)
        obstacles.append(ObstacleTrack(means, cov, p["radius"], name="obstacle"))
    return ProblemSpec(
        start=p["start"], goal=p["goal"], N=N, tau=p["tau"],
        v_min=-p["v_bound"], v_max=p["v_bound"], a_min=-p["a_bound"], a_max=p["a_bound"],
        drone_cov_seq=cov, obstacles=obstacles, upsilon_max=contour_to_overlap(c_min, 3),
        drone_radius=p["radius"],
    )


def head_on_track() -> np.ndarray:
    """Obstacle mean positions of :func:`head_on_spec`, one row per step."""
    return np.linspace(HEAD_ON["goal"], HEAD_ON["start"], HEAD_ON["N"])
