"""Receding-horizon simulation around the SCP planner.

Each step senses obstacles within range, predicts them at constant velocity,
picks the current waypoint, solves one horizon warm-started from the shifted
previous plan and executes the first velocity exactly.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .chance import inflate
from .overlap import contour_to_overlap, overlap_to_contour, solve_lambda_batch
from .scenario import Scenario
from .scp import ObstacleTrack, ProblemSpec, SCPConfig, TrajectorySolution, scp_solve

logger = logging.getLogger(__name__)

# reporting slack on contour levels when summarising a run
CONTOUR_TOLERANCE = 0.01


class ConfigError(ValueError):
    pass


@dataclass
class ObstacleState:
    id: str
    pos: np.ndarray
    vel: np.ndarray
    cov: np.ndarray
    radius: float = 0.0
    c_min: float | None = None  # per-obstacle override (walls)
    wall: bool = False


@dataclass
class WorldState:
    time: float
    drone_pos: np.ndarray
    drone_vel: np.ndarray
    obstacles: list = field(default_factory=list)


@dataclass
class MpcConfig:
    horizon: int
    tau: float
    sensing_range: float
    c_min: float
    v_min: np.ndarray
    v_max: np.ndarray
    a_min: np.ndarray
    a_max: np.ndarray
    drone_cov: np.ndarray
    c_max: float | None = None
    waypoint_spacing: float = 5.0
    drone_radius: float = 0.0
    kappa: float = 3.0
    cov_growth: float = 0.0
    terminal_weight: float = 1.0
    smooth_weight: float = 1.0
    effort_weight: float = 1e-3
    progress_weight: float = 0.01  # running goal term; without it receding plans approach the goal geometrically
    band_box: tuple | None = None  # (min corner, max corner) where the c_max bound applies
    goal_tolerance: float = 0.2
    budget_factor: float = 4.0
    record_timing: bool = False
    scp: SCPConfig = field(default_factory=SCPConfig)

    def __post_init__(self):
        if self.horizon < 3:
            raise ConfigError("horizon must be at least 3")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.sensing_range <= 0:
            raise ConfigError("sensing_range must be positive")
        if not 0 < self.c_min < 1:
            raise ConfigError("c_min must lie in (0, 1)")
        if self.c_max is not None and not self.c_min < self.c_max < 1:
            raise ConfigError("need c_min < c_max < 1")
        if self.waypoint_spacing <= 0:
            raise ConfigError("waypoint_spacing must be positive")

    @classmethod
    def from_scenario(cls, sc: Scenario, **overrides) -> "MpcConfig":
        p = sc.planner
        scp_cfg = SCPConfig(max_active_per_step=p["max_active_per_step"], linearization=p["linearization"],
                            qp_method=p["qp_method"], max_iters=p["max_iters"],
                            relative_delta=p["relative_delta"])
        box = (sc.corridor.box_min, sc.corridor.box_max) if sc.corridor is not None else None
        kwargs = dict(
            horizon=sc.horizon, tau=sc.tau, sensing_range=sc.sensing_range, c_min=sc.c_min, c_max=sc.c_max,
            v_min=sc.v_min, v_max=sc.v_max, a_min=sc.a_min, a_max=sc.a_max, drone_cov=sc.drone_cov,
            waypoint_spacing=sc.waypoint_spacing, drone_radius=sc.drone_radius, kappa=p["kappa"],
            cov_growth=p["cov_growth"], terminal_weight=p["terminal_weight"], smooth_weight=p["smooth_weight"],
            effort_weight=p["effort_weight"], progress_weight=p["progress_weight"], band_box=box, scp=scp_cfg,
        )
        kwargs.update(overrides)
        return cls(**kwargs)


@dataclass
class StepMetrics:
    upsilon: dict  # id -> exact overlap between the planned first position and the obstacle
    contour: dict  # id -> contour of touch
    active: list  # ids passed to the planner
    waypoint: np.ndarray
    cost_terminal: float
    cost_smooth: float
    scp_iterations: int
    converged: bool
    braked: bool
    solve_ms: float


def predict_obstacles(world: WorldState, horizon: int, tau: float, growth: float = 0.0):
    """Constant-velocity mean sequences for steps ``1..horizon``; covariances grow by ``i * growth * I``."""
    if horizon < 1:
        raise ConfigError("horizon must be at least 1")
    steps = np.arange(1, horizon + 1)
    out = []
    for ob in world.obstacles:
        means = ob.pos[None, :] + tau * steps[:, None] * ob.vel[None, :]
        eye = np.eye(len(ob.pos))
        covs = ob.cov[None] + growth * steps[:, None, None] * eye[None]
        out.append((means, covs))
    return out


def waypoints(start, goal, spacing: float) -> np.ndarray:
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    length = float(np.linalg.norm(goal - start))
    if length == 0:
        return goal[None].copy()
    u = (goal - start) / length
    count = int(math.ceil(length / spacing - 1e-9))
    pts = [start + min(k * spacing, length) * u for k in range(1, count + 1)]
    pts[-1] = goal.copy()
    return np.array(pts)


def select_waypoint(pos, start, goal, spacing: float) -> np.ndarray:
    """Nearest waypoint not yet passed.

    A waypoint counts as passed once the drone's progress along the
    start-goal line comes within half a spacing of it; the goal is never
    passed.
    """
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    pts = waypoints(start, goal, spacing)
    length = float(np.linalg.norm(goal - start))
    if length == 0:
        return goal
    u = (goal - start) / length
    progress = float((np.asarray(pos) - start) @ u)
    for k, p in enumerate(pts[:-1]):
        if progress < (k + 1) * spacing - 0.5 * spacing:
            return p
    return pts[-1]


def exact_overlap(drone_pos, drone_cov, obstacles, kappa: float, drone_radius: float):
    """Exact overlap (inflated beliefs) between one drone position and each obstacle."""
    if not obstacles:
        return np.zeros(0)
    cd = inflate(drone_cov, drone_radius, kappa)
    means = np.array([ob.pos for ob in obstacles])
    covs = np.array([inflate(ob.cov, ob.radius, kappa) for ob in obstacles])
    n = len(obstacles)
    _, eta, _ = solve_lambda_batch(np.broadcast_to(drone_pos, means.shape), np.broadcast_to(cd, covs.shape),
                                   means, covs)
    from scipy import special

    return 2.0 * special.ndtr(-np.asarray(eta).reshape(n))


def contour_of(upsilon: float, dim: int) -> float:
    return overlap_to_contour(min(max(float(upsilon), 1e-300), 1.0), dim)


def _sensed(world: WorldState, rng: float):
    return [ob for ob in world.obstacles if np.linalg.norm(ob.pos - world.drone_pos) <= rng]


def _in_box(pts, box):
    lo, hi = box
    return np.all((pts >= lo) & (pts <= hi), axis=-1)


def _shift(plan: TrajectorySolution, prev_ids, ids, P):
    v = np.vstack([plan.velocities[1:], plan.velocities[-1:]])
    lam = np.full((P, len(v)), 0.5)
    index = {oid: k for k, oid in enumerate(prev_ids)}
    for j, oid in enumerate(ids):
        k = index.get(oid)
        if k is not None:
            lam[j] = np.concatenate([plan.lambdas[k, 1:], plan.lambdas[k, -1:]])
    return replace(plan, velocities=v, lambdas=lam)


def build_problem(world: WorldState, config: MpcConfig, goal, start=None, previous=None):
    """ProblemSpec for the current step plus the ids of the obstacles it constrains."""
    d = len(world.drone_pos)
    start = world.drone_pos if start is None else start
    target = select_waypoint(world.drone_pos, start, goal, config.waypoint_spacing)
    sensed = _sensed(world, config.sensing_range)
    view = WorldState(world.time, world.drone_pos, world.drone_vel, sensed)
    preds = predict_obstacles(view, config.horizon, config.tau, config.cov_growth)
    ups_max = contour_to_overlap(config.c_min, d)
    ups_min = contour_to_overlap(config.c_max, d) if config.c_max is not None else None
    if previous is not None:
        ref = world.drone_pos + config.tau * np.cumsum(previous.velocities, axis=0)
    else:
        ref = np.repeat(world.drone_pos[None], config.horizon, axis=0)
    tracks = []
    for ob, (means, covs) in zip(sensed, preds):
        mask = None
        if ups_min is not None:
            if ob.wall:
                mask = np.zeros(config.horizon, dtype=bool)
            elif config.band_box is not None:
                mask = _in_box(ref, config.band_box)
        tracks.append(ObstacleTrack(
            mean_seq=means, cov_seq=covs, radius=ob.radius, name=ob.id, band_mask=mask,
            upsilon_max=contour_to_overlap(ob.c_min, d) if ob.c_min is not None else None,
        ))
    spec = ProblemSpec(
        start=world.drone_pos, goal=target, N=config.horizon, tau=config.tau,
        v_min=config.v_min, v_max=config.v_max, a_min=config.a_min, a_max=config.a_max,
        drone_cov_seq=config.drone_cov, obstacles=tracks, upsilon_max=ups_max, upsilon_min=ups_min,
        smooth_weight=config.smooth_weight, terminal_weight=config.terminal_weight,
        effort_weight=config.effort_weight, progress_weight=config.progress_weight,
        drone_radius=config.drone_radius, kappa=config.kappa, v_init=world.drone_vel,
    )
    return spec, [ob.id for ob in sensed], target


def _first_step_unsafe(plan: TrajectorySolution, spec) -> bool:
    """Does the first planned position breach an upper overlap bound?

    Later steps are re-planned before they are reached, so only the step
    about to be executed can trigger a brake.
    """
    if not spec.obstacles:
        return False
    bound = np.array([ob.upsilon_max or spec.upsilon_max for ob in spec.obstacles])
    return bool(np.any(plan.upsilons[:, 0] > bound + 1e-3))


def mpc_step(world: WorldState, config: MpcConfig, goal, start=None, previous=None, previous_ids=()):
    """One receding-horizon step: returns ``(control, plan, metrics)``.

    ``previous`` is the last plan (used as a shifted warm start).  A planner
    failure, or a first planned position that breaks an upper overlap bound,
    brakes to zero velocity.
    """
    goal = np.asarray(goal, dtype=float)
    if not np.all(np.isfinite(goal)):
        raise ConfigError("goal must be finite")
    d = len(world.drone_pos)
    warm_ref = _shift(previous, previous_ids, [], 0) if previous is not None else None
    spec, ids, target = build_problem(world, config, goal, start, warm_ref)
    init = _shift(previous, previous_ids, ids, len(ids)) if previous is not None else None
    t0 = time.perf_counter()
    braked = False
    try:
        plan = scp_solve(spec, init=init, config=config.scp)
    except (ArithmeticError, np.linalg.LinAlgError, ValueError, RuntimeError) as exc:
        logger.warning("planner failed at t=%.3f: %s", world.time, exc)
        plan = None
    elapsed = (time.perf_counter() - t0) * 1e3 if config.record_timing else 0.0
    if plan is None or not np.all(np.isfinite(plan.velocities)) or _first_step_unsafe(plan, spec):
        braked = True
        control = np.zeros(d)
    else:
        control = plan.velocities[0].copy()
    non_wall = [ob for ob in world.obstacles if not ob.wall]
    nxt = world.drone_pos + config.tau * control
    moved = [replace(ob, pos=ob.pos + config.tau * ob.vel) for ob in non_wall]
    ups = exact_overlap(nxt, config.drone_cov, moved, config.kappa, config.drone_radius)
    metrics = StepMetrics(
        upsilon={ob.id: float(u) for ob, u in zip(non_wall, ups)},
        contour={ob.id: contour_of(u, d) for ob, u in zip(non_wall, ups)},
        active=ids,
        waypoint=target,
        cost_terminal=plan.cost_terminal if plan is not None else math.nan,
        cost_smooth=plan.cost_smooth if plan is not None else math.nan,
        scp_iterations=plan.scp_iterations if plan is not None else 0,
        converged=bool(plan is not None and plan.converged),
        braked=braked,
        solve_ms=elapsed,
    )
    return control, plan, metrics


@dataclass
class StepRecord:
    t: float
    pos: np.ndarray
    vel: np.ndarray
    upsilon: list
    contour: list
    active: list
    cost_terminal: float
    cost_smooth: float
    scp_iters: int
    solve_ms: float
    braked: bool
    wall_clearance: float
    interaction: bool


@dataclass
class SimTrace:
    name: str
    dim: int
    obstacle_ids: list
    records: list
    summary: dict


def _world_at(sc: Scenario, obstacles, t: float, pos, vel) -> WorldState:
    states = [ObstacleState(ob.id, ob.position(t), ob.velocity(t), ob.cov, ob.radius, ob.c_min, ob.wall)
              for ob in obstacles]
    return WorldState(t, np.asarray(pos, dtype=float), np.asarray(vel, dtype=float), states)


def nominal_steps(sc: Scenario) -> int:
    """Straight-line travel time at the fastest admissible speed along the goal direction, in steps."""
    diff = sc.goal - sc.start
    length = float(np.linalg.norm(diff))
    if length == 0:
        return 1
    u = diff / length
    limits = [(sc.v_max[k] if u[k] > 0 else sc.v_min[k]) / u[k] for k in range(sc.dim) if abs(u[k]) > 1e-12]
    speed = min(limits)
    if speed <= 0:
        raise ConfigError("velocity bounds do not allow motion towards the goal")
    return int(math.ceil(length / speed / sc.tau))


def run_scenario(sc: Scenario, config: MpcConfig | None = None, max_steps: int | None = None,
                 callback=None) -> SimTrace:
    """Simulate until the goal tolerance is met or the step budget runs out."""
    config = config or MpcConfig.from_scenario(sc)
    obstacles = sc.all_obstacles()
    tracked = [ob for ob in obstacles if not ob.wall]
    walls = [ob for ob in obstacles if ob.wall]
    wall_pos = np.array([w.points[0] for w in walls]) if walls else np.zeros((0, sc.dim))
    wall_rad = np.array([w.radius for w in walls])
    budget = max_steps if max_steps is not None else int(math.ceil(config.budget_factor * nominal_steps(sc)))

    pos = sc.start.copy()
    vel = sc.drone_velocity.copy()
    plan, plan_ids = None, []
    records = []
    completed = False
    path_length = 0.0
    for k in range(budget):
        t = k * sc.tau
        world = _world_at(sc, obstacles, t, pos, vel)
        control, new_plan, m = mpc_step(world, config, sc.goal, start=sc.start, previous=plan,
                                        previous_ids=plan_ids)
        if new_plan is not None and not m.braked:
            plan, plan_ids = new_plan, m.active
        else:
            plan, plan_ids = None, []
        new_pos = pos + sc.tau * control
        path_length += float(np.linalg.norm(new_pos - pos))
        pos, vel = new_pos, control
        if len(wall_pos):
            clearance = float(np.min(np.linalg.norm(wall_pos - pos, axis=1) - wall_rad - sc.drone_radius))
        else:
            clearance = math.nan
        inside = sc.corridor.contains(pos) if sc.corridor is not None else False
        # realised overlap at the new time, from the scripted obstacle positions
        after = _world_at(sc, tracked, (k + 1) * sc.tau, pos, vel)
        ups = exact_overlap(pos, config.drone_cov, after.obstacles, config.kappa, config.drone_radius)
        rec = StepRecord(
            t=(k + 1) * sc.tau, pos=pos.copy(), vel=control.copy(),
            upsilon=[float(u) for u in ups], contour=[contour_of(u, sc.dim) for u in ups],
            active=[ob.id in m.active for ob in tracked], cost_terminal=m.cost_terminal,
            cost_smooth=m.cost_smooth, scp_iters=m.scp_iterations, solve_ms=m.solve_ms, braked=m.braked,
            wall_clearance=clearance, interaction=inside,
        )
        records.append(rec)
        if callback is not None:
            callback(rec, m)
        if np.linalg.norm(pos - sc.goal) <= config.goal_tolerance:
            completed = True
            break
    trace = SimTrace(sc.name, sc.dim, [ob.id for ob in tracked], records, {})
    trace.summary = summarize(trace, sc, completed, path_length)
    return trace


def summarize(trace: SimTrace, sc: Scenario, completed: bool, path_length: float) -> dict:
    recs = trace.records
    per = {}
    violated = False
    for j, oid in enumerate(trace.obstacle_ids):
        cts = np.array([r.contour[j] for r in recs]) if recs else np.zeros(0)
        ups = np.array([r.upsilon[j] for r in recs]) if recs else np.zeros(0)
        inter = np.array([r.interaction and r.active[j] for r in recs], dtype=bool)
        entry = {
            "min_ct": float(cts.min()) if len(cts) else None,
            "max_upsilon": float(ups.max()) if len(ups) else None,
        }
        if sc.c_max is not None and inter.any():
            entry["interaction_ct_min"] = float(cts[inter].min())
            entry["interaction_ct_max"] = float(cts[inter].max())
            if entry["interaction_ct_max"] > sc.c_max + CONTOUR_TOLERANCE:
                violated = True
        if len(cts) and cts.min() < sc.c_min - CONTOUR_TOLERANCE:
            violated = True
        per[oid] = entry
    clear = [r.wall_clearance for r in recs if not math.isnan(r.wall_clearance)]
    min_clear = float(min(clear)) if clear else None
    if min_clear is not None and min_clear < 0:
        violated = True
    return {
        "scenario": trace.name,
        "seed": sc.seed,
        "completed": bool(completed),
        "steps": len(recs),
        "completion_time": recs[-1].t if completed and recs else None,
        "path_length": path_length,
        "obstacles": per,
        "min_ct": min((e["min_ct"] for e in per.values() if e["min_ct"] is not None), default=None),
        "max_upsilon": max((e["max_upsilon"] for e in per.values() if e["max_upsilon"] is not None),
                           default=None),
        "min_wall_clearance": min_clear,
        "braked_steps": sum(1 for r in recs if r.braked),
        "constraint_violated": violated,
    }
