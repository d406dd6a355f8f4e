"""Scenario files and simulation traces.

Scenarios are JSON trees.  Every optional field that is missing is filled
from ``DEFAULTS`` and its path is listed in ``Scenario.defaults_used`` so the
``check`` command can echo it.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np


class ScenarioError(ValueError):
    pass


class ScenarioSyntaxError(ScenarioError):
    def __init__(self, message, line, column):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class ScenarioValidationError(ScenarioError):
    def __init__(self, field_name, reason):
        super().__init__(f"{field_name}: {reason}")
        self.field = field_name
        self.reason = reason


class DimensionMismatchError(ScenarioValidationError):
    pass


DEFAULTS = {
    "name": "unnamed",
    "dim": "length of start",
    "drone.cov": 0.02,  # times the identity
    "drone.radius": 0.0,
    "drone.velocity": 0.0,
    "obstacle.id": "obs<position in list, from 1>",
    "obstacle.radius": 0.0,
    "obstacle.velocity_in_prediction": "constant",
    "constraints.c_max": None,
    "bounds.v_min": -3.0,
    "bounds.v_max": 3.0,
    "bounds.a_min": -1.0,
    "bounds.a_max": 1.0,
    "mpc.horizon": 20,
    "mpc.tau": 0.3,
    "mpc.sensing_range": 10.0,
    "mpc.waypoint_spacing": 5.0,
    "corridor.wall_thickness": 0.25,
    "corridor.wall_c_min": 0.99,
    "corridor.axis": 0,
    "corridor.wall_axis": 1,
    "planner.terminal_weight": 1.0,
    "planner.smooth_weight": 1.0,
    "planner.effort_weight": 1e-3,
    "planner.progress_weight": 0.01,
    "planner.kappa": 3.0,
    "planner.cov_growth": 0.0,
    "planner.max_active_per_step": None,
    "planner.linearization": "quantile",
    "planner.qp_method": "interior-point",
    "planner.max_iters": 50,
    "planner.relative_delta": False,
    "seed": None,
}

WALL_COV_SCALE = 1e-4


@dataclass
class ObstacleSpec:
    id: str
    kind: str  # static | linear | scripted
    cov: np.ndarray
    radius: float
    points: np.ndarray  # static: (1, d); linear: (2, d) from/to; scripted: (K, d)
    duration: float = 0.0  # linear: travel time; scripted: sample interval
    c_min: float | None = None
    wall: bool = False

    def position(self, t: float) -> np.ndarray:
        if self.kind == "static":
            return self.points[0].copy()
        if self.kind == "linear":
            frac = min(max(t / self.duration, 0.0), 1.0) if self.duration > 0 else 1.0
            return self.points[0] + frac * (self.points[1] - self.points[0])
        # scripted samples every `duration` seconds, held at the last sample
        k = t / self.duration
        lo = int(math.floor(min(k, len(self.points) - 1)))
        hi = min(lo + 1, len(self.points) - 1)
        frac = min(k - lo, 1.0) if hi > lo else 0.0
        return self.points[lo] + frac * (self.points[hi] - self.points[lo])

    def velocity(self, t: float) -> np.ndarray:
        if self.kind == "static":
            return np.zeros_like(self.points[0])
        if self.kind == "linear":
            if self.duration <= 0 or t >= self.duration:
                return np.zeros_like(self.points[0])
            return (self.points[1] - self.points[0]) / self.duration
        k = int(math.floor(t / self.duration + 1e-9))
        if k >= len(self.points) - 1:
            return np.zeros_like(self.points[0])
        return (self.points[k + 1] - self.points[k]) / self.duration


@dataclass
class Corridor:
    box_min: np.ndarray
    box_max: np.ndarray
    wall_thickness: float
    wall_c_min: float
    axis: int = 0
    wall_axis: int = 1

    def contains(self, pos) -> bool:
        pos = np.asarray(pos)
        return bool(np.all(pos >= self.box_min) and np.all(pos <= self.box_max))

    def walls(self, dim: int) -> list:
        """Rows of static obstacles outside both lateral faces of the box."""
        r = self.wall_thickness
        start, stop = self.box_min[self.axis], self.box_max[self.axis]
        count = int(math.floor((stop - start) / r + 1e-9)) + 1
        along = start + r * np.arange(count)
        centre = 0.5 * (self.box_min + self.box_max)
        out = []
        for side, offset in (("left", self.box_min[self.wall_axis] - r), ("right", self.box_max[self.wall_axis] + r)):
            for k, a in enumerate(along):
                p = centre.copy()
                p[self.axis] = a
                p[self.wall_axis] = offset
                out.append(ObstacleSpec(
                    id=f"wall_{side}_{k}", kind="static", cov=WALL_COV_SCALE * np.eye(dim),
                    radius=r, points=p[None], c_min=self.wall_c_min, wall=True,
                ))
        return out


@dataclass
class Scenario:
    name: str
    dim: int
    start: np.ndarray
    goal: np.ndarray
    drone_cov: np.ndarray
    drone_radius: float
    drone_velocity: np.ndarray
    obstacles: list
    c_min: float
    c_max: float | None
    v_min: np.ndarray
    v_max: np.ndarray
    a_min: np.ndarray
    a_max: np.ndarray
    horizon: int
    tau: float
    sensing_range: float
    waypoint_spacing: float
    corridor: Corridor | None = None
    planner: dict = field(default_factory=dict)
    seed: int | None = None
    defaults_used: list = field(default_factory=list)

    def all_obstacles(self) -> list:
        walls = self.corridor.walls(self.dim) if self.corridor is not None else []
        return list(self.obstacles) + walls

    def describe(self) -> str:
        lines = [f"scenario {self.name}: dim={self.dim}, {len(self.obstacles)} obstacle(s)"]
        if self.corridor is not None:
            lines.append(f"corridor walls: {len(self.corridor.walls(self.dim))} static obstacles")
        for path in self.defaults_used:
            lines.append(f"default {path} = {_lookup_default(path)!r}")
        return "\n".join(lines)


def _lookup_default(path):
    key = path
    if path.startswith("obstacles["):
        key = "obstacle." + path.split(".", 1)[1]
    return DEFAULTS.get(key)


class _Reader:
    """Typed field access that records defaults and names failing fields."""

    def __init__(self, dim=None):
        self.dim = dim
        self.defaults_used = []

    def get(self, tree, key, path, default_key=None, required=False):
        if not isinstance(tree, dict):
            raise ScenarioValidationError(path.rsplit(".", 1)[0] if "." in path else path, "expected an object")
        if key in tree:
            return tree[key]
        if required:
            raise ScenarioValidationError(path, "required field missing")
        self.defaults_used.append(path)
        return DEFAULTS[default_key or path]

    def number(self, value, path, positive=False, nonneg=False):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ScenarioValidationError(path, "expected a finite number")
        if positive and value <= 0:
            raise ScenarioValidationError(path, "must be positive")
        if nonneg and value < 0:
            raise ScenarioValidationError(path, "must be non-negative")
        return float(value)

    def vector(self, value, path, broadcast=False):
        if broadcast and isinstance(value, (int, float)) and not isinstance(value, bool):
            return np.full(self.dim, float(value))
        arr = _as_array(value, path)
        if arr.shape != (self.dim,):
            raise DimensionMismatchError(path, f"expected a vector of length {self.dim}, got shape {arr.shape}")
        return arr

    def matrix(self, value, path, who):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            value = float(value) * np.eye(self.dim)
        arr = _as_array(value, path)
        if arr.shape != (self.dim, self.dim):
            raise DimensionMismatchError(path, f"expected a {self.dim}x{self.dim} matrix, got shape {arr.shape}")
        scale = np.max(np.abs(arr))
        if np.max(np.abs(arr - arr.T)) > 1e-12 * max(scale, 1e-300):
            raise ScenarioValidationError(path, f"covariance of {who} is not symmetric")
        if np.linalg.eigvalsh(arr)[0] <= 0:
            raise ScenarioValidationError(path, f"covariance of {who} is not positive definite")
        return arr


def _as_array(value, path):
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise ScenarioValidationError(path, "expected numbers") from None
    if not np.all(np.isfinite(arr)):
        raise ScenarioValidationError(path, "values must be finite")
    return arr


def parse_scenario(text) -> Scenario:
    """Parse and validate a scenario from JSON text (str or UTF-8 bytes)."""
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ScenarioSyntaxError(f"invalid UTF-8 ({exc.reason})", 1, exc.start + 1) from None
    try:
        tree = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioSyntaxError(exc.msg, exc.lineno, exc.colno) from None
    if not isinstance(tree, dict):
        raise ScenarioValidationError("<root>", "expected an object")

    rd = _Reader()
    known = {"name", "dim", "start", "goal", "drone", "obstacles", "corridor", "constraints",
             "bounds", "mpc", "planner", "seed"}
    unknown = sorted(set(tree) - known)
    if unknown:
        raise ScenarioValidationError(unknown[0], "unknown field")

    name = rd.get(tree, "name", "name")
    if not isinstance(name, str) or not name:
        raise ScenarioValidationError("name", "expected a non-empty string")
    raw_start = rd.get(tree, "start", "start", required=True)
    if "dim" in tree:
        dim = tree["dim"]
    else:
        rd.defaults_used.append("dim")
        dim = len(raw_start) if isinstance(raw_start, list) else None
    if dim not in (2, 3) or isinstance(dim, bool):
        raise ScenarioValidationError("dim", "must be 2 or 3")
    rd.dim = dim
    start = rd.vector(raw_start, "start")
    goal = rd.vector(rd.get(tree, "goal", "goal", required=True), "goal")

    drone = tree.get("drone", {})
    drone_cov = rd.matrix(rd.get(drone, "cov", "drone.cov"), "drone.cov", "the drone")
    drone_radius = rd.number(rd.get(drone, "radius", "drone.radius"), "drone.radius", nonneg=True)
    drone_velocity = rd.vector(rd.get(drone, "velocity", "drone.velocity"), "drone.velocity", broadcast=True)

    mpc = tree.get("mpc", {})
    horizon = rd.get(mpc, "horizon", "mpc.horizon")
    if isinstance(horizon, bool) or not isinstance(horizon, int) or horizon < 3:
        raise ScenarioValidationError("mpc.horizon", "must be an integer of at least 3")
    tau = rd.number(rd.get(mpc, "tau", "mpc.tau"), "mpc.tau", positive=True)
    sensing = rd.number(rd.get(mpc, "sensing_range", "mpc.sensing_range"), "mpc.sensing_range", positive=True)
    spacing = rd.number(rd.get(mpc, "waypoint_spacing", "mpc.waypoint_spacing"), "mpc.waypoint_spacing",
                        positive=True)

    obstacles = []
    raw_obs = rd.get(tree, "obstacles", "obstacles", required=True)
    if not isinstance(raw_obs, list):
        raise ScenarioValidationError("obstacles", "expected a list")
    seen = set()
    for k, ob in enumerate(raw_obs):
        base = f"obstacles[{k}]"
        oid = ob.get("id", f"obs{k + 1}") if isinstance(ob, dict) else None
        if isinstance(ob, dict) and "id" not in ob:
            rd.defaults_used.append(f"{base}.id")
        if not isinstance(oid, str) or oid in seen:
            raise ScenarioValidationError(f"{base}.id", "must be a unique string")
        seen.add(oid)
        who = f"obstacle {oid!r}"
        cov = rd.matrix(rd.get(ob, "cov", f"{base}.cov", required=True), f"{base}.cov", who)
        radius = rd.number(rd.get(ob, "radius", f"{base}.radius", "obstacle.radius"), f"{base}.radius",
                           nonneg=True)
        traj = rd.get(ob, "trajectory", f"{base}.trajectory", required=True)
        kind = rd.get(traj, "type", f"{base}.trajectory.type", required=True)
        tpath = f"{base}.trajectory"
        if kind == "static":
            points = rd.vector(rd.get(traj, "position", f"{tpath}.position", required=True),
                               f"{tpath}.position")[None]
            duration = 0.0
        elif kind == "linear":
            p0 = rd.vector(rd.get(traj, "from", f"{tpath}.from", required=True), f"{tpath}.from")
            p1 = rd.vector(rd.get(traj, "to", f"{tpath}.to", required=True), f"{tpath}.to")
            duration = rd.number(rd.get(traj, "duration", f"{tpath}.duration", required=True),
                                 f"{tpath}.duration", positive=True)
            points = np.stack([p0, p1])
        elif kind == "scripted":
            raw = rd.get(traj, "positions", f"{tpath}.positions", required=True)
            points = _as_array(raw, f"{tpath}.positions")
            if points.ndim != 2 or points.shape[1] != dim or len(points) < 1:
                raise DimensionMismatchError(f"{tpath}.positions", f"expected a list of {dim}-vectors")
            duration = rd.number(traj.get("dt", tau), f"{tpath}.dt", positive=True)
            if len(points) < horizon:
                # padded by holding the final sample so predictions always cover the horizon
                points = np.vstack([points, np.repeat(points[-1:], horizon - len(points), axis=0)])
        else:
            raise ScenarioValidationError(f"{tpath}.type", "must be static, linear or scripted")
        obstacles.append(ObstacleSpec(oid, kind, cov, radius, points, duration))

    cons = rd.get(tree, "constraints", "constraints", required=True)
    c_min = rd.number(rd.get(cons, "c_min", "constraints.c_min", required=True), "constraints.c_min")
    c_max = rd.get(cons, "c_max", "constraints.c_max")
    if not 0 < c_min < 1:
        raise ScenarioValidationError("constraints.c_min", "must lie in (0, 1)")
    if c_max is not None:
        c_max = rd.number(c_max, "constraints.c_max")
        if c_max <= c_min:
            raise ScenarioValidationError("constraints.c_max", "constraint band empty")
        if c_max >= 1:
            raise ScenarioValidationError("constraints.c_max", "must be below 1")

    bounds = tree.get("bounds", {})
    bvals = {}
    for key in ("v_min", "v_max", "a_min", "a_max"):
        bvals[key] = rd.vector(rd.get(bounds, key, f"bounds.{key}"), f"bounds.{key}", broadcast=True)
    if np.any(bvals["v_min"] >= bvals["v_max"]):
        raise ScenarioValidationError("bounds.v_max", "must exceed v_min componentwise")
    if np.any(bvals["a_min"] >= bvals["a_max"]):
        raise ScenarioValidationError("bounds.a_max", "must exceed a_min componentwise")

    corridor = None
    if "corridor" in tree and tree["corridor"] is not None:
        cor = tree["corridor"]
        bmin = rd.vector(rd.get(cor, "min", "corridor.min", required=True), "corridor.min")
        bmax = rd.vector(rd.get(cor, "max", "corridor.max", required=True), "corridor.max")
        if np.any(bmin >= bmax):
            raise ScenarioValidationError("corridor.max", "box is empty")
        thick = rd.number(rd.get(cor, "wall_thickness", "corridor.wall_thickness"), "corridor.wall_thickness",
                          positive=True)
        wall_c = rd.number(rd.get(cor, "wall_c_min", "corridor.wall_c_min"), "corridor.wall_c_min")
        if not 0 < wall_c < 1:
            raise ScenarioValidationError("corridor.wall_c_min", "must lie in (0, 1)")
        axis = rd.get(cor, "axis", "corridor.axis")
        wall_axis = rd.get(cor, "wall_axis", "corridor.wall_axis")
        for path, ax in (("corridor.axis", axis), ("corridor.wall_axis", wall_axis)):
            if isinstance(ax, bool) or not isinstance(ax, int) or not 0 <= ax < dim:
                raise ScenarioValidationError(path, f"must be an axis index below {dim}")
        if axis == wall_axis:
            raise ScenarioValidationError("corridor.wall_axis", "must differ from corridor.axis")
        corridor = Corridor(bmin, bmax, thick, wall_c, axis, wall_axis)

    planner_raw = tree.get("planner", {})
    if not isinstance(planner_raw, dict):
        raise ScenarioValidationError("planner", "expected an object")
    planner = {}
    for key in ("terminal_weight", "smooth_weight", "effort_weight", "progress_weight", "kappa", "cov_growth",
                "max_active_per_step", "linearization", "qp_method", "max_iters", "relative_delta"):
        planner[key] = rd.get(planner_raw, key, f"planner.{key}")
    unknown = sorted(set(planner_raw) - set(planner))
    if unknown:
        raise ScenarioValidationError(f"planner.{unknown[0]}", "unknown field")
    for key in ("terminal_weight", "kappa"):
        planner[key] = rd.number(planner[key], f"planner.{key}", positive=True)
    for key in ("smooth_weight", "effort_weight", "progress_weight", "cov_growth"):
        planner[key] = rd.number(planner[key], f"planner.{key}", nonneg=True)
    cap = planner["max_active_per_step"]
    if cap is not None and (isinstance(cap, bool) or not isinstance(cap, int) or cap < 1):
        raise ScenarioValidationError("planner.max_active_per_step", "must be a positive integer or null")
    it = planner["max_iters"]
    if isinstance(it, bool) or not isinstance(it, int) or it < 1:
        raise ScenarioValidationError("planner.max_iters", "must be a positive integer")
    if not isinstance(planner["relative_delta"], bool):
        raise ScenarioValidationError("planner.relative_delta", "must be true or false")
    if planner["linearization"] not in ("quantile", "overlap"):
        raise ScenarioValidationError("planner.linearization", "must be quantile or overlap")
    if planner["qp_method"] not in ("interior-point", "admm"):
        raise ScenarioValidationError("planner.qp_method", "must be interior-point or admm")

    seed = rd.get(tree, "seed", "seed")
    if seed is not None and (isinstance(seed, bool) or not isinstance(seed, int)):
        raise ScenarioValidationError("seed", "must be an integer or null")

    return Scenario(
        name=name, dim=dim, start=start, goal=goal, drone_cov=drone_cov, drone_radius=drone_radius,
        drone_velocity=drone_velocity, obstacles=obstacles, c_min=c_min, c_max=c_max,
        v_min=bvals["v_min"], v_max=bvals["v_max"], a_min=bvals["a_min"], a_max=bvals["a_max"],
        horizon=horizon, tau=tau, sensing_range=sensing, waypoint_spacing=spacing, corridor=corridor,
        planner=planner, seed=seed, defaults_used=rd.defaults_used,
    )


def load_scenario(path) -> Scenario:
    with open(path, "rb") as fh:
        return parse_scenario(fh.read())


# ---------------------------------------------------------------------------
# traces

def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".15g")


def trace_header(dim: int, obstacle_ids) -> list:
    axes = "xyz"[:dim]
    cols = ["t"] + list(axes) + [f"v{a}" for a in axes]
    for k in range(1, len(obstacle_ids) + 1):
        cols += [f"obs{k}_upsilon", f"obs{k}_ct", f"obs{k}_active"]
    cols += ["cost_terminal", "cost_smooth", "scp_iters", "solve_ms", "braked", "wall_clearance"]
    return cols


def trace_rows(trace):
    for r in trace.records:
        row = [r.t, *r.pos, *r.vel]
        for u, c, a in zip(r.upsilon, r.contour, r.active):
            row += [u, c, bool(a)]
        row += [r.cost_terminal, r.cost_smooth, int(r.scp_iters), r.solve_ms, bool(r.braked), r.wall_clearance]
        yield [_fmt(v) for v in row]


def summary_json(trace) -> str:
    return json.dumps(_jsonable(trace.summary), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return float(_fmt(v)) if math.isfinite(v) else None
    return obj


def sidecar_path(path) -> str:
    root, _ = os.path.splitext(os.fspath(path))
    return root + ".summary.json"


def write_trace(trace, destination) -> int:
    """Write the per-step CSV; returns the number of bytes written.

    ``destination`` is a path (the summary goes to a ``.summary.json`` sidecar)
    or a text stream (CSV only).
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(trace_header(trace.dim, trace.obstacle_ids))
    writer.writerows(trace_rows(trace))
    text = buf.getvalue()
    if hasattr(destination, "write"):
        destination.write(text)
        return len(text.encode("utf-8"))
    with open(destination, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    with open(sidecar_path(destination), "w", encoding="utf-8") as fh:
        fh.write(summary_json(trace))
    return len(text.encode("utf-8"))


def read_trace(source):
    """Read a trace CSV into ``(header, columns)`` with float columns."""
    if hasattr(source, "read"):
        text = source.read()
    else:
        with open(source, encoding="utf-8") as fh:
            text = fh.read()
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise ScenarioError("trace is empty")
    header = rows[0]
    data = np.array([[float(v) for v in row] for row in rows[1:]], dtype=float).reshape(-1, len(header))
    return header, {name: data[:, k] for k, name in enumerate(header)}


def read_summary(path) -> dict:
    with open(sidecar_path(path), encoding="utf-8") as fh:
        return json.load(fh)
