import io
import json

import numpy as np
import pytest

from gop import mpc
from gop.cli import _load
from gop.mpc import ConfigError, MpcConfig, ObstacleState, WorldState, mpc_step, run_scenario
from gop.overlap import contour_to_overlap
from gop.scenario import parse_scenario, write_trace

TRIVIAL = {
    "name": "trivial",
    "start": [0, 0, 0],
    "goal": [5, 0, 0],
    "obstacles": [],
    "constraints": {"c_min": 0.9},
    "bounds": {"v_min": [0, -1, -1], "v_max": [2, 1, 1], "a_min": -1, "a_max": 1},
    "mpc": {"horizon": 10, "tau": 0.3},
}


def obstacle(oid, pos, vel=(0, 0, 0), cov=0.02, radius=0.5):
    return ObstacleState(oid, np.asarray(pos, float), np.asarray(vel, float), cov * np.eye(3), radius)


def config(**kw):
    base = dict(horizon=10, tau=0.3, sensing_range=10.0, c_min=0.9, v_min=[-2] * 3, v_max=[2] * 3,
                a_min=[-1] * 3, a_max=[1] * 3, drone_cov=0.02 * np.eye(3), drone_radius=0.5)
    base.update(kw)
    return MpcConfig(**base)


@pytest.fixture(scope="module")
def head_on_trace():
    return run_scenario(_load("head_on"))


# --- prediction ----------------------------------------------------------------

def test_predict_static_and_moving():
    world = WorldState(0.0, np.zeros(3), np.zeros(3),
                       [obstacle("a", [1, 2, 3]), obstacle("b", [0, 0, 0], vel=[1, 0, 0])])
    (ma, ca), (mb, _) = mpc.predict_obstacles(world, 5, 0.3)
    np.testing.assert_array_equal(ma, np.tile([1, 2, 3], (5, 1)))
    np.testing.assert_allclose(np.diff(mb[:, 0]), 0.3, atol=1e-15)
    assert abs(mb[0, 0] - 0.3) <= 1e-15
    np.testing.assert_array_equal(ca, np.broadcast_to(0.02 * np.eye(3), (5, 3, 3)))


def test_predict_covariance_growth():
    world = WorldState(0.0, np.zeros(3), np.zeros(3), [obstacle("a", [1, 0, 0])])
    [(_, covs)] = mpc.predict_obstacles(world, 4, 0.5, growth=0.01)
    for i, c in enumerate(covs, start=1):
        np.testing.assert_allclose(c, (0.02 + 0.01 * i) * np.eye(3), atol=1e-15)
        assert np.linalg.eigvalsh(c)[0] > 0
    with pytest.raises(ConfigError):
        mpc.predict_obstacles(world, 0, 0.5)


# --- configuration and sensing -----------------------------------------------

@pytest.mark.parametrize("bad", [dict(horizon=2), dict(sensing_range=0.0), dict(c_min=1.0),
                                 dict(c_max=0.5), dict(tau=0.0)])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        config(**bad)


def test_sensing_boundary():
    cfg = config()
    world = WorldState(0.0, np.zeros(3), np.zeros(3),
                       [obstacle("far", [10.1, 0, 0]), obstacle("near", [0, 9.9, 0])])
    spec, ids, _ = mpc.build_problem(world, cfg, np.array([20.0, 0, 0]))
    assert ids == ["near"]
    assert [ob.name for ob in spec.obstacles] == ["near"]


def test_sensing_monotone(rng):
    for _ in range(50):
        obs = [obstacle(f"o{k}", rng.uniform(-15, 15, 3)) for k in range(6)]
        world = WorldState(0.0, rng.uniform(-2, 2, 3), np.zeros(3), obs)
        small, large = sorted(rng.uniform(1, 20, 2))
        _, ids_small, _ = mpc.build_problem(world, config(sensing_range=small), np.array([20.0, 0, 0]))
        _, ids_large, _ = mpc.build_problem(world, config(sensing_range=large), np.array([20.0, 0, 0]))
        assert set(ids_small) <= set(ids_large)


def test_no_sensed_obstacle_gives_unconstrained_plan():
    cfg = config()
    world = WorldState(0.0, np.zeros(3), np.zeros(3), [obstacle("far", [50, 0, 0])])
    control, plan, m = mpc_step(world, cfg, np.array([3.0, 0, 0]))
    assert m.active == [] and plan.lambdas.shape == (0, cfg.horizon)
    assert not m.braked and plan.converged


# --- waypoints -------------------------------------------------------------------

def test_waypoints_and_selection():
    start, goal = np.zeros(3), np.array([30.0, 0, 0])
    np.testing.assert_allclose(mpc.waypoints(start, goal, 10.0), [[10, 0, 0], [20, 0, 0], [30, 0, 0]])
    np.testing.assert_allclose(mpc.waypoints(start, np.array([25.0, 0, 0]), 10.0)[-1], [25, 0, 0])
    assert mpc.select_waypoint([0, 0, 0], start, goal, 10.0)[0] == 10
    assert mpc.select_waypoint([4.9, 1, 0], start, goal, 10.0)[0] == 10
    assert mpc.select_waypoint([5.1, 0, 0], start, goal, 10.0)[0] == 20
    assert mpc.select_waypoint([29.9, 0, 0], start, goal, 10.0)[0] == 30
    assert mpc.select_waypoint([40, 0, 0], start, goal, 10.0)[0] == 30


# --- single steps ------------------------------------------------------------------

def test_antipodal_step_keeps_contours_outside_bound():
    sc = _load("antipodal")
    cfg = MpcConfig.from_scenario(sc)
    world = WorldState(0.0, np.array([5.0, 0, 0]), np.array([1.0, 0, 0]), [
        obstacle("obs1", [12, 0, 0], vel=[-1, 0, 0]),
        obstacle("obs2", [14, 2.5, 0], vel=[-1, 0, 0]),
        obstacle("obs3", [14, -2.5, 0], vel=[-1, 0, 0]),
    ])
    control, plan, m = mpc_step(world, cfg, sc.goal, start=sc.start)
    assert not m.braked and sorted(m.active) == ["obs1", "obs2", "obs3"]
    assert plan.upsilons.max() <= contour_to_overlap(0.90, 3) + 1e-3
    assert min(m.contour.values()) >= 0.90 - 0.01
    assert all(mpc.contour_of(u, 3) >= 0.90 - 1e-3 for u in plan.upsilons.ravel())


def test_planner_failure_brakes(monkeypatch):
    def boom(*args, **kwargs):
        raise RuntimeError("no plan")

    monkeypatch.setattr(mpc, "scp_solve", boom)
    world = WorldState(0.0, np.zeros(3), np.array([1.0, 0, 0]), [obstacle("a", [3, 0, 0])])
    control, plan, m = mpc_step(world, config(), np.array([5.0, 0, 0]))
    assert m.braked and plan is None
    np.testing.assert_array_equal(control, np.zeros(3))


def test_goal_must_be_finite():
    world = WorldState(0.0, np.zeros(3), np.zeros(3), [])
    with pytest.raises(ConfigError):
        mpc_step(world, config(), np.array([np.nan, 0, 0]))


# --- closed loop --------------------------------------------------------------------

def test_trivial_run():
    trace = run_scenario(parse_scenario(json.dumps(TRIVIAL)))
    s = trace.summary
    assert s["completed"] and not s["constraint_violated"]
    assert s["min_ct"] is None and s["obstacles"] == {}
    final = trace.records[-1].pos
    assert np.linalg.norm(final - [5, 0, 0]) <= 0.2
    # straight: the travelled length is the displacement
    assert abs(s["path_length"] - np.linalg.norm(final)) <= 1e-9


def test_trivial_run_path_length():
    # the default 0.2 m goal ball already stops a decelerating drone near 4.8 m,
    # so the 5 m +- 0.1 length is checked with a tighter stopping radius
    sc = parse_scenario(json.dumps(TRIVIAL))
    trace = run_scenario(sc, MpcConfig.from_scenario(sc, goal_tolerance=0.05))
    assert trace.summary["completed"]
    assert abs(trace.summary["path_length"] - 5.0) <= 0.1


def test_step_budget_marks_incomplete():
    trace = run_scenario(parse_scenario(json.dumps(TRIVIAL)), max_steps=3)
    assert not trace.summary["completed"] and trace.summary["completion_time"] is None
    assert len(trace.records) == 3


def test_head_on_run(head_on_trace):
    s = head_on_trace.summary
    assert s["completed"] and not s["constraint_violated"]
    assert s["min_ct"] >= 0.60 - 0.01
    assert s["braked_steps"] == 0


def test_executed_states_follow_motion_model(head_on_trace):
    sc = _load("head_on")
    prev = sc.start
    for k, r in enumerate(head_on_trace.records, start=1):
        np.testing.assert_allclose(r.pos, prev + sc.tau * r.vel, atol=1e-12)
        assert abs(r.t - k * sc.tau) <= 1e-12
        prev = r.pos


def test_summary_matches_records(head_on_trace):
    cts = [r.contour[0] for r in head_on_trace.records]
    ups = [r.upsilon[0] for r in head_on_trace.records]
    s = head_on_trace.summary
    assert s["obstacles"]["obs1"]["min_ct"] == min(cts)
    assert s["obstacles"]["obs1"]["max_upsilon"] == max(ups)
    assert s["steps"] == len(head_on_trace.records)


def test_reported_contours_are_exact(head_on_trace):
    sc = _load("head_on")
    ob = sc.obstacles[0]
    for r in head_on_trace.records:
        world = WorldState(r.t, r.pos, r.vel, [obstacle("obs1", ob.position(r.t), cov=0.02, radius=ob.radius)])
        [u] = mpc.exact_overlap(r.pos, sc.drone_cov, world.obstacles, 3.0, sc.drone_radius)
        assert u == r.upsilon[0]


def test_run_is_deterministic(head_on_trace):
    again = run_scenario(_load("head_on"))
    a, b = io.StringIO(), io.StringIO()
    write_trace(head_on_trace, a)
    write_trace(again, b)
    assert a.getvalue() == b.getvalue()
    assert again.summary == head_on_trace.summary


def test_warm_start_does_not_change_feasibility():
    sc = _load("head_on")
    cfg = MpcConfig.from_scenario(sc)
    world = WorldState(2.0, np.array([1.0, 0, 0]), np.array([1.0, 0, 0]),
                       [obstacle("obs1", [8.0, 0, 0], vel=[-1, 0, 0])])
    _, cold, _ = mpc_step(world, cfg, sc.goal, start=sc.start)
    _, warm, _ = mpc_step(world, cfg, sc.goal, start=sc.start, previous=cold, previous_ids=["obs1"])
    for plan in (cold, warm):
        assert not plan.constraint_violated
        assert np.all(plan.velocities <= cfg.v_max + 1e-6) and np.all(plan.velocities >= cfg.v_min - 1e-6)
