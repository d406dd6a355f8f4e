"""Chance-constrained trajectory optimisation by sequential convex programming.

Decision variables are the velocity commands ``V_1..V_N`` and one blend
parameter ``lam[j, i]`` per obstacle ``j`` and step ``i``.  Each iteration
linearises the overlap constraint and the admissibility residual about the
reference ``(V_bar, lam_bar)`` and solves a QP with

* a squared-Mahalanobis terminal cost and a jerk (second difference) cost,
* velocity and acceleration bounds,
* a box trust region around the reference,
* slack-relaxed linearised overlap bounds ``upsilon <= upsilon_max``
  (and ``>= upsilon_min`` where a band is requested),
* a slack-relaxed linearised admissibility equality.

Steps are accepted when the exact penalty merit does not increase.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .chance import DEFAULT_KAPPA, inflate, pair_terms
from .overlap import chi_square_quantile, overlap_radius, solve_lambda_batch
from .qp import QPError, solve_qp

logger = logging.getLogger(__name__)


class ProblemError(ValueError):
    pass


@dataclass
class ObstacleTrack:
    """Predicted obstacle belief over the horizon (raw covariances)."""

    mean_seq: np.ndarray  # (N, d)
    cov_seq: np.ndarray  # (N, d, d)
    radius: float = 0.0
    upsilon_max: float | None = None  # overrides ProblemSpec.upsilon_max
    band_mask: np.ndarray | None = None  # steps where upsilon_min applies
    name: str = ""


@dataclass
class ProblemSpec:
    start: np.ndarray
    goal: np.ndarray
    N: int
    tau: float
    v_min: np.ndarray
    v_max: np.ndarray
    a_min: np.ndarray
    a_max: np.ndarray
    drone_cov_seq: np.ndarray  # (N, d, d)
    obstacles: list = field(default_factory=list)
    upsilon_max: float = 1.0
    upsilon_min: float | None = None
    smooth_weight: float = 1.0
    terminal_weight: float = 1.0
    effort_weight: float = 1e-3  # tau * sum |v|^2, removes the jerk cost's free velocity ramps
    progress_weight: float = 0.0  # sum_i of the goal Mahalanobis distance at every step
    drone_radius: float = 0.0
    kappa: float = DEFAULT_KAPPA
    v_init: np.ndarray | None = None  # velocity before V_1, for the first acceleration row

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=float)
        self.goal = np.asarray(self.goal, dtype=float)
        d = self.start.shape[0]
        for name in ("v_min", "v_max", "a_min", "a_max"):
            setattr(self, name, np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (d,)).copy())
        cov = np.asarray(self.drone_cov_seq, dtype=float)
        if cov.ndim == 2:
            cov = np.broadcast_to(cov, (self.N, d, d)).copy()
        self.drone_cov_seq = cov
        if self.v_init is not None:
            self.v_init = np.asarray(self.v_init, dtype=float)
        if self.N < 3:
            raise ProblemError("horizon N must be at least 3")
        if self.tau <= 0:
            raise ProblemError("tau must be positive")
        if np.any(self.v_min >= self.v_max) or np.any(self.a_min >= self.a_max):
            raise ProblemError("bounds must satisfy min < max componentwise")
        if self.drone_cov_seq.shape != (self.N, d, d):
            raise ProblemError("drone_cov_seq must have shape (N, d, d)")
        if min(self.effort_weight, self.smooth_weight, self.progress_weight) < 0 or self.terminal_weight <= 0:
            raise ProblemError("cost weights must be non-negative (terminal positive)")
        if not 0 < self.upsilon_max <= 1:
            raise ProblemError("upsilon_max must lie in (0, 1]")
        if self.upsilon_min is not None and not 0 < self.upsilon_min < self.upsilon_max:
            raise ProblemError("need 0 < upsilon_min < upsilon_max")
        for ob in self.obstacles:
            ob.mean_seq = np.asarray(ob.mean_seq, dtype=float)
            ob.cov_seq = np.asarray(ob.cov_seq, dtype=float)
            if ob.cov_seq.ndim == 2:
                ob.cov_seq = np.broadcast_to(ob.cov_seq, (self.N, d, d)).copy()
            if ob.mean_seq.shape != (self.N, d) or ob.cov_seq.shape != (self.N, d, d):
                raise ProblemError(f"obstacle {ob.name!r} sequences must cover N={self.N} steps")

    @property
    def dim(self) -> int:
        return self.start.shape[0]


@dataclass
class SCPConfig:
    delta: float = 1e-3
    max_iters: int = 50
    relative_delta: bool = False  # compare merit changes against delta * max(1, |merit|)
    trust_region: float = 0.5
    trust_region_max: float = 2.0
    trust_region_min: float = 1e-4
    lambda_trust: float = 0.25
    slack_penalty: float = 1e4
    lambda_bounds: tuple = (0.01, 0.99)
    activation_factor: float = 3.0
    max_active_per_step: int | None = None
    linearization: str = "quantile"  # or "overlap"
    qp_method: str = "interior-point"
    lateral_nudge: float = 0.02
    gap_tol: float = 2.5e-3  # max exact-vs-linear overlap gap at binding rows to declare convergence
    callback: object = None  # called with each diagnostics record


@dataclass
class TrajectorySolution:
    velocities: np.ndarray
    positions: np.ndarray
    lambdas: np.ndarray
    upsilons: np.ndarray
    cost_terminal: float
    cost_smooth: float
    scp_iterations: int
    converged: bool
    per_iteration_cost: list
    constraint_violated: bool = False
    linearization_gap: float = 0.0
    trust_region: float = 0.0  # final radius; a warm start resumes from it
    diagnostics: list = field(default_factory=list)
    solve_time: float = 0.0

    @property
    def contour_radii(self) -> np.ndarray:
        """Whitened touching radius per (obstacle, step)."""
        return _radius_from_upsilon(self.upsilons)


def _radius_from_upsilon(ups):
    ups = np.clip(ups, 1e-300, 1.0)
    return np.array([overlap_radius(u) for u in ups.ravel()]).reshape(ups.shape)


def rollout(start, velocities, tau: float) -> np.ndarray:
    """Positions ``x_i = x_0 + tau * sum_{k<=i} v_k`` for ``i = 1..N``."""
    if tau <= 0:
        raise ProblemError("tau must be positive")
    velocities = np.asarray(velocities, dtype=float)
    return np.asarray(start, dtype=float) + tau * np.cumsum(velocities, axis=0)


def terminal_cost(final_pos, final_cov, goal) -> float:
    diff = np.asarray(final_pos, dtype=float) - np.asarray(goal, dtype=float)
    return float(diff @ np.linalg.solve(final_cov, diff))


def smoothness_cost(velocities, tau: float) -> float:
    v = np.asarray(velocities, dtype=float)
    if len(v) < 3:
        raise ProblemError("smoothness cost needs at least three velocities")
    jerk = (v[2:] + v[:-2] - 2.0 * v[1:-1]) / tau**2
    return float(np.sum(jerk**2))


class _Costs:
    """Exact quadratic cost ``1/2 V^T P V + q^T V + c`` over flattened velocities."""

    def __init__(self, spec: ProblemSpec):
        N, d, tau = spec.N, spec.dim, spec.tau
        W = np.linalg.inv(spec.drone_cov_seq[-1])
        E = np.tile(np.eye(d), (1, N))
        offset = spec.start - spec.goal
        L = np.zeros(((N - 2) * d, N * d))
        for i in range(N - 2):
            for k, c in enumerate((1.0, -2.0, 1.0)):
                L[i * d : (i + 1) * d, (i + k) * d : (i + k + 1) * d] = c * np.eye(d)
        wt, ws = spec.terminal_weight, spec.smooth_weight
        we = spec.effort_weight
        self.P = (2.0 * wt * tau**2 * E.T @ W @ E + 2.0 * ws * L.T @ L / tau**4
                  + 2.0 * we * tau * np.eye(N * d))
        self.q = 2.0 * wt * tau * E.T @ W @ offset
        self.c = wt * float(offset @ W @ offset)
        wp = spec.progress_weight
        if wp > 0:
            # position i depends on V_k for k <= i, so block (k, l) collects N - max(k, l) copies of W
            k = np.arange(N)
            count = (N - np.maximum.outer(k, k)).astype(float)
            self.P += 2.0 * wp * tau**2 * np.kron(count, W)
            self.q += 2.0 * wp * tau * np.kron((N - k).astype(float), W @ offset)
            self.c += wp * N * float(offset @ W @ offset)
        self.spec = spec

    def value(self, v_flat):
        return float(0.5 * v_flat @ self.P @ v_flat + self.q @ v_flat + self.c)

    def breakdown(self, velocities):
        spec = self.spec
        pos = rollout(spec.start, velocities, spec.tau)
        return (terminal_cost(pos[-1], spec.drone_cov_seq[-1], spec.goal),
                smoothness_cost(velocities, spec.tau))


def _accel_rows(spec: ProblemSpec):
    """Rows ``G`` and bounds ``lo <= G V <= hi`` for the acceleration limits."""
    N, d, tau = spec.N, spec.dim, spec.tau
    rows, lo, hi = [], [], []
    if spec.v_init is not None:
        r = np.zeros((d, N * d))
        r[:, :d] = np.eye(d)
        rows.append(r)
        lo.append(spec.a_min * tau + spec.v_init)
        hi.append(spec.a_max * tau + spec.v_init)
    for i in range(N - 1):
        r = np.zeros((d, N * d))
        r[:, i * d : (i + 1) * d] = -np.eye(d)
        r[:, (i + 1) * d : (i + 2) * d] = np.eye(d)
        rows.append(r)
        lo.append(spec.a_min * tau)
        hi.append(spec.a_max * tau)
    return np.vstack(rows), np.concatenate(lo), np.concatenate(hi)


class _Pairs:
    """Inflated beliefs for every (obstacle, step) pair."""

    def __init__(self, spec: ProblemSpec, cfg: SCPConfig):
        P, N, d = len(spec.obstacles), spec.N, spec.dim
        self.P, self.N, self.d = P, N, d
        self.cov_d = inflate(spec.drone_cov_seq, spec.drone_radius, spec.kappa)
        if P:
            self.means = np.stack([ob.mean_seq for ob in spec.obstacles])
            self.cov_o = np.stack([inflate(ob.cov_seq, ob.radius, spec.kappa) for ob in spec.obstacles])
        else:
            self.means = np.zeros((0, N, d))
            self.cov_o = np.zeros((0, N, d, d))
        ups_max = np.array([ob.upsilon_max or spec.upsilon_max for ob in spec.obstacles])
        self.ups_max = np.broadcast_to(ups_max[:, None], (P, N)) if P else np.zeros((0, N))
        self.band = np.zeros((P, N), dtype=bool)
        if spec.upsilon_min is not None:
            for j, ob in enumerate(spec.obstacles):
                self.band[j] = True if ob.band_mask is None else np.asarray(ob.band_mask, dtype=bool)
        self.ups_min = spec.upsilon_min
        self.r_max = np.vectorize(overlap_radius)(self.ups_max) if P else np.zeros((0, N))
        self.r_band = overlap_radius(spec.upsilon_min) if spec.upsilon_min is not None else None
        # activation distance: a multiple of the combined 99% contour extent
        r99 = math.sqrt(chi_square_quantile(0.99, d))
        sd = np.sqrt(np.linalg.eigvalsh(self.cov_d)[:, -1])
        so = np.sqrt(np.linalg.eigvalsh(self.cov_o)[..., -1]) if P else np.zeros((0, N))
        self.act_radius = cfg.activation_factor * r99 * (sd[None, :] + so)
        self.cfg = cfg

    def near(self, positions):
        """Boolean (P, N) mask of pairs inside the activation distance."""
        if self.P == 0:
            return np.zeros((0, self.N), dtype=bool)
        dist = np.linalg.norm(self.means - positions[None], axis=2)
        mask = dist < self.act_radius
        cap = self.cfg.max_active_per_step
        if cap is not None:
            ratio = np.where(mask, dist / self.act_radius, np.inf)
            order = np.argsort(ratio, axis=0, kind="stable")
            keep = np.zeros_like(mask)
            for i in range(self.N):
                keep[order[:cap, i], i] = True
            mask &= keep
        return mask

    def terms(self, positions, lam, idx):
        j, i = idx
        return pair_terms(positions[i], self.cov_d[i], self.means[j, i], self.cov_o[j, i], lam[j, i])

    def exact_lambda(self, positions, idx):
        j, i = idx
        lam, eta, _ = solve_lambda_batch(positions[i], self.cov_d[i], self.means[j, i], self.cov_o[j, i])
        return lam, eta


def _violations(pairs: _Pairs, t, idx, mode):
    """Per-pair constraint violations in the units the slacks use."""
    j, i = idx
    if mode == "quantile":
        up = np.maximum(0.0, pairs.r_max[j, i] - t.psi)
        lo = np.maximum(0.0, t.psi - pairs.r_band) if pairs.r_band is not None else np.zeros_like(up)
    else:
        up = np.maximum(0.0, t.f1 - pairs.ups_max[j, i])
        lo = np.maximum(0.0, pairs.ups_min - t.f1) if pairs.ups_min is not None else np.zeros_like(up)
    lo = np.where(pairs.band[j, i], lo, 0.0)
    adm = np.abs(t.f2) / t.scale
    return up, lo, adm


def _straight_line(spec: ProblemSpec, nudge: float):
    N, d = spec.N, spec.dim
    v = np.tile((spec.goal - spec.start) / (N * spec.tau), (N, 1))
    return _add_nudge(spec, np.clip(v, spec.v_min, spec.v_max), nudge)


def _add_nudge(spec, v, nudge):
    """Small zero-mean lateral wiggle that breaks head-on symmetry."""
    if nudge == 0:
        return v
    d = spec.dim
    axis = spec.goal - spec.start
    norm = np.linalg.norm(axis)
    axis = axis / norm if norm > 0 else np.eye(d)[0]
    if d == 2:
        perp = np.array([-axis[1], axis[0]])
    else:
        perp = np.cross(np.array([0.0, 0.0, 1.0]), axis)
        if np.linalg.norm(perp) < 1e-9:
            perp = np.array([0.0, 1.0, 0.0])
        perp /= np.linalg.norm(perp)
    phase = 2.0 * np.pi * (np.arange(spec.N) + 0.5) / spec.N
    return np.clip(v + nudge * np.sin(phase)[:, None] * perp[None], spec.v_min, spec.v_max)


def _project_linear(spec, v0, accel, method):
    """Closest velocity profile satisfying the velocity and acceleration limits."""
    G, lo, hi = accel
    flat = v0.ravel()
    g = G @ flat
    tol = 1e-9
    if (np.all(flat >= np.tile(spec.v_min, spec.N) - tol) and np.all(flat <= np.tile(spec.v_max, spec.N) + tol)
            and np.all(g >= lo - tol) and np.all(g <= hi + tol)):
        return v0
    n = flat.size
    res = solve_qp(2.0 * np.eye(n), -2.0 * flat, G=np.vstack([G, -G]), h=np.concatenate([hi, -lo]),
                   lb=np.tile(spec.v_min, spec.N), ub=np.tile(spec.v_max, spec.N), method=method)
    return res.x.reshape(v0.shape)


def scp_solve(spec: ProblemSpec, init: TrajectorySolution | None = None,
              config: SCPConfig | None = None) -> TrajectorySolution:
    """Optimise velocities and blend parameters for one planning horizon."""
    cfg = config or SCPConfig()
    if cfg.delta <= 0 or cfg.max_iters < 1 or cfg.trust_region <= 0:
        raise ProblemError("invalid SCP settings")
    if cfg.linearization not in ("quantile", "overlap"):
        raise ProblemError(f"unknown linearization {cfg.linearization!r}")
    t_start = time.perf_counter()
    N, d, tau = spec.N, spec.dim, spec.tau
    costs = _Costs(spec)
    accel = _accel_rows(spec)
    pairs = _Pairs(spec, cfg)
    lam_lo, lam_hi = cfg.lambda_bounds
    rho = cfg.slack_penalty
    mode = cfg.linearization

    if init is not None and init.velocities.shape == (N, d):
        v_ref = _add_nudge(spec, np.clip(init.velocities, spec.v_min, spec.v_max), cfg.lateral_nudge)
    else:
        v_ref = _straight_line(spec, cfg.lateral_nudge)
    v_ref = _project_linear(spec, v_ref, accel, cfg.qp_method)
    lam = np.full((pairs.P, N), 0.5)

    def evaluate(v):
        """Exact merit at a velocity profile.

        Every pair inside the activation distance is scored with its exact
        admissible lambda, so the merit is the true overlap violation and the
        QP model agrees with it at the reference.
        """
        pos = rollout(spec.start, v, tau)
        near = pairs.near(pos)
        lam_eval = lam.copy()
        idx = np.nonzero(near)
        viol = 0.0
        t = None
        if idx[0].size:
            lam_eval[idx], _ = pairs.exact_lambda(pos, idx)
            lam_eval[idx] = np.clip(lam_eval[idx], lam_lo, lam_hi)
            t = pairs.terms(pos, lam_eval, idx)
            up, lo, adm = _violations(pairs, t, idx, mode)
            viol = float(np.sum(up + lo + adm))
        return costs.value(v.ravel()) + rho * viol, pos, near, lam_eval, idx, t, viol

    merit, pos, near, lam, idx, terms, viol = evaluate(v_ref)
    history = [merit]
    diagnostics = []
    trust = cfg.trust_region
    if init is not None and init.trust_region > 0:
        trust = min(cfg.trust_region, max(2.0 * init.trust_region, cfg.trust_region_min))
    converged = False
    iterations = 0
    lin_gap = 0.0
    Gacc, acc_lo, acc_hi = accel

    while iterations < cfg.max_iters:
        iterations += 1
        n_pairs = idx[0].size
        nV = N * d
        n_band = int(np.sum(pairs.band[idx])) if n_pairs else 0
        band_rows = np.flatnonzero(pairs.band[idx]) if n_pairs else np.zeros(0, dtype=int)
        # variable layout: V | lam | s_up | s_band | s_adm_pos | s_adm_neg
        o_lam = nV
        o_up = o_lam + n_pairs
        o_band = o_up + n_pairs
        o_ap = o_band + n_band
        o_am = o_ap + n_pairs
        n = o_am + n_pairs

        Pq = np.zeros((n, n))
        Pq[:nV, :nV] = costs.P
        qq = np.zeros(n)
        qq[:nV] = costs.q
        qq[o_up:] = rho

        lb = np.full(n, -np.inf)
        ub = np.full(n, np.inf)
        v_flat = v_ref.ravel()
        vmin = np.tile(spec.v_min, N)
        vmax = np.tile(spec.v_max, N)
        if n_pairs:
            lb[:nV] = np.maximum(vmin, v_flat - trust)
            ub[:nV] = np.minimum(vmax, v_flat + trust)
        else:
            lb[:nV], ub[:nV] = vmin, vmax
        lam_ref = lam[idx] if n_pairs else np.zeros(0)
        lam_trust = cfg.lambda_trust * trust / cfg.trust_region
        lb[o_lam:o_up] = np.maximum(lam_lo, lam_ref - lam_trust)
        ub[o_lam:o_up] = np.minimum(lam_hi, lam_ref + lam_trust)
        lb[o_up:] = 0.0

        G_rows = [np.hstack([Gacc, np.zeros((len(Gacc), n - nV))]),
                  np.hstack([-Gacc, np.zeros((len(Gacc), n - nV))])]
        h_rows = [acc_hi, -acc_lo]
        A = b = None
        if n_pairs:
            j_idx, i_idx = idx
            t = terms
            if mode == "quantile":
                val, g_pos, g_lam = t.psi, t.psi_pos, t.psi_lam
            else:
                val, g_pos, g_lam = t.f1, t.f1_pos, t.f1_lam
            causal = (np.arange(N)[None, :] <= i_idx[:, None]).astype(float)
            gV = (causal[:, :, None] * (tau * g_pos)[:, None, :]).reshape(n_pairs, nV)
            # linear model value(x) = val + gV (V - V_bar) + g_lam (lam - lam_bar)
            base = val - gV @ v_flat - g_lam * lam_ref
            rows = np.zeros((n_pairs, n))
            rows[:, :nV] = gV
            rows[np.arange(n_pairs), o_lam + np.arange(n_pairs)] = g_lam
            up_rows = -rows if mode == "quantile" else rows.copy()
            up_rows[np.arange(n_pairs), o_up + np.arange(n_pairs)] = -1.0
            if mode == "quantile":
                up_h = base - pairs.r_max[idx]
            else:
                up_h = pairs.ups_max[idx] - base
            G_rows.append(up_rows)
            h_rows.append(up_h)
            if n_band:
                br = (rows[band_rows] if mode == "quantile" else -rows[band_rows]).copy()
                br[np.arange(n_band), o_band + np.arange(n_band)] = -1.0
                if mode == "quantile":
                    bh = pairs.r_band - base[band_rows]
                else:
                    bh = base[band_rows] - pairs.ups_min
                G_rows.append(br)
                h_rows.append(bh)
            # admissibility equality, scaled by the reference magnitude
            scale = t.scale
            f2V = (causal[:, :, None] * (tau * t.f2_pos)[:, None, :]).reshape(n_pairs, nV) / scale[:, None]
            A = np.zeros((n_pairs, n))
            A[:, :nV] = f2V
            A[np.arange(n_pairs), o_lam + np.arange(n_pairs)] = t.f2_lam / scale
            A[np.arange(n_pairs), o_ap + np.arange(n_pairs)] = -1.0
            A[np.arange(n_pairs), o_am + np.arange(n_pairs)] = 1.0
            b = -(t.f2 / scale) + f2V @ v_flat + t.f2_lam / scale * lam_ref
        try:
            res = solve_qp(Pq, qq, A, b, np.vstack(G_rows), np.concatenate(h_rows), lb, ub,
                           method=cfg.qp_method)
        except (QPError, np.linalg.LinAlgError) as exc:
            logger.warning("SCP subproblem failed at iteration %d: %s", iterations, exc)
            break
        predicted = res.objective + costs.c
        if merit - predicted < -1e-6 * (1.0 + abs(merit) + abs(res.objective)):
            # the model at the reference is merit itself, so this is a solver failure
            logger.warning("SCP subproblem returned a worse model value at iteration %d", iterations)
            break
        v_new = res.x[:nV].reshape(N, d)
        cand = evaluate(v_new)
        m_new = cand[0]
        pred_red = merit - predicted
        tol_merit = cfg.delta * max(1.0, abs(merit)) if cfg.relative_delta else cfg.delta
        act_red = merit - m_new
        accepted = m_new <= merit
        record = {
            "iteration": iterations,
            "merit": merit,
            "candidate_merit": m_new,
            "predicted_reduction": pred_red,
            "accepted": bool(accepted),
            "trust_region": trust,
            "max_violation": cand[6],
            "pairs": n_pairs,
            "qp_iterations": res.iterations,
        }
        diagnostics.append(record)
        if callable(cfg.callback):
            cfg.callback(record)
        if accepted:
            if n_pairs:
                # exact-vs-linear gap at the pairs the QP saw
                lin_val = base + gV @ res.x[:nV] + g_lam * res.x[o_lam:o_up]
                _, eta_new = pairs.exact_lambda(cand[1], idx)
                exact = eta_new if mode == "quantile" else 2.0 * _sf(eta_new)
                bound = pairs.r_max[idx] if mode == "quantile" else pairs.ups_max[idx]
                binding = np.abs(lin_val - bound) <= 1e-6 * (1.0 + np.abs(bound))
                if n_band:
                    lo_bound = pairs.r_band if mode == "quantile" else pairs.ups_min
                    binding[band_rows] |= np.abs(lin_val[band_rows] - lo_bound) <= 1e-6 * (1.0 + abs(lo_bound))
                gap = np.abs(_to_upsilon(lin_val, mode) - _to_upsilon(exact, mode))
                lin_gap = float(np.max(gap[binding])) if np.any(binding) else 0.0
            else:
                lin_gap = 0.0
            change = abs(merit - m_new)
            merit, pos, near, lam, idx, terms, viol = cand
            v_ref = v_new
            history.append(merit)
            ratio = act_red / pred_red if pred_red > 0 else 1.0
            if ratio > 0.75:
                trust = min(2.0 * trust, cfg.trust_region_max)
            elif ratio < 0.25:
                trust = max(0.5 * trust, cfg.trust_region_min)
            if change < tol_merit and lin_gap <= cfg.gap_tol:
                converged = True
                break
        else:
            trust *= 0.5
            if pred_red < 0.1 * tol_merit:
                converged = True
                break
            if trust < cfg.trust_region_min:
                break

    positions = rollout(spec.start, v_ref, tau)
    lam_out = lam.copy()
    ups = np.zeros((pairs.P, N))
    violated = False
    if pairs.P:
        all_idx = np.nonzero(np.ones((pairs.P, N), dtype=bool))
        lam_exact, eta = pairs.exact_lambda(positions, all_idx)
        ups[all_idx] = 2.0 * _sf(eta)
        lam_out = np.clip(lam_exact.reshape(pairs.P, N), lam_lo, lam_hi)
        over = ups > pairs.ups_max + 1e-3
        under = pairs.band & (ups < (pairs.ups_min or 0.0) - 1e-3)
        violated = bool(np.any(over | under))
    c_term, c_smooth = costs.breakdown(v_ref)
    return TrajectorySolution(
        velocities=v_ref,
        positions=positions,
        lambdas=lam_out,
        upsilons=ups,
        cost_terminal=c_term,
        cost_smooth=c_smooth,
        scp_iterations=iterations,
        converged=converged,
        per_iteration_cost=history,
        constraint_violated=violated,
        linearization_gap=lin_gap,
        trust_region=trust,
        diagnostics=diagnostics,
        solve_time=time.perf_counter() - t_start,
    )


def _sf(x):
    from scipy import special

    return special.ndtr(-np.asarray(x))


def _to_upsilon(val, mode):
    return 2.0 * _sf(val) if mode == "quantile" else val
