"""Dense convex QP solver.

    minimize    1/2 x^T P x + q^T x
    subject to  A x = b,  G x <= h,  lb <= x <= ub

Two methods share one interface: a Mehrotra predictor-corrector interior
point method (default) and an operator-splitting ADMM.  Either result is
finished by an active-set polish: the equality-constrained KKT system on the
identified active set is solved directly, which drives KKT residuals to
round-off when the active set is right.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

logger = logging.getLogger(__name__)
_SPARSE_SIZE = 300


class QPError(RuntimeError):
    pass


class QPInfeasibleError(QPError):
    def __init__(self, message, max_violation):
        super().__init__(f"{message} (max violation {max_violation:.3e})")
        self.max_violation = max_violation


@dataclass
class QPResult:
    x: np.ndarray
    y: np.ndarray  # equality multipliers
    z: np.ndarray  # G-row multipliers, >= 0
    z_lb: np.ndarray  # lower-bound multipliers, >= 0
    z_ub: np.ndarray  # upper-bound multipliers, >= 0
    objective: float
    iterations: int
    status: str
    polished: bool
    kkt: dict = field(default_factory=dict)

    kkt_scaled: dict = field(default_factory=dict)

    @property
    def kkt_max(self) -> float:
        return max(self.kkt.values())

    @property
    def kkt_scaled_max(self) -> float:
        return max(self.kkt_scaled.values())


class _Problem:
    """Stacks general rows and finite bounds into one ``C x <= d`` system."""

    def __init__(self, P, q, A, b, G, h, lb, ub):
        n = len(q)
        self.n = n
        self.P = np.asarray(P, dtype=float)
        self.q = np.asarray(q, dtype=float)
        self.A = np.zeros((0, n)) if A is None else np.atleast_2d(np.asarray(A, dtype=float))
        self.b = np.zeros(0) if b is None else np.asarray(b, dtype=float).reshape(-1)
        self.G = np.zeros((0, n)) if G is None else np.atleast_2d(np.asarray(G, dtype=float))
        self.h = np.zeros(0) if h is None else np.asarray(h, dtype=float).reshape(-1)
        self.lb = np.full(n, -np.inf) if lb is None else np.asarray(lb, dtype=float).reshape(-1)
        self.ub = np.full(n, np.inf) if ub is None else np.asarray(ub, dtype=float).reshape(-1)
        if self.P.shape != (n, n):
            raise ValueError("P must be n x n")
        if self.A.shape[1] != n or self.G.shape[1] != n:
            raise ValueError("constraint matrices must have n columns")
        if np.any(self.lb > self.ub):
            i = int(np.argmax(self.lb - self.ub))
            raise QPInfeasibleError("empty box bound", float(self.lb[i] - self.ub[i]))
        self.L = np.flatnonzero(np.isfinite(self.lb))
        self.U = np.flatnonzero(np.isfinite(self.ub))
        self.mG = self.G.shape[0]
        self.m = self.mG + len(self.L) + len(self.U)
        self.d = np.concatenate([self.h, -self.lb[self.L], self.ub[self.U]])
        self.sparse = n + self.A.shape[0] > _SPARSE_SIZE
        if self.sparse:
            self._Gs = scipy.sparse.csr_matrix(self.G)
            self._Ps = scipy.sparse.csr_matrix(self.P)

    def Cx(self, x):
        return np.concatenate([self.G @ x, -x[self.L], x[self.U]])

    def CTw(self, w):
        mG, nL = self.mG, len(self.L)
        out = self.G.T @ w[:mG]
        out[self.L] -= w[mG : mG + nL]
        out[self.U] += w[mG + nL :]
        return out

    def C_dense(self):
        n = self.n
        if self.sparse:
            eye = scipy.sparse.identity(n, format="csr")
            return scipy.sparse.vstack([self._Gs, -eye[self.L], eye[self.U]], format="csr")
        return np.vstack([self.G, -np.eye(n)[self.L], np.eye(n)[self.U]])

    def normal(self, dv):
        mG, nL = self.mG, len(self.L)
        if self.sparse:
            diag = np.zeros(self.n)
            np.add.at(diag, self.L, dv[mG : mG + nL])
            np.add.at(diag, self.U, dv[mG + nL :])
            Gs = self._Gs
            return (self._Ps + Gs.T @ scipy.sparse.diags(dv[:mG]) @ Gs
                    + scipy.sparse.diags(diag)).tocsc()
        K = self.P + (self.G.T * dv[:mG]) @ self.G
        K[self.L, self.L] += dv[mG : mG + nL]
        K[self.U, self.U] += dv[mG + nL :]
        return K

    def split(self, w):
        mG, nL = self.mG, len(self.L)
        z_lb = np.zeros(self.n)
        z_ub = np.zeros(self.n)
        z_lb[self.L] = w[mG : mG + nL]
        z_ub[self.U] = w[mG + nL :]
        return w[:mG].copy(), z_lb, z_ub

    def objective(self, x):
        return float(0.5 * x @ self.P @ x + self.q @ x)


def kkt_residuals(P, q, A, b, G, h, lb, ub, x, y, z, z_lb, z_ub) -> dict:
    """Infinity-norm KKT residuals of a candidate primal-dual point."""
    prob = _Problem(P, q, A, b, G, h, lb, ub)
    y = np.zeros(0) if y is None else y
    stat = prob.P @ x + prob.q + prob.A.T @ y + prob.G.T @ z - z_lb + z_ub
    w = np.concatenate([z, z_lb[prob.L], z_ub[prob.U]])
    slack = prob.d - prob.Cx(x)
    return {
        "stationarity": _inf(stat),
        "primal_eq": _inf(prob.A @ x - prob.b),
        "primal_ineq": float(max(0.0, -slack.min())) if slack.size else 0.0,
        "dual": float(max(0.0, -w.min())) if w.size else 0.0,
        "complementarity": _inf(w * slack),
    }


def kkt_residuals_scaled(P, q, A, b, G, h, lb, ub, x, y, z, z_lb, z_ub) -> dict:
    """KKT residuals divided by the magnitude of the terms they balance."""
    prob = _Problem(P, q, A, b, G, h, lb, ub)
    y = np.zeros(0) if y is None else y
    raw = kkt_residuals(P, q, A, b, G, h, lb, ub, x, y, z, z_lb, z_ub)
    w = np.concatenate([z, z_lb[prob.L], z_ub[prob.U]])
    d_fin = prob.d[np.isfinite(prob.d)]
    scale_x = 1.0 + max(_inf(prob.Cx(x)), _inf(d_fin))
    return {
        "stationarity": raw["stationarity"] / (1.0 + max(_inf(prob.P @ x), _inf(prob.q), _inf(prob.CTw(w)))),
        "primal_eq": raw["primal_eq"] / (1.0 + max(_inf(prob.A @ x), _inf(prob.b))),
        "primal_ineq": raw["primal_ineq"] / scale_x,
        "dual": raw["dual"] / (1.0 + _inf(w)),
        "complementarity": raw["complementarity"] / ((1.0 + _inf(w)) * scale_x),
    }


def _inf(v):
    return float(np.max(np.abs(v))) if np.size(v) else 0.0


def _kkt_solve(K, A, reg=1e-11):
    """Factor the (regularised) KKT matrix once; return a refined solver.

    Large systems are factored sparsely: the planner's QPs couple each
    constraint's private variables only to the shared velocity block.
    """
    p = A.shape[0]
    n = K.shape[0]
    if scipy.sparse.issparse(K) or scipy.sparse.issparse(A):
        Z = scipy.sparse.csr_matrix((p, p)) if p else None
        blocks = [[K, scipy.sparse.csr_matrix(A).T], [scipy.sparse.csr_matrix(A), Z]] if p else [[K]]
        M = scipy.sparse.bmat(blocks, format="csc")
        shift = np.concatenate([np.full(n, reg), np.full(p, -reg)])
        lu = scipy.sparse.linalg.splu(M + scipy.sparse.diags(shift, format="csc"))
        M_op = M
        first = lu.solve
    else:
        M = np.block([[K, A.T], [A, np.zeros((p, p))]])
        M_reg = M.copy()
        M_reg[:n, :n] += reg * np.eye(n)
        M_reg[n:, n:] -= reg * np.eye(p)
        fac = scipy.linalg.lu_factor(M_reg, check_finite=False)
        M_op = M

        def first(rhs):
            return scipy.linalg.lu_solve(fac, rhs, check_finite=False)

    def solve(rhs):
        sol = first(rhs)
        for _ in range(2):
            sol = sol + first(rhs - M_op @ sol)
        return sol

    return solve


def _max_step(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def _interior_point(prob: _Problem, tol, max_iter):
    n, m, p = prob.n, prob.m, prob.A.shape[0]
    # initial point: least squares with unit scaling, then push slacks inside
    K0 = prob.normal(np.ones(m))
    solve0 = _kkt_solve(K0, prob.A)
    sol = solve0(np.concatenate([-prob.q + prob.CTw(prob.d), prob.b]))
    x = sol[:n]
    y = sol[n:]
    # shift the slacks so the inequality residual starts at zero
    s = prob.d - prob.Cx(x)
    if m:
        s = s + max(0.0, 1.0 - float(s.min()))
    z = np.ones(m)

    scale_q = 1.0 + _inf(prob.q)
    scale_b = 1.0 + _inf(prob.b)
    scale_d = 1.0 + (_inf(prob.d[np.isfinite(prob.d)]) if m else 0.0)
    it = 0
    status = "max_iter"
    for it in range(1, max_iter + 1):
        rd = prob.P @ x + prob.q + prob.A.T @ y + prob.CTw(z)
        rp = prob.A @ x - prob.b
        rc = prob.Cx(x) + s - prob.d
        mu = float(s @ z / m) if m else 0.0
        if (
            _inf(rd) <= tol * scale_q
            and _inf(rp) <= tol * scale_b
            and _inf(rc) <= tol * scale_d
            and (_inf(s * z) if m else 0.0) <= tol
            # summed gap bounds the objective error, which callers compare against
            and (float(s @ z) if m else 0.0) <= tol * (1.0 + abs(prob.objective(x)))
        ):
            status = "optimal"
            break
        dv = z / s
        solve = _kkt_solve(prob.normal(dv), prob.A)

        def direction(rsz):
            rhs_x = -rd - prob.CTw(dv * rc - rsz / s)
            sol = solve(np.concatenate([rhs_x, -rp]))
            dx, dy = sol[:n], sol[n:]
            dz = dv * (prob.Cx(dx) + rc) - rsz / s
            ds = -(rsz + s * dz) / z
            return dx, dy, dz, ds

        dx, dy, dz, ds = direction(s * z)
        alpha = min(_max_step(s, ds), _max_step(z, dz))
        mu_aff = float((s + alpha * ds) @ (z + alpha * dz) / m) if m else 0.0
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        dx, dy, dz, ds = direction(s * z + ds * dz - sigma * mu)
        alpha = min(1.0, 0.99 * min(_max_step(s, ds), _max_step(z, dz)))
        x_new = x + alpha * dx
        z_new = z + alpha * dz
        # unbounded multipliers certify infeasibility; keep the last finite iterate
        if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(z_new))) or _inf(z_new) > 1e14:
            status = "diverged"
            break
        x, z = x_new, z_new
        y = y + alpha * dy
        s = s + alpha * ds
    active = z > s
    return x, y, z, it, status, active


def _ruiz(P, At, q, iters=15):
    """Diagonal equilibration of the ADMM KKT matrix; returns (D, E, c)."""
    n, mA = P.shape[0], At.shape[0]
    D = np.ones(n)
    E = np.ones(mA)
    absP = abs(scipy.sparse.csr_matrix(P))
    absA = abs(scipy.sparse.csr_matrix(At))

    def colmax(M):
        return M.max(axis=0).toarray().ravel() if M.shape[0] else np.zeros(M.shape[1])

    def scaled(M, r, c_):
        return scipy.sparse.diags(r) @ M @ scipy.sparse.diags(c_)

    for _ in range(iters):
        Ps = scaled(absP, D, D)
        Ats = scaled(absA, E, D)
        col = np.maximum(colmax(Ps), colmax(Ats))
        row = Ats.max(axis=1).toarray().ravel() if mA else np.zeros(0)
        D /= np.sqrt(np.where(col > 1e-8, col, 1.0))
        E /= np.sqrt(np.where(row > 1e-8, row, 1.0))
    qs = D * q
    scale = max(colmax(scaled(absP, D, D)).mean() if n else 1.0, _inf(qs))
    c = 1.0 / scale if scale > 1e-8 else 1.0
    return D, E, c


def _equilibrate(prob: _Problem):
    """Ruiz-scaled copy of ``prob`` and the map back to original variables."""
    At0 = np.vstack([prob.A, prob.G])
    D, E, c = _ruiz(prob.P, At0, prob.q)
    p = prob.A.shape[0]
    EA, EG = E[:p], E[p:]
    sp = _Problem(c * D[:, None] * prob.P * D[None, :], c * D * prob.q,
                  EA[:, None] * prob.A * D[None, :], EA * prob.b,
                  EG[:, None] * prob.G * D[None, :], EG * prob.h, prob.lb / D, prob.ub / D)

    def unscale(x, y, w):
        mG, nL = prob.mG, len(prob.L)
        w = w.copy()
        w[:mG] = EG * w[:mG] / c
        w[mG : mG + nL] /= c * D[prob.L]
        w[mG + nL :] /= c * D[prob.U]
        return D * x, EA * y / c, w

    return sp, unscale


def _admm(prob: _Problem, tol, max_iter, rho=0.1, sigma=1e-6, relax=1.6, try_polish=None):
    n = prob.n
    p = prob.A.shape[0]
    box = np.flatnonzero(np.isfinite(prob.lb) | np.isfinite(prob.ub))
    At0 = np.vstack([prob.A, prob.G, np.eye(n)[box]])
    lo0 = np.concatenate([prob.b, np.full(prob.mG, -np.inf), prob.lb[box]])
    hi0 = np.concatenate([prob.b, prob.h, prob.ub[box]])
    # work on the equilibrated problem  x = D xs,  rows scaled by E,  cost by c
    D, E, c = _ruiz(prob.P, At0, prob.q)
    Ps = c * D[:, None] * prob.P * D[None, :]
    qs = c * D * prob.q
    At = E[:, None] * At0 * D[None, :]
    lo, hi = E * lo0, E * hi0
    eq = np.zeros(At.shape[0], dtype=bool)
    eq[:p] = True

    def factor(r):
        rv = np.where(eq, 1e3 * r, r)
        return rv, scipy.linalg.cho_factor(Ps + sigma * np.eye(n) + (At.T * rv) @ At)

    rho_vec, chol = factor(rho)
    x = np.zeros(n)
    zc = np.clip(At @ x, lo, hi)
    y = np.zeros(At.shape[0])
    status = "max_iter"
    it = 0
    for it in range(1, max_iter + 1):
        xt = scipy.linalg.cho_solve(chol, sigma * x - qs + At.T @ (rho_vec * zc - y))
        zt = At @ xt
        x = relax * xt + (1 - relax) * x
        z_relaxed = relax * zt + (1 - relax) * zc
        z_new = np.clip(z_relaxed + y / rho_vec, lo, hi)
        y = y + rho_vec * (z_relaxed - z_new)
        zc = z_new
        if it % 25 == 0:
            # residuals of the original problem
            xo = D * x
            yo = E * y / c
            r_prim = _inf(At0 @ xo - zc / E)
            r_dual = _inf(prob.P @ xo + prob.q + At0.T @ yo)
            if r_prim <= tol * (1 + _inf(zc / E)) and r_dual <= tol * (1 + _inf(prob.q)):
                status = "optimal"
                break
            if it % 200 == 0 and try_polish is not None:
                xo_, yo_ = D * x, E * y / c
                if try_polish(xo_, _admm_active(prob, xo_, yo_, p, box)):
                    status = "optimal"
                    break
            # rebalance rho on the scaled residuals
            sp = _inf(At @ x - zc) / max(_inf(At @ x), _inf(zc), 1e-12)
            sd = _inf(Ps @ x + qs + At.T @ y) / max(_inf(Ps @ x), _inf(At.T @ y), _inf(qs), 1e-12)
            ratio = np.sqrt(sp / max(sd, 1e-30))
            if ratio > 5.0 or ratio < 0.2:
                rho = float(np.clip(rho * ratio, 1e-6, 1e6))
                rho_vec, chol = factor(rho)
    x = D * x
    y = E * y / c
    w, active = _admm_active(prob, x, y, p, box, full=True)
    return x, y[:p], w, it, status, active


def _admm_active(prob, x, y, p, box, full=False):
    n = prob.n
    w_G = np.maximum(y[p : p + prob.mG], 0.0)
    y_box = y[p + prob.mG :]
    z_lb = np.zeros(n)
    z_ub = np.zeros(n)
    z_lb[box] = np.maximum(-y_box, 0.0)
    z_ub[box] = np.maximum(y_box, 0.0)
    w = np.concatenate([w_G, z_lb[prob.L], z_ub[prob.U]])
    # a row is active when its multiplier outweighs its slack
    slack = prob.d - prob.Cx(x)
    active = w > slack
    return (w, active) if full else active


def _polish(prob: _Problem, x0, active, tol, rounds=40):
    """Solve the KKT system treating ``active`` rows as equalities.

    A wrong guess is repaired by active-set corrections: the row with the
    most negative multiplier is released, or else the most violated row is
    added.
    """
    n, p = prob.n, prob.A.shape[0]
    C = prob.C_dense()
    active = active.copy()
    seen = set()
    for _ in range(rounds):
        key = active.tobytes()
        if key in seen:
            return None
        seen.add(key)
        if prob.sparse:
            Aeq = scipy.sparse.vstack([scipy.sparse.csr_matrix(prob.A), C[active]], format="csr")
            P = prob._Ps.tocsc()
        else:
            Aeq = np.vstack([prob.A, C[active]])
            P = prob.P
        beq = np.concatenate([prob.b, prob.d[active]])
        try:
            sol = _kkt_solve(P, Aeq, reg=1e-9)(np.concatenate([-prob.q, beq]))
        except (np.linalg.LinAlgError, ValueError, RuntimeError):
            return None
        if not np.all(np.isfinite(sol)):
            return None
        x = sol[:n]
        y = sol[n : n + p]
        w = np.zeros(prob.m)
        w[active] = sol[n + p :]
        slack = prob.d - prob.Cx(x)
        neg = w < -tol
        viol = slack < -tol * (1 + np.abs(prob.d))
        if not neg.any() and not viol.any():
            return x, y, np.maximum(w, 0.0)
        # one change per round, releasing before adding
        if neg.any():
            active[int(np.argmin(np.where(neg, w, np.inf)))] = False
        else:
            active[int(np.argmin(np.where(viol, slack / (1 + np.abs(prob.d)), np.inf)))] = True
    return None


def solve_qp(P, q, A=None, b=None, G=None, h=None, lb=None, ub=None,
             method="interior-point", tol=1e-9, max_iter=None, polish=True) -> QPResult:
    """Solve a convex QP; see module docstring for the problem form.

    Raises ``QPInfeasibleError`` when the returned point still violates the
    constraints by more than ``sqrt(tol)`` (relative).
    """
    prob = _Problem(P, q, A, b, G, h, lb, ub)
    if method == "interior-point":
        sprob, unscale = _equilibrate(prob)
        x, y, w, it, status, active = _interior_point(sprob, tol, max_iter or 100)
        x, y, w = unscale(x, y, w)
    elif method == "admm":
        def try_polish(x_, active_):
            out = _polish(prob, x_, active_, max(tol, 1e-9)) if polish else None
            if out is None:
                return False
            zG_, zl_, zu_ = prob.split(out[2])
            k = kkt_residuals(prob.P, prob.q, prob.A, prob.b, prob.G, prob.h, prob.lb, prob.ub,
                              out[0], out[1], zG_, zl_, zu_)
            return max(k.values()) <= 10 * tol * (1.0 + _inf(prob.q))

        x, y, w, it, status, active = _admm(prob, min(tol, 1e-6) * 10, max_iter or 50000,
                                            try_polish=try_polish)
    else:
        raise ValueError(f"unknown QP method {method!r}")

    polished = False
    # an interior-point result that met its own stopping test is kept as is
    if polish and not (method == "interior-point" and status == "optimal"):
        out = _polish(prob, x, active, max(tol, 1e-9))
        if out is not None:
            zG, zl, zu = prob.split(out[2])
            k_new = kkt_residuals(prob.P, prob.q, prob.A, prob.b, prob.G, prob.h,
                                  prob.lb, prob.ub, out[0], out[1], zG, zl, zu)
            zG0, zl0, zu0 = prob.split(w)
            k_old = kkt_residuals(prob.P, prob.q, prob.A, prob.b, prob.G, prob.h,
                                  prob.lb, prob.ub, x, y, zG0, zl0, zu0)
            if max(k_new.values()) <= max(k_old.values()):
                x, y, w = out
                polished = True
    zG, zl, zu = prob.split(w)
    kkt = kkt_residuals(prob.P, prob.q, prob.A, prob.b, prob.G, prob.h, prob.lb, prob.ub,
                        x, y, zG, zl, zu)
    viol = max(kkt["primal_eq"], kkt["primal_ineq"])
    if viol > np.sqrt(tol) * (1.0 + _inf(prob.d[np.isfinite(prob.d)]) + _inf(prob.b)):
        raise QPInfeasibleError("QP infeasible or not solved", viol)
    if status != "optimal" and not polished:
        raise QPError(f"QP {method} stopped with status {status}; kkt {kkt}")
    scaled = kkt_residuals_scaled(prob.P, prob.q, prob.A, prob.b, prob.G, prob.h, prob.lb, prob.ub,
                                  x, y, zG, zl, zu)
    return QPResult(x, y, zG, zl, zu, prob.objective(x), it, status if not polished else "optimal",
                    polished, kkt, scaled)
