"""Overlap constraint between a drone and one obstacle, with gradients.

For drone belief ``N(D, S_d)`` and obstacle belief ``N(O, S_o)`` and a blend
parameter ``lam`` (held as a free variable, not re-solved), the separator is
``alpha = (lam S_d + (1 - lam) S_o)^-1 (O - D)`` and

    eta_d = lam * sqrt(alpha^T S_d alpha)
    eta_o = (1 - lam) * sqrt(alpha^T S_o alpha)
    f1 = (1 - Phi(eta_d)) + (1 - Phi(eta_o))        overlap
    f2 = eta_d^2 - eta_o^2                          admissibility residual

The drone position is ``D_i = x0 + tau * sum_{k<=i} V_k`` so every velocity up
to step ``i`` enters with the same Jacobian ``tau * I``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

DEFAULT_KAPPA = 3.0
_LOG2 = np.log(2.0)


class LinearizationError(ArithmeticError):
    """Constraint gradients are not finite at the reference point."""


@dataclass(frozen=True)
class InflatedPair:
    drone_cov: np.ndarray
    obstacle_cov: np.ndarray
    kappa: float

    @classmethod
    def build(cls, drone_cov, drone_radius, obstacle_cov, obstacle_radius, kappa=DEFAULT_KAPPA):
        return cls(
            inflate(drone_cov, drone_radius, kappa),
            inflate(obstacle_cov, obstacle_radius, kappa),
            kappa,
        )


@dataclass(frozen=True)
class ConstraintEval:
    upsilon: float
    residual: float
    grad_upsilon_v: np.ndarray
    grad_upsilon_lambda: float
    grad_residual_v: np.ndarray
    grad_residual_lambda: float


def inflate(cov, radius: float, kappa: float = DEFAULT_KAPPA) -> np.ndarray:
    """Absorb a body radius into a position covariance: ``cov + (radius/kappa)^2 I``."""
    if radius < 0:
        raise ValueError("radius must be non-negative")
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    cov = np.asarray(cov, dtype=float)
    return cov + (radius / kappa) ** 2 * np.eye(cov.shape[-1])


@dataclass
class PairTerms:
    """Batched constraint values and first derivatives.

    ``*_pos`` are gradients with respect to the drone position, ``*_lam`` with
    respect to the blend parameter.  ``psi`` is the whitened radius whose
    two-sided normal tail equals ``f1``: ``f1 = 2 (1 - Phi(psi))``.
    """

    f1: np.ndarray
    f2: np.ndarray
    psi: np.ndarray
    eta1: np.ndarray
    eta2: np.ndarray
    scale: np.ndarray
    f1_pos: np.ndarray
    f1_lam: np.ndarray
    f2_pos: np.ndarray
    f2_lam: np.ndarray
    psi_pos: np.ndarray
    psi_lam: np.ndarray
    degenerate: np.ndarray


def pair_terms(drone_pos, drone_cov, obs_mean, obs_cov, lam) -> PairTerms:
    """Evaluate the overlap constraint for a batch of drone/obstacle pairs.

    Shapes: positions (B, d), covariances (B, d, d), ``lam`` (B,).
    """
    drone_pos = np.atleast_2d(np.asarray(drone_pos, dtype=float))
    obs_mean = np.atleast_2d(np.asarray(obs_mean, dtype=float))
    cov_d = np.asarray(drone_cov, dtype=float)
    cov_o = np.asarray(obs_cov, dtype=float)
    if cov_d.ndim == 2:
        cov_d = np.broadcast_to(cov_d, (len(drone_pos),) + cov_d.shape)
    if cov_o.ndim == 2:
        cov_o = np.broadcast_to(cov_o, (len(obs_mean),) + cov_o.shape)
    lam = np.atleast_1d(np.asarray(lam, dtype=float))

    delta = obs_mean - drone_pos
    scale = np.maximum(np.maximum(np.abs(drone_pos).max(axis=1), np.abs(obs_mean).max(axis=1)), 1.0)
    degenerate = np.abs(delta).max(axis=1) <= 1e-12 * scale
    delta = np.where(degenerate[:, None], 1.0, delta)

    lam_ = lam[:, None, None]
    blend = lam_ * cov_d + (1.0 - lam_) * cov_o
    blend_inv = np.linalg.inv(blend)
    alpha = np.einsum("bij,bj->bi", blend_inv, delta)
    sd_alpha = np.einsum("bij,bj->bi", cov_d, alpha)
    so_alpha = np.einsum("bij,bj->bi", cov_o, alpha)
    a1 = np.einsum("bi,bi->b", alpha, sd_alpha)
    a2 = np.einsum("bi,bi->b", alpha, so_alpha)
    dalpha_dlam = -np.einsum("bij,bj->bi", blend_inv, sd_alpha - so_alpha)

    # gradients with respect to delta = obstacle - drone
    a1_delta = 2.0 * np.einsum("bij,bj->bi", blend_inv, sd_alpha)
    a2_delta = 2.0 * np.einsum("bij,bj->bi", blend_inv, so_alpha)
    a1_lam = 2.0 * np.einsum("bi,bi->b", sd_alpha, dalpha_dlam)
    a2_lam = 2.0 * np.einsum("bi,bi->b", so_alpha, dalpha_dlam)

    r1 = np.sqrt(a1)
    r2 = np.sqrt(a2)
    eta1 = lam * r1
    eta2 = (1.0 - lam) * r2
    eta1_delta = (lam / (2.0 * r1))[:, None] * a1_delta
    eta2_delta = ((1.0 - lam) / (2.0 * r2))[:, None] * a2_delta
    eta1_lam = r1 + lam / (2.0 * r1) * a1_lam
    eta2_lam = -r2 + (1.0 - lam) / (2.0 * r2) * a2_lam

    q1 = special.ndtr(-eta1)
    q2 = special.ndtr(-eta2)
    pdf1 = np.exp(-0.5 * eta1**2) / np.sqrt(2.0 * np.pi)
    pdf2 = np.exp(-0.5 * eta2**2) / np.sqrt(2.0 * np.pi)
    f1 = q1 + q2
    f1_delta = -(pdf1[:, None] * eta1_delta + pdf2[:, None] * eta2_delta)
    f1_lam = -(pdf1 * eta1_lam + pdf2 * eta2_lam)

    f2 = eta1**2 - eta2**2
    f2_delta = 2.0 * (eta1[:, None] * eta1_delta - eta2[:, None] * eta2_delta)
    f2_lam = 2.0 * (eta1 * eta1_lam - eta2 * eta2_lam)

    # psi = Qinv(f1 / 2) evaluated in log space so far pairs do not underflow
    log_half_f1 = np.logaddexp(special.log_ndtr(-eta1), special.log_ndtr(-eta2)) - _LOG2
    psi = -special.ndtri_exp(log_half_f1)
    w1 = 0.5 * np.exp(0.5 * (psi**2 - eta1**2))
    w2 = 0.5 * np.exp(0.5 * (psi**2 - eta2**2))
    psi_delta = w1[:, None] * eta1_delta + w2[:, None] * eta2_delta
    psi_lam = w1 * eta1_lam + w2 * eta2_lam

    zero = np.zeros_like(delta)
    deg_col = degenerate[:, None]
    terms = PairTerms(
        f1=np.where(degenerate, 1.0, f1),
        f2=np.where(degenerate, 0.0, f2),
        psi=np.where(degenerate, 0.0, psi),
        eta1=np.where(degenerate, 0.0, eta1),
        eta2=np.where(degenerate, 0.0, eta2),
        scale=np.where(degenerate, 1.0, a1 + a2),
        # d/d(drone) = -d/d(delta)
        f1_pos=np.where(deg_col, zero, -f1_delta),
        f1_lam=np.where(degenerate, 0.0, f1_lam),
        f2_pos=np.where(deg_col, zero, -f2_delta),
        f2_lam=np.where(degenerate, 0.0, f2_lam),
        psi_pos=np.where(deg_col, zero, -psi_delta),
        psi_lam=np.where(degenerate, 0.0, psi_lam),
        degenerate=degenerate,
    )
    return terms


def constraint_pair(drone_pos, drone_cov, obs_mean, obs_cov, lam: float):
    """Return ``(f1, f2)`` for one pair at a fixed blend parameter.

    Coincident positions return the total-overlap sentinel ``(1, 0)``.
    """
    t = pair_terms(drone_pos, drone_cov, obs_mean, obs_cov, lam)
    return float(t.f1[0]), float(t.f2[0])


def rollout_position(start, velocities, tau: float, step: int) -> np.ndarray:
    velocities = np.asarray(velocities, dtype=float)
    return np.asarray(start, dtype=float) + tau * velocities[:step].sum(axis=0)


def constraint_gradients(start, velocities, tau, step, drone_cov, obs_mean, obs_cov, lam):
    """Values and gradients of ``f1``/``f2`` at ``step`` (1-based) of a plan.

    Velocity gradients cover ``V_1 .. V_step`` only (later velocities do not
    move the drone before ``step``), flattened in time-major order.
    """
    if step < 1:
        raise ValueError("step index starts at 1")
    velocities = np.asarray(velocities, dtype=float)
    pos = rollout_position(start, velocities, tau, step)
    t = pair_terms(pos, drone_cov, obs_mean, obs_cov, lam)
    grads = [t.f1_pos[0], t.f1_lam[0], t.f2_pos[0], t.f2_lam[0]]
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise LinearizationError(f"non-finite constraint gradient at step {step}")
    return ConstraintEval(
        upsilon=float(t.f1[0]),
        residual=float(t.f2[0]),
        grad_upsilon_v=np.tile(tau * t.f1_pos[0], step),
        grad_upsilon_lambda=float(t.f1_lam[0]),
        grad_residual_v=np.tile(tau * t.f2_pos[0], step),
        grad_residual_lambda=float(t.f2_lam[0]),
    )
