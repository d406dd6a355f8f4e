"""Minmax overlap between two Gaussians.

The overlap of two Gaussians is measured by the optimal (minmax) linear
separator ``alpha^T x = beta``: the sum of the two misclassification
probabilities at the separator that equalises them.  For two Gaussians whose
``c``-confidence ellipsoids touch, the overlap only depends on ``c`` and the
dimension, which gives a bijection between contour-of-touch and overlap.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy import special

LAMBDA_LO = 1e-6
LAMBDA_HI = 1.0 - 1e-6
MAX_BISECTION_ITERS = 200


class DomainError(ValueError):
    """Argument outside the domain of an operation."""


class DegenerateMeansError(ValueError):
    """The two means coincide, so no separating hyperplane exists."""


class DegenerateSeparatorError(ValueError):
    """The separator normal vanishes."""


class LambdaSolverError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class Gaussian:
    """Position belief: ``N(mean, cov)`` in 2 or 3 dimensions."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.asarray(self.cov, dtype=float)
        d = mean.shape[0]
        if d not in (2, 3):
            raise DomainError(f"dimension must be 2 or 3, got {d}")
        if cov.shape != (d, d):
            raise DomainError(f"covariance shape {cov.shape} does not match mean of length {d}")
        if not np.all(np.isfinite(mean)) or not np.all(np.isfinite(cov)):
            raise DomainError("mean and covariance must be finite")
        scale = np.max(np.abs(cov))
        if np.max(np.abs(cov - cov.T)) > 1e-12 * max(scale, 1e-300):
            raise DomainError("covariance is not symmetric")
        if np.linalg.eigvalsh(cov)[0] <= 0.0:
            raise DomainError("covariance is not positive definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class Separator:
    """Minmax separator ``alpha^T x <= beta`` (first population) and its overlap.

    ``alpha`` is ``None`` when the means coincide; the overlap is then total.
    """

    alpha: np.ndarray | None
    beta: float
    lam: float
    eta1: float
    eta2: float
    overlap: float
    iterations: int = 0

    @property
    def degenerate(self) -> bool:
        return self.alpha is None

    @property
    def contour(self) -> float:
        """Confidence level at which the two ellipsoids touch."""
        if self.degenerate:
            return 0.0
        return float(special.chdtr(self.alpha.shape[0], min(self.eta1, self.eta2) ** 2))


def normal_cdf(x):
    """Standard normal CDF, accurate to ~1e-16 absolute (erfc based)."""
    return special.ndtr(x)


def normal_sf(x):
    """Upper tail ``1 - Phi(x)`` without cancellation."""
    return special.ndtr(-np.asarray(x, dtype=float)) if np.ndim(x) else float(special.ndtr(-x))


def chi_square_quantile(p: float, dof: int) -> float:
    if not 0.0 < p < 1.0:
        raise DomainError(f"probability must lie in (0, 1), got {p}")
    if dof not in (2, 3):
        raise DomainError(f"dof must be 2 or 3, got {dof}")
    if dof == 2:
        return -2.0 * math.log1p(-p)
    return float(special.chdtri(dof, 1.0 - p))


def bhattacharyya(g1: Gaussian, g2: Gaussian) -> float:
    if g1.dim != g2.dim:
        raise DomainError("dimension mismatch")
    cov = 0.5 * (g1.cov + g2.cov)
    diff = g1.mean - g2.mean
    _, logdet = np.linalg.slogdet(cov)
    _, logdet1 = np.linalg.slogdet(g1.cov)
    _, logdet2 = np.linalg.slogdet(g2.cov)
    maha = diff @ np.linalg.solve(cov, diff)
    return float(maha / 8.0 + 0.5 * (logdet - 0.5 * (logdet1 + logdet2)))


def _check_pair(g1, g2):
    if g1.dim != g2.dim:
        raise DomainError("dimension mismatch")
    diff = g2.mean - g1.mean
    scale = max(np.max(np.abs(g1.mean)), np.max(np.abs(g2.mean)), 1.0)
    if np.max(np.abs(diff)) <= 1e-12 * scale:
        raise DegenerateMeansError("means coincide")
    return diff


def separator_from_lambda(g1: Gaussian, g2: Gaussian, lam: float):
    """Return ``(alpha, beta)`` of the separator for blend parameter ``lam``."""
    if not 0.0 < lam < 1.0:
        raise DomainError(f"lambda must lie in (0, 1), got {lam}")
    diff = _check_pair(g1, g2)
    blend = lam * g1.cov + (1.0 - lam) * g2.cov
    alpha = np.linalg.solve(blend, diff)
    beta = float(alpha @ g1.mean + lam * (alpha @ g1.cov @ alpha))
    return alpha, beta


def eta_values(g1: Gaussian, g2: Gaussian, alpha, beta: float):
    alpha = np.asarray(alpha, dtype=float)
    if not np.any(alpha):
        raise DegenerateSeparatorError("separator normal is zero")
    s1 = math.sqrt(alpha @ g1.cov @ alpha)
    s2 = math.sqrt(alpha @ g2.cov @ alpha)
    return (beta - alpha @ g1.mean) / s1, (alpha @ g2.mean - beta) / s2


def admissibility_residual(g1: Gaussian, g2: Gaussian, lam: float) -> float:
    """``alpha^T [lam^2 S1 - (1-lam)^2 S2] alpha``; equals ``eta1^2 - eta2^2``."""
    alpha, _ = separator_from_lambda(g1, g2, lam)
    return float(alpha @ (lam**2 * g1.cov - (1.0 - lam) ** 2 * g2.cov) @ alpha)


def _whiten(cov1, cov2, diff):
    """Simultaneously diagonalise batches of covariance pairs.

    Returns generalised eigenvalues ``w`` of ``cov2`` relative to ``cov1`` and
    the squared whitened mean difference ``delta2``, both of shape (B, d).
    With them ``alpha^T S1 alpha = sum delta2 / m^2`` and
    ``alpha^T S2 alpha = sum w delta2 / m^2`` where ``m = lam + (1-lam) w``.
    """
    chol = np.linalg.cholesky(cov1)
    inv_chol = np.linalg.inv(chol)
    c2 = inv_chol @ cov2 @ np.swapaxes(inv_chol, -1, -2)
    c2 = 0.5 * (c2 + np.swapaxes(c2, -1, -2))
    w, vecs = np.linalg.eigh(c2)
    delta = np.einsum("bji,bjk,bk->bi", vecs, inv_chol, diff)
    return w, delta**2


def _residual_sign_terms(lam, w, delta2):
    m = lam[:, None] + (1.0 - lam[:, None]) * w
    a1 = np.sum(delta2 / m**2, axis=1)
    a2 = np.sum(w * delta2 / m**2, axis=1)
    return lam**2 * a1 - (1.0 - lam) ** 2 * a2, a1, a2


def solve_lambda_batch(mean1, cov1, mean2, cov2, tol: float = 1e-10):
    """Vectorised bisection for the admissible blend parameter.

    Parameters are arrays of shape (B, d) and (B, d, d).  Returns
    ``(lam, eta, iterations)``; pairs with coincident means get ``lam = 0.5``
    and ``eta = 0``.
    """
    mean1 = np.asarray(mean1, dtype=float)
    mean2 = np.asarray(mean2, dtype=float)
    cov1 = np.asarray(cov1, dtype=float)
    cov2 = np.asarray(cov2, dtype=float)
    diff = mean2 - mean1
    scale = np.maximum(np.maximum(np.abs(mean1).max(axis=1), np.abs(mean2).max(axis=1)), 1.0)
    degenerate = np.abs(diff).max(axis=1) <= 1e-12 * scale

    w, delta2 = _whiten(cov1, cov2, diff)
    lo = np.full(len(diff), LAMBDA_LO)
    hi = np.full(len(diff), LAMBDA_HI)
    iterations = 0
    # bisect to full precision: a relative residual tolerance alone does not
    # bound |eta1 - eta2| when lambda sits close to 0 or 1
    for iterations in range(1, MAX_BISECTION_ITERS + 1):
        mid = 0.5 * (lo + hi)
        res, _, _ = _residual_sign_terms(mid, w, delta2)
        positive = res > 0
        hi = np.where(positive, mid, hi)
        lo = np.where(positive, lo, mid)
        if np.all((hi - lo) <= 4.0 * np.finfo(float).eps):
            break
    lam = 0.5 * (lo + hi)
    res, a1, a2 = _residual_sign_terms(lam, w, delta2)
    bad = ~degenerate & (np.abs(res) > max(tol, 1e-9) * (a1 + a2))
    if np.any(bad):
        raise LambdaSolverError("lambda bisection did not converge", float(np.max(np.abs(res[bad]))))
    eta1 = lam * np.sqrt(a1)
    eta2 = (1.0 - lam) * np.sqrt(a2)
    eta = np.where(degenerate, 0.0, 0.5 * (eta1 + eta2))
    lam = np.where(degenerate, 0.5, lam)
    return lam, eta, iterations


def solve_lambda(g1: Gaussian, g2: Gaussian, tol: float = 1e-10) -> Separator:
    """Find the minmax separator between ``g1`` and ``g2``.

    The admissibility residual changes sign across ``[1e-6, 1 - 1e-6]``, so a
    bisection bracket always exists.  Coincident means give total overlap.
    """
    if tol <= 0:
        raise DomainError("tol must be positive")
    if g1.dim != g2.dim:
        raise DomainError("dimension mismatch")
    lam, _, iterations = solve_lambda_batch(
        g1.mean[None], g1.cov[None], g2.mean[None], g2.cov[None], tol=tol
    )
    lam = float(lam[0])
    try:
        alpha, beta = separator_from_lambda(g1, g2, lam)
    except DegenerateMeansError:
        return Separator(None, math.nan, 0.5, 0.0, 0.0, 1.0, iterations)
    eta1, eta2 = eta_values(g1, g2, alpha, beta)
    overlap = normal_sf(eta1) + normal_sf(eta2)
    return Separator(alpha, beta, lam, float(eta1), float(eta2), float(overlap), iterations)


def contour_to_overlap(c_t: float, dim: int) -> float:
    """Overlap of two Gaussians whose ``c_t`` confidence ellipsoids touch."""
    if not 0.0 < c_t < 1.0:
        raise DomainError(f"contour level must lie in (0, 1), got {c_t}")
    radius = math.sqrt(chi_square_quantile(c_t, dim))
    return 2.0 * normal_sf(radius)


def overlap_to_contour(upsilon: float, dim: int) -> float:
    if not 0.0 < upsilon <= 1.0:
        raise DomainError(f"overlap must lie in (0, 1], got {upsilon}")
    if dim not in (2, 3):
        raise DomainError(f"dim must be 2 or 3, got {dim}")
    radius = -float(special.ndtri(0.5 * upsilon))
    return contour_from_radius(max(radius, 0.0), dim)


def contour_from_radius(radius: float, dim: int) -> float:
    """Confidence level of the Mahalanobis shell at ``radius``."""
    return float(special.chdtr(dim, radius * radius))


def overlap_radius(upsilon: float) -> float:
    """Whitened touching radius ``eta`` with ``2 (1 - Phi(eta)) = upsilon``."""
    return -float(special.ndtri(0.5 * upsilon))


def monte_carlo_misclassification(g1: Gaussian, g2: Gaussian, sep: Separator, n: int, rng):
    """Sampled misclassification rates of ``sep``: ``(P1(a^T x > b), P2(a^T x <= b))``."""
    if n < 1:
        raise DomainError("n must be at least 1")
    x1 = rng.multivariate_normal(g1.mean, g1.cov, size=n, method="cholesky")
    x2 = rng.multivariate_normal(g2.mean, g2.cov, size=n, method="cholesky")
    p1 = float(np.mean(x1 @ sep.alpha > sep.beta))
    p2 = float(np.mean(x2 @ sep.alpha <= sep.beta))
    return p1, p2


def contour_table(dim: int, step: float = 0.01):
    """Rows ``(c_t, dim, upsilon)`` on a regular grid of contour levels."""
    count = int(round(1.0 / step))
    levels = [round(k * step, 10) for k in range(1, count)]
    return [(c, dim, contour_to_overlap(c, dim)) for c in levels]


def format_table_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["c_t", "dim", "upsilon"])
    for c, dim, ups in rows:
        writer.writerow([f"{c:.15g}", dim, f"{ups:.15g}"])
    return buf.getvalue()
