"""Shared fixtures and independent oracles for the test suite."""

import math

import numpy as np
import pytest
from scipy import integrate, optimize

# covariance pairs of the two equal-overlap examples (a) and (b)
FIG_A = (np.array([[0.04, 0.0], [0.0, 0.02]]), np.array([[0.02, 0.01], [0.01, 0.02]]))
FIG_B = (np.array([[0.01, 0.0], [0.0, 0.02]]), np.array([[0.03, 0.0], [0.0, 0.03]]))
TOUCH_LEVEL = 0.8051


def random_cov(rng, d):
    a = rng.uniform(-1.0, 1.0, size=(d, d))
    return a @ a.T + 1e-3 * np.eye(d)


def random_pair(rng, d):
    """Means uniform in [-5, 5]^d, covariances A A^T + 1e-3 I."""
    return (rng.uniform(-5, 5, d), random_cov(rng, d), rng.uniform(-5, 5, d), random_cov(rng, d))


def random_rotation(rng, d):
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def chi2_radius_2d(c):
    # chi-square with two dof has CDF 1 - exp(-q/2)
    return math.sqrt(-2.0 * math.log1p(-c))


def touching_offset(cov1, cov2, c, direction):
    """Separation ``s`` along ``direction`` at which the ``c`` ellipses touch.

    Support functions only: two ellipses with means 0 and ``s u`` are
    separable along ``w`` iff ``s (u.w) >= r (|w|_S1 + |w|_S2)``.  The touching
    offset is the minimum of the right-hand ratio over half-plane directions,
    found on a fine angular grid and refined.  Returns ``(s, w, touch_point)``.
    """
    r = chi2_radius_2d(c)
    u = np.asarray(direction, dtype=float)
    u = u / np.linalg.norm(u)
    th0 = math.atan2(u[1], u[0])

    def ratio(th):
        w = np.array([math.cos(th), math.sin(th)])
        return r * (math.sqrt(w @ cov1 @ w) + math.sqrt(w @ cov2 @ w)) / (u @ w)

    grid = th0 + np.linspace(-0.5 * math.pi + 1e-6, 0.5 * math.pi - 1e-6, 20001)
    vals = np.array([ratio(t) for t in grid])
    k = int(np.argmin(vals))
    res = optimize.minimize_scalar(ratio, bounds=(grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]),
                                   method="bounded", options={"xatol": 1e-13})
    w = np.array([math.cos(res.x), math.sin(res.x)])
    touch = r * cov1 @ w / math.sqrt(w @ cov1 @ w)
    return float(res.fun), w, touch


def touching_pair(covs, c=TOUCH_LEVEL, direction=(1.0, 0.0)):
    from gop.overlap import Gaussian

    cov1, cov2 = covs
    s, _, _ = touching_offset(cov1, cov2, c, direction)
    u = np.asarray(direction, dtype=float) / np.linalg.norm(direction)
    return Gaussian(np.zeros(2), cov1), Gaussian(s * u, cov2)


def normal_cdf_quadrature(x):
    """Phi(x) by adaptive quadrature of the density."""
    val, _ = integrate.quad(lambda t: math.exp(-0.5 * t * t) / math.sqrt(2 * math.pi), 0.0, abs(x),
                            epsabs=1e-14, epsrel=1e-14)
    return 0.5 + math.copysign(val, x)


def chi2_cdf_quadrature(q, dof):
    k = dof / 2.0
    norm = 2.0**k * math.gamma(k)
    val, _ = integrate.quad(lambda t: t ** (k - 1) * math.exp(-t / 2) / norm, 0.0, q,
                            epsabs=1e-14, epsrel=1e-13)
    return val


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)
