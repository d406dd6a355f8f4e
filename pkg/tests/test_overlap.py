import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import (
    FIG_A,
    FIG_B,
    TOUCH_LEVEL,
    chi2_cdf_quadrature,
    normal_cdf_quadrature,
    random_pair,
    random_rotation,
    touching_offset,
    touching_pair,
)
from gop import overlap as ov
from gop.overlap import Gaussian


def unit_pair(sep=2.0):
    return Gaussian([0.0, 0.0], np.eye(2)), Gaussian([sep, 0.0], np.eye(2))


# --- scalar utilities ------------------------------------------------------

def test_normal_cdf_examples():
    assert ov.normal_cdf(0.0) == 0.5
    assert abs(ov.normal_cdf(40.0) - 1.0) <= 1e-15
    assert abs(ov.normal_cdf(1.0) - 0.841345) <= 1e-6


@pytest.mark.parametrize("x", [-6.0, -2.5, -0.3, 0.7, 1.0, 3.2, 5.5])
def test_normal_cdf_matches_quadrature(x):
    assert abs(ov.normal_cdf(x) - normal_cdf_quadrature(x)) <= 1e-12


def test_chi_square_quantile_examples():
    assert abs(ov.chi_square_quantile(1 - math.exp(-1), 2) - 2.0) <= 1e-10
    assert abs(ov.chi_square_quantile(0.8051, 2) - 3.2704) <= 1e-3
    assert abs(ov.chi_square_quantile(0.60, 3) - 2.9462) <= 1e-3


@pytest.mark.parametrize("dof", [2, 3])
@pytest.mark.parametrize("p", [0.01, 0.3, 0.6, 0.8051, 0.99])
def test_chi_square_quantile_inverts_integrated_cdf(p, dof):
    q = ov.chi_square_quantile(p, dof)
    assert abs(chi2_cdf_quadrature(q, dof) - p) <= 1e-10


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5])
def test_chi_square_quantile_domain(p):
    with pytest.raises(ov.DomainError):
        ov.chi_square_quantile(p, 2)


# --- Gaussian validation ---------------------------------------------------

def test_gaussian_rejects_bad_covariances():
    with pytest.raises(ov.DomainError):
        Gaussian([0, 0], [[1, 0.5], [0.4, 1]])
    with pytest.raises(ov.DomainError):
        Gaussian([0, 0], [[1, 2], [2, 1]])
    with pytest.raises(ov.DomainError):
        Gaussian([0, 0, 0, 0], np.eye(4))
    with pytest.raises(ov.DomainError):
        Gaussian([0, 0], np.eye(3))


# --- Bhattacharyya -----------------------------------------------------------

def test_bhattacharyya_examples():
    g = Gaussian([1.0, 2.0], [[0.3, 0.1], [0.1, 0.2]])
    assert abs(ov.bhattacharyya(g, g)) <= 1e-14
    g1, g2 = unit_pair()
    assert abs(ov.bhattacharyya(g1, g2) - 0.5) <= 1e-14


def test_bhattacharyya_equal_means_determinant_oracle():
    s1, s2 = FIG_A
    s = 0.5 * (s1 + s2)
    expected = 0.5 * math.log(np.linalg.det(s) / math.sqrt(np.linalg.det(s1) * np.linalg.det(s2)))
    got = ov.bhattacharyya(Gaussian([0, 0], s1), Gaussian([0, 0], s2))
    assert abs(got - expected) <= 1e-13


def test_bhattacharyya_dimension_mismatch():
    with pytest.raises(ov.DomainError):
        ov.bhattacharyya(Gaussian([0, 0], np.eye(2)), Gaussian([0, 0, 0], np.eye(3)))


# --- separator and eta -------------------------------------------------------

@pytest.mark.parametrize("lam,beta", [(0.5, 2.0), (0.25, 1.0)])
def test_separator_unit_examples(lam, beta):
    g1, g2 = unit_pair()
    alpha, b = ov.separator_from_lambda(g1, g2, lam)
    np.testing.assert_allclose(alpha, [2.0, 0.0], atol=1e-14)
    assert abs(b - beta) <= 1e-14


def test_separator_beta_forms_agree(rng):
    for d in (2, 3):
        for _ in range(50):
            m1, c1, m2, c2 = random_pair(rng, d)
            g1, g2 = Gaussian(m1, c1), Gaussian(m2, c2)
            lam = rng.uniform(0.05, 0.95)
            alpha, beta = ov.separator_from_lambda(g1, g2, lam)
            other = alpha @ g2.mean - (1 - lam) * alpha @ g2.cov @ alpha
            assert abs(beta - other) <= 1e-9 * max(1.0, abs(beta))


def test_separator_passes_through_touch_point():
    cov1, cov2 = FIG_B
    s, w, touch = touching_offset(cov1, cov2, TOUCH_LEVEL, (1.0, 0.0))
    g1, g2 = Gaussian([0, 0], cov1), Gaussian([s, 0], cov2)
    sep = ov.solve_lambda(g1, g2)
    a = sep.alpha / np.linalg.norm(sep.alpha)
    assert abs(a @ touch - sep.beta / np.linalg.norm(sep.alpha)) <= 1e-6
    # the separator normal is the oracle's supporting direction
    assert abs(abs(a @ w) - 1.0) <= 1e-8


def test_separator_degenerate_means():
    g = Gaussian([1, 1], np.eye(2))
    with pytest.raises(ov.DegenerateMeansError):
        ov.separator_from_lambda(g, g, 0.5)


def test_eta_values_examples():
    g1, g2 = unit_pair()
    alpha, beta = ov.separator_from_lambda(g1, g2, 0.5)
    e1, e2 = ov.eta_values(g1, g2, alpha, beta)
    assert abs(e1 - 1) <= 1e-14 and abs(e2 - 1) <= 1e-14
    e1, _ = ov.eta_values(g1, g2, alpha, float(alpha @ g1.mean))
    assert e1 == 0.0
    with pytest.raises(ov.DegenerateSeparatorError):
        ov.eta_values(g1, g2, np.zeros(2), 0.0)


def test_admissibility_residual_signs(rng):
    g1, g2 = unit_pair()
    assert ov.admissibility_residual(g1, g2, 0.5) == 0.0
    for _ in range(50):
        m1, c1, m2, c2 = random_pair(rng, 3)
        g1, g2 = Gaussian(m1, c1), Gaussian(m2, c2)
        assert ov.admissibility_residual(g1, g2, 1 - 1e-6) > 0
        assert ov.admissibility_residual(g1, g2, 1e-6) < 0


def test_admissibility_residual_is_eta_difference(rng):
    for _ in range(50):
        m1, c1, m2, c2 = random_pair(rng, 2)
        g1, g2 = Gaussian(m1, c1), Gaussian(m2, c2)
        lam = rng.uniform(0.1, 0.9)
        alpha, beta = ov.separator_from_lambda(g1, g2, lam)
        e1, e2 = ov.eta_values(g1, g2, alpha, beta)
        res = ov.admissibility_residual(g1, g2, lam)
        assert abs(res - (e1**2 - e2**2)) <= 1e-9 * max(1.0, e1**2 + e2**2)


# --- solve_lambda ----------------------------------------------------------

def test_solve_lambda_unit_example():
    sep = ov.solve_lambda(*unit_pair())
    assert abs(sep.lam - 0.5) <= 1e-12
    expected = 2 * (1 - normal_cdf_quadrature(1.0))
    assert abs(sep.overlap - expected) <= 1e-12
    assert abs(sep.overlap - 0.317311) <= 1e-6


def test_solve_lambda_closed_form_equal_isotropic(rng):
    for _ in range(30):
        d = int(rng.integers(2, 4))
        s2 = rng.uniform(0.01, 3.0)
        m1, m2 = rng.uniform(-5, 5, d), rng.uniform(-5, 5, d)
        sep = ov.solve_lambda(Gaussian(m1, s2 * np.eye(d)), Gaussian(m2, s2 * np.eye(d)))
        dist = np.linalg.norm(m2 - m1) / math.sqrt(s2)
        assert abs(sep.overlap - 2 * ov.normal_sf(dist / 2)) <= 1e-12


def test_solve_lambda_postconditions(rng):
    for d in (2, 3):
        for _ in range(500):
            m1, c1, m2, c2 = random_pair(rng, d)
            g1, g2 = Gaussian(m1, c1), Gaussian(m2, c2)
            sep = ov.solve_lambda(g1, g2)
            assert 0 < sep.lam < 1
            assert abs(sep.eta1 - sep.eta2) <= 1e-8
            a1 = sep.alpha @ c1 @ sep.alpha
            a2 = sep.alpha @ c2 @ sep.alpha
            assert abs(ov.admissibility_residual(g1, g2, sep.lam)) <= 1e-10 * (a1 + a2)
            total = (1 - ov.normal_cdf(sep.eta1)) + (1 - ov.normal_cdf(sep.eta2))
            assert abs(sep.overlap - total) <= 1e-12
            assert 0 < sep.overlap <= 1


def test_solve_lambda_deterministic(rng):
    m1, c1, m2, c2 = random_pair(rng, 3)
    a = ov.solve_lambda(Gaussian(m1, c1), Gaussian(m2, c2))
    b = ov.solve_lambda(Gaussian(m1, c1), Gaussian(m2, c2))
    assert a.lam == b.lam and a.overlap == b.overlap and np.array_equal(a.alpha, b.alpha)


def test_solve_lambda_degenerate_means():
    g = Gaussian([0.3, -1.0, 2.0], np.eye(3))
    sep = ov.solve_lambda(g, g)
    assert sep.degenerate and sep.overlap == 1.0 and sep.lam == 0.5
    assert sep.contour == 0.0


def test_solve_lambda_rejects_bad_tol():
    with pytest.raises(ov.DomainError):
        ov.solve_lambda(*unit_pair(), tol=0.0)


@pytest.mark.parametrize("covs,direction", [(FIG_A, (0.0, 1.0)), (FIG_B, (1.0, 0.0)), (FIG_A, (1.0, 1.0))])
def test_touching_pairs_give_anchor_overlap(covs, direction):
    sep = ov.solve_lambda(*touching_pair(covs, direction=direction))
    assert abs(sep.overlap - 0.0706) <= 1e-3
    assert abs(sep.overlap - ov.contour_to_overlap(TOUCH_LEVEL, 2)) <= 1e-9
    assert abs(sep.contour - TOUCH_LEVEL) <= 1e-9


def test_equal_overlap_different_bhattacharyya():
    ga = touching_pair(FIG_A, direction=(0.0, 1.0))
    gb = touching_pair(FIG_B, direction=(1.0, 0.0))
    ups_a = ov.solve_lambda(*ga).overlap
    ups_b = ov.solve_lambda(*gb).overlap
    assert abs(ups_a - ups_b) <= 1e-6
    assert abs(ov.bhattacharyya(*ga) - ov.bhattacharyya(*gb)) >= 0.05


def test_bhattacharyya_values_with_axis_aligned_offsets():
    # offsets along y for pair (a) and along x for pair (b) land on the published distances
    assert abs(ov.bhattacharyya(*touching_pair(FIG_A, direction=(0.0, 1.0))) - 1.7105) <= 1e-3
    assert abs(ov.bhattacharyya(*touching_pair(FIG_B, direction=(1.0, 0.0))) - 1.6079) <= 1e-3


# --- invariances -------------------------------------------------------------

def test_swap_symmetry_many_pairs(rng):
    for k in range(1000):
        m1, c1, m2, c2 = random_pair(rng, 2 + k % 2)
        a = ov.solve_lambda(Gaussian(m1, c1), Gaussian(m2, c2))
        b = ov.solve_lambda(Gaussian(m2, c2), Gaussian(m1, c1))
        assert abs(a.lam - (1 - b.lam)) <= 1e-9
        assert abs(a.overlap - b.overlap) <= 1e-9


seeds = st.integers(min_value=0, max_value=2**32 - 1)
dims = st.sampled_from([2, 3])


@settings(max_examples=200, deadline=None)
@given(seed=seeds, d=dims)
def test_rigid_invariance(seed, d):
    rng = np.random.default_rng(seed)
    m1, c1, m2, c2 = random_pair(rng, d)
    rot = random_rotation(rng, d)
    shift = rng.uniform(-10, 10, d)
    base = ov.solve_lambda(Gaussian(m1, c1), Gaussian(m2, c2)).overlap
    moved = ov.solve_lambda(Gaussian(rot @ m1 + shift, rot @ c1 @ rot.T),
                            Gaussian(rot @ m2 + shift, rot @ c2 @ rot.T)).overlap
    assert abs(base - moved) <= 1e-9


@settings(max_examples=200, deadline=None)
@given(seed=seeds, d=dims, scale=st.floats(min_value=0.05, max_value=20.0))
def test_scale_invariance(seed, d, scale):
    rng = np.random.default_rng(seed)
    m1, c1, m2, c2 = random_pair(rng, d)
    base = ov.solve_lambda(Gaussian(m1, c1), Gaussian(m2, c2)).overlap
    scaled = ov.solve_lambda(Gaussian(scale * m1, scale**2 * c1), Gaussian(scale * m2, scale**2 * c2)).overlap
    assert abs(base - scaled) <= 1e-9


@settings(max_examples=50, deadline=None)
@given(seed=seeds, d=dims)
def test_overlap_decreases_with_separation(seed, d):
    rng = np.random.default_rng(seed)
    _, c1, _, c2 = random_pair(rng, d)
    u = rng.normal(size=d)
    u /= np.linalg.norm(u)
    # stay clear of the far tail where the overlap underflows to zero
    grid = np.linspace(0.05, 3.0, 40)
    ups = [ov.solve_lambda(Gaussian(np.zeros(d), c1), Gaussian(s * u, c2)).overlap for s in grid]
    assert all(b < a for a, b in zip(ups, ups[1:]))


def _mc_z_scores(n=100_000, pairs=120, seed=7):
    """Per-pair standardised errors of the sampled misclassification rates.

    Pairs and sample streams come from separate seeded generators so each
    pair's samples are independent of how many pairs precede it.
    """
    pair_rng = np.random.default_rng(seed)
    z1, z2 = [], []
    for k in range(pairs):
        d = 2 + k % 2
        m1, c1, m2, c2 = random_pair(pair_rng, d)
        g1, g2 = Gaussian(m1, c1), Gaussian(m2, c2)
        sep = ov.solve_lambda(g1, g2)
        assert abs(sep.eta1 - sep.eta2) <= 1e-8
        p1_hat, p2_hat = ov.monte_carlo_misclassification(g1, g2, sep, n, np.random.default_rng([seed, k]))
        for p_hat, eta, out in ((p1_hat, sep.eta1, z1), (p2_hat, sep.eta2, z2)):
            p = 1 - ov.normal_cdf(eta)
            out.append(((p_hat - p) / math.sqrt(max(p * (1 - p), 1e-12) / n), n * p))
    return np.array(z1), np.array(z2)


@pytest.fixture(scope="module")
def mc_scores():
    return _mc_z_scores()


def test_monte_carlo_agreement(mc_scores):
    z1, _ = mc_scores
    assert len(z1) >= 100
    assert np.max(np.abs(z1[:, 0])) <= 3.0


def test_monte_carlo_pooled_statistic(mc_scores):
    # squared z-scores sum to roughly chi-square, once the expected counts are
    # large enough for the normal approximation
    both = np.concatenate(mc_scores)
    z = both[both[:, 1] >= 10, 0]
    assert len(z) >= 100
    dof = len(z)
    assert abs(np.sum(z**2) - dof) <= 4 * math.sqrt(2 * dof)
    assert abs(np.mean(z)) <= 4 / math.sqrt(dof)


def test_monte_carlo_examples():
    g1, g2 = unit_pair()
    sep = ov.solve_lambda(g1, g2)
    p1, _ = ov.monte_carlo_misclassification(g1, g2, sep, 1_000_000, np.random.default_rng(1))
    assert abs(p1 - 0.158655) <= 0.0011
    far = ov.Separator(sep.alpha, float(sep.alpha @ g1.mean - 40 * math.sqrt(sep.alpha @ g1.cov @ sep.alpha)),
                       sep.lam, sep.eta1, sep.eta2, sep.overlap)
    p1, _ = ov.monte_carlo_misclassification(g1, g2, far, 10_000, np.random.default_rng(2))
    assert p1 == 1.0
    a = ov.monte_carlo_misclassification(g1, g2, sep, 1, np.random.default_rng(3))
    b = ov.monte_carlo_misclassification(g1, g2, sep, 1, np.random.default_rng(3))
    assert a == b and a[0] in (0.0, 1.0)
    with pytest.raises(ov.DomainError):
        ov.monte_carlo_misclassification(g1, g2, sep, 0, np.random.default_rng(3))


# --- contour <-> overlap -----------------------------------------------------

def test_contour_to_overlap_anchors():
    assert abs(ov.contour_to_overlap(0.8051, 2) - 0.0706) <= 5e-4
    assert abs(ov.contour_to_overlap(0.60, 3) - 0.0861) <= 5e-4
    for dim in (2, 3):
        gaps = [1.0 - ov.contour_to_overlap(c, dim) for c in (1e-3, 1e-6, 1e-9, 1e-12)]
        assert all(b < a for a, b in zip(gaps, gaps[1:]))
        assert 0 < gaps[-1] < 2e-4


def test_overlap_to_contour_anchors():
    assert abs(ov.overlap_to_contour(0.0706, 2) - 0.8051) <= 1e-3
    assert ov.overlap_to_contour(1.0, 2) == 0.0
    assert ov.overlap_to_contour(1.0, 3) == 0.0


@pytest.mark.parametrize("dim", [2, 3])
def test_contour_round_trip_and_monotone(dim):
    grid = np.round(np.arange(1, 100) * 0.01, 10)
    ups = [ov.contour_to_overlap(c, dim) for c in grid]
    assert all(b < a for a, b in zip(ups, ups[1:]))
    for c, u in zip(grid, ups):
        assert abs(ov.overlap_to_contour(u, dim) - c) <= 1e-9


@pytest.mark.parametrize("bad", [0.0, 1.0, -0.2, 1.3])
def test_contour_domain_errors(bad):
    with pytest.raises(ov.DomainError):
        ov.contour_to_overlap(bad, 2)
    if not 0 < bad <= 1:
        with pytest.raises(ov.DomainError):
            ov.overlap_to_contour(bad, 3)


def test_table_csv_format():
    text = ov.format_table_csv(ov.contour_table(2))
    lines = text.splitlines()
    assert lines[0] == "c_t,dim,upsilon"
    assert len(lines) == 100
    row = dict(zip(lines[0].split(","), lines[81].split(",")))
    assert row["c_t"] == "0.81" and row["dim"] == "2"
    assert float(row["upsilon"]) == float(f"{ov.contour_to_overlap(0.81, 2):.15g}")
