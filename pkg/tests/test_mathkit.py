import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, optimize, special, stats

from mmrssa import mathkit as mk


# ------------------------------------------------------------ normal quantile

def test_normal_quantile_median():
    assert mk.normal_quantile(0.5) == 0.0


def test_normal_quantile_three_sigma():
    assert mk.normal_quantile(0.99865) == pytest.approx(3.0, abs=1e-3)


def test_normal_quantile_975_against_bisection():
    # independent oracle: bisection on the error-function integral
    z = optimize.brentq(lambda t: 0.5 * (1 + special.erf(t / math.sqrt(2))) - 0.975, 0, 5, xtol=1e-14)
    assert mk.normal_quantile(0.975) == pytest.approx(z, abs=1e-10)
    assert mk.normal_quantile(0.975) == pytest.approx(1.959964, abs=1e-5)


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5, float("nan")])
def test_normal_quantile_domain(p):
    with pytest.raises(mk.DomainError):
        mk.normal_quantile(p)


@given(st.floats(1e-12, 1 - 1e-12))
def test_normal_quantile_inverts_cdf(p):
    z = mk.normal_quantile(p)
    assert stats.norm.cdf(z) == pytest.approx(p, abs=1e-10)


# ------------------------------------------------------------------ chi2

@pytest.mark.parametrize("dof", [1, 2, 5, 16])
def test_chi2_cdf_at_zero(dof):
    assert mk.chi2_cdf(0.0, dof) == 0.0


def test_chi2_cdf_nine_one():
    assert mk.chi2_cdf(9.0, 1) == pytest.approx(0.9973, abs=1e-4)


def test_chi2_cdf_against_quadrature():
    dens = lambda y: y ** -0.5 * math.exp(-y / 2) / math.sqrt(2 * math.pi)
    val, _ = integrate.quad(dens, 0, 3.841, epsabs=1e-13)
    assert mk.chi2_cdf(3.841, 1) == pytest.approx(val, abs=1e-9)
    assert mk.chi2_cdf(3.841, 1) == pytest.approx(0.95, abs=1e-3)


@pytest.mark.parametrize("y,dof", [(-1.0, 1), (1.0, 0), (1.0, -2)])
def test_chi2_cdf_domain(y, dof):
    with pytest.raises(mk.DomainError):
        mk.chi2_cdf(y, dof)


def test_chi2_quantile_examples():
    assert mk.chi2_quantile(0.0, 4) == 0.0
    assert mk.chi2_quantile(0.9973, 1) == pytest.approx(9.0, abs=1e-2)
    ref = optimize.brentq(lambda y: stats.chi2.cdf(y, 8) - 0.9, 1, 40, xtol=1e-13)
    assert mk.chi2_quantile(0.9, 8) == pytest.approx(ref, abs=1e-8)
    assert mk.chi2_quantile(0.9, 8) == pytest.approx(13.3616, abs=1e-3)


@pytest.mark.parametrize("p", [1.0, 1.2, -0.01])
def test_chi2_quantile_domain(p):
    with pytest.raises(mk.DomainError):
        mk.chi2_quantile(p, 1)


@pytest.mark.parametrize("dof", [1, 2, 4, 8, 16])
def test_chi2_quantile_against_scipy(dof):
    for p in [1e-12, 1e-6, 0.01, 0.3, 0.5, 0.9, 0.999, 1 - 1e-9]:
        ref = stats.chi2.ppf(p, dof)
        assert mk.chi2_quantile(p, dof) == pytest.approx(ref, rel=1e-9, abs=1e-12)


@settings(max_examples=300)
@given(st.floats(0.01, 100.0), st.sampled_from([1, 2, 4, 8, 16]))
def test_quantile_of_cdf_is_identity(y, dof):
    p = mk.chi2_cdf(y, dof)
    # rounding p to a double moves the exact inverse by up to ulp(p) / density
    slack = 2.3e-16 / stats.chi2.pdf(y, dof)
    if p >= 1.0:
        assert slack > 1e-6  # the tail beyond double resolution
        return
    assert mk.chi2_quantile(p, dof) == pytest.approx(y, abs=1e-6 + slack, rel=1e-9)


@given(st.floats(1e-6, 1 - 1e-6))
def test_chi2_one_matches_squared_normal_quantile(p):
    assert mk.chi2_quantile(p, 1) == pytest.approx(mk.normal_quantile((1 + p) / 2) ** 2, abs=1e-6)


@given(st.floats(0, 50), st.floats(0, 50), st.integers(1, 16))
def test_chi2_cdf_monotone(a, b, dof):
    lo, hi = sorted((a, b))
    assert mk.chi2_cdf(lo, dof) <= mk.chi2_cdf(hi, dof)


# -------------------------------------------------------- incomplete beta

def test_reg_inc_beta_examples():
    assert mk.reg_inc_beta(1.0, 3.5, 0.7) == 1.0
    assert mk.reg_inc_beta(0.0, 3.5, 0.7) == 0.0
    assert mk.reg_inc_beta(0.5, 2, 2) == pytest.approx(3 * 0.25 - 2 * 0.125, abs=1e-14)
    assert mk.reg_inc_beta(0.9999, 100001, 1) == pytest.approx(0.9999 ** 100001, abs=1e-12)
    assert mk.reg_inc_beta(0.9999, 100001, 1) == pytest.approx(4.54e-5, abs=1e-7)


@pytest.mark.parametrize("z,a,b", [(-0.1, 1, 1), (1.1, 1, 1), (0.5, 0, 1), (0.5, 1, -1)])
def test_reg_inc_beta_domain(z, a, b):
    with pytest.raises(mk.DomainError):
        mk.reg_inc_beta(z, a, b)


def test_reg_inc_beta_against_scipy():
    rng = np.random.default_rng(0)
    for _ in range(2000):
        a, b = np.exp(rng.uniform(-3, 8, 2))
        z = rng.uniform()
        ref = special.betainc(a, b, z)
        assert mk.reg_inc_beta(z, a, b) == pytest.approx(ref, rel=1e-9, abs=1e-14)


@settings(max_examples=200)
@given(st.floats(0.5, 1), st.floats(0.05, 1e4), st.floats(0.05, 1e4))
def test_reg_inc_beta_reflection(z, a, b):
    # z >= 1/2 keeps 1 - z exact; a and b range symmetrically, so both tails are covered
    assert mk.reg_inc_beta(z, a, b) + mk.reg_inc_beta(1 - z, b, a) == pytest.approx(1.0, abs=1e-10)


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0.1, 100), st.floats(0.1, 100))
def test_reg_inc_beta_monotone(z1, z2, a, b):
    lo, hi = sorted((z1, z2))
    assert mk.reg_inc_beta(lo, a, b) <= mk.reg_inc_beta(hi, a, b) + 1e-15


def test_tiny_values_keep_relative_precision():
    assert mk.reg_inc_beta(0.9999, 250001, 1) == pytest.approx(0.9999 ** 250001, rel=1e-9)
    assert mk.reg_inc_beta_complement(0.9999, 250001, 1) == pytest.approx(-math.expm1(250001 * math.log(0.9999)), rel=1e-12)
    # complement of a value near 1: (1 - z)^b for a = 1
    assert mk.reg_inc_beta_complement(0.5, 1, 60) == pytest.approx(0.5 ** 60, rel=1e-9)


def test_log_beta():
    mpmath = pytest.importorskip("mpmath")
    mpmath.mp.dps = 40
    for a, b in [(0.3, 2.0), (5.0, 7.5), (1e5, 1.0), (2.5e5, 3.0), (1e-3, 1e6)]:
        ref = float(mpmath.log(mpmath.beta(a, b)))
        assert mk.log_beta(a, b) == pytest.approx(ref, rel=1e-13, abs=1e-13)


# --------------------------------------------------------------- cholesky

def test_cholesky_examples():
    np.testing.assert_allclose(mk.cholesky(np.eye(3)), np.eye(3))
    np.testing.assert_allclose(mk.cholesky([[4, 2], [2, 5]]), [[2, 0], [1, 2]], atol=1e-14)
    M = np.array([[1.0, 1.0], [1.0, 1.0]])
    L = mk.cholesky(M)
    np.testing.assert_allclose(L @ L.T, M, atol=1e-8)


def test_cholesky_rejects_indefinite():
    with pytest.raises(mk.NotPSDError):
        mk.cholesky([[1.0, 2.0], [2.0, 1.0]])


def test_cholesky_rejects_asymmetric():
    with pytest.raises(ValueError):
        mk.cholesky([[1.0, 0.5], [0.0, 1.0]])


@settings(max_examples=60)
@given(st.integers(1, 16), st.integers(0, 2 ** 31), st.booleans())
def test_cholesky_reconstruction(n, seed, deficient):
    rng = np.random.default_rng(seed)
    r = max(1, n // 2) if deficient else n
    A = rng.normal(size=(n, r))
    M = A @ A.T
    L = mk.cholesky(M)
    assert np.allclose(np.triu(L, 1), 0.0) or deficient
    assert np.max(np.abs(L @ L.T - M)) <= 1e-8 * max(np.linalg.norm(M), 1.0)


def test_pivoted_cholesky_rank():
    rng = np.random.default_rng(3)
    A = rng.normal(size=(6, 2))
    M = A @ A.T
    L, rank = mk.pivoted_cholesky(M)
    assert rank == 2
    np.testing.assert_allclose(L @ L.T, M, atol=1e-10)


# ------------------------------------------------------- ellipsoid support

def test_support_examples():
    assert mk.ellipsoid_support([0.0, 0.0], np.eye(2)) == 0.0
    assert mk.ellipsoid_support([1.0, 0.0], np.eye(2)) == pytest.approx(1.0)
    assert mk.ellipsoid_support([1.0, 0.0], np.diag([4.0, 1.0])) == pytest.approx(2.0)


def test_support_matches_sampled_boundary_maximum():
    # max of grad.delta over 1e6 points on the boundary of {d' S^-1 d <= 1}
    rng = np.random.default_rng(0)
    S = np.diag([4.0, 1.0])
    t = rng.uniform(0, 2 * np.pi, 1_000_000)
    pts = np.stack([np.cos(t), np.sin(t)], 1) @ np.linalg.cholesky(S).T
    assert mk.ellipsoid_support([1.0, 0.0], S) == pytest.approx(np.max(pts @ [1.0, 0.0]), abs=1e-3)


def test_support_singular_sigma():
    S = np.array([[1.0, 1.0], [1.0, 1.0]])
    assert mk.ellipsoid_support([1.0, -1.0], S) == 0.0
    assert mk.ellipsoid_support([1.0, 1.0], S) == pytest.approx(2.0)


def test_support_dimension_mismatch():
    with pytest.raises(ValueError):
        mk.ellipsoid_support([1.0, 0.0, 0.0], np.eye(2))


@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.floats(1e-3, 1e3), st.integers(0, 1000))
def test_support_positively_homogeneous(g, c, seed):
    A = np.random.default_rng(seed).normal(size=(3, 3))
    S = A @ A.T
    g = np.array(g)
    assert mk.ellipsoid_support(c * g, S) == pytest.approx(c * mk.ellipsoid_support(g, S), rel=1e-9, abs=1e-9)
