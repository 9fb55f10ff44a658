import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mmrssa.safety import (HAND_PARAMS, REFERENCE_LEARNED_PARAMS, GammaSpec, SafetyIndexParams, TiltIndex,
                           gamma_eval, grad_phi, phi, phi0)


def _x(ang, rate=0.0):
    return np.array([0.0, ang, 0.0, rate])


def test_phi0_examples():
    assert phi0(_x(0.0)) == pytest.approx(-0.1)
    assert phi0(_x(0.1)) == pytest.approx(0.0)
    assert phi0(_x(-0.25)) == pytest.approx(0.15)


def test_phi_examples():
    assert phi(_x(0.0), SafetyIndexParams(1.0, 1.0, 0.001)) == pytest.approx(-0.099)
    assert phi(_x(0.1), SafetyIndexParams(1.0, 1.0, 0.0)) == pytest.approx(0.0, abs=1e-15)


def test_phi_learned_regression_constant():
    want = max(-0.05, -0.1 ** 0.15 + 0.05 ** 0.15 + 4.17 * 0.1 + 0.55)
    assert phi(_x(0.05, 0.1), REFERENCE_LEARNED_PARAMS) == pytest.approx(want, rel=1e-14)
    assert phi(_x(0.05, 0.1), REFERENCE_LEARNED_PARAMS) == pytest.approx(0.8970906812954536, rel=1e-12)


def test_sign_zero_is_zero():
    # at zero tilt the rate term vanishes whatever the rate
    p = SafetyIndexParams(1.0, 2.0, 0.01)
    assert phi(_x(0.0, 5.0), p) == phi(_x(0.0, -5.0), p)


def test_params_must_be_positive():
    with pytest.raises(ValueError):
        SafetyIndexParams(0.0, 1.0, 0.1)
    with pytest.raises(ValueError):
        SafetyIndexParams(1.0, -1.0, 0.1)


def test_grad_first_branch():
    # large negative rate pushes the designed branch below phi0
    g = grad_phi(_x(0.05, -10.0), HAND_PARAMS)
    np.testing.assert_array_equal(g, [0, 1, 0, 0])


def test_grad_second_branch_linear():
    p = SafetyIndexParams(1.0, 0.7, 0.02)
    g = grad_phi(_x(0.05, 0.3), p)
    np.testing.assert_allclose(g, [0, 1, 0, 0.7])


def test_grad_tie_selects_designed_branch():
    p = SafetyIndexParams(1.0, 1.0, 0.0)
    x = _x(0.1, 0.0)
    assert phi0(x) == pytest.approx(float(phi(x, p)), abs=1e-15)
    np.testing.assert_allclose(grad_phi(x, p), [0, 1, 0, 1])


def test_grad_zero_tilt_uses_zero_subgradient():
    g = grad_phi(_x(0.0, 0.3), SafetyIndexParams(0.5, 1.0, 0.05))
    np.testing.assert_array_equal(g, np.zeros(4))


def test_phi0_index_gradient():
    idx = TiltIndex(None)
    np.testing.assert_array_equal(idx.grad(_x(-0.03, 1.0)), [0, -1, 0, 0])
    assert idx.value(_x(-0.03)) == pytest.approx(-0.07)


def test_grad_matches_central_differences():
    rng = np.random.default_rng(0)
    h = 1e-6
    checked = 0
    while checked < 100:
        p = SafetyIndexParams(*rng.uniform([0.1, 0.1, 0.001], [5.0, 5.0, 1.0]))
        x = np.array([rng.normal(), rng.uniform(-0.2, 0.2), rng.normal(), rng.uniform(-3, 3)])
        # stay clear of the kink set (branch tie and tilt sign flip)
        gap = abs(float(phi0(x)) - float(-(0.1 ** p.alpha) + abs(x[1]) ** p.alpha
                                         + p.k_v * np.sign(x[1]) * x[3] + p.beta))
        if gap < 1e-4 or abs(x[1]) < 1e-3:
            continue
        fd = np.zeros(4)
        for j in range(4):
            e = np.zeros(4)
            e[j] = h
            fd[j] = (phi(x + e, p) - phi(x - e, p)) / (2 * h)
        g = grad_phi(x, p)
        assert np.max(np.abs(g - fd)) <= 1e-5 * max(1.0, np.max(np.abs(g)))
        checked += 1


def test_zero_sublevel_containment():
    rng = np.random.default_rng(1)
    X = np.column_stack([rng.normal(size=100_000), rng.uniform(-0.5, 0.5, 100_000),
                         rng.uniform(-3, 3, 100_000), rng.uniform(-5, 5, 100_000)])
    for p in (HAND_PARAMS, REFERENCE_LEARNED_PARAMS, SafetyIndexParams(0.3, 2.0, 0.5)):
        inside = phi(X, p) <= 0
        assert np.all(phi0(X[inside]) <= 0)


def test_batch_matches_single():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(20, 4)) * [1, 0.1, 1, 1]
    for x, v, g in zip(X, phi(X, HAND_PARAMS), grad_phi(X, HAND_PARAMS)):
        assert phi(x, HAND_PARAMS) == v
        np.testing.assert_array_equal(grad_phi(x, HAND_PARAMS), g)


# -------------------------------------------------------------------- gamma

def test_gamma_examples():
    assert gamma_eval(0.0, GammaSpec()) == 0.0
    assert gamma_eval(0.2, GammaSpec(1.0)) == pytest.approx(0.2)


def test_gamma_slope_positive():
    with pytest.raises(ValueError):
        GammaSpec(0.0)


@given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6), st.floats(1e-3, 1e3))
def test_gamma_strictly_increasing_and_odd(a, b, slope):
    spec = GammaSpec(slope)
    if a < b:
        assert gamma_eval(a, spec) < gamma_eval(b, spec)
    assert gamma_eval(-a, spec) == -gamma_eval(a, spec)
    assert (gamma_eval(a, spec) > 0) == (a > 0)
