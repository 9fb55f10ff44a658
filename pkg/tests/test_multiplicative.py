import dataclasses
import math

import numpy as np
import pytest
from scipy import optimize, stats

from mmrssa import kernels
from mmrssa.additive import project_to_halfspace, solve_safe_control_additive
from mmrssa.cert import uniform_states
from mmrssa.model import StaticModel, make_mode, sample_dynamics, segway_multiplicative_model
from mmrssa.multiplicative import BilevelOptions, bilevel_solve, build_soc_constraint
from mmrssa.safety import HAND_PARAMS, TiltIndex, gamma_eval
from mmrssa.sim import compare_feasible_sets, nominal_controller
from mmrssa.socp import cone_violation, kkt_residual, solve_socp


class ConstIndex:
    def __init__(self, value, grad):
        self._v, self._g = value, np.asarray(grad, dtype=float)

    def value(self, x):
        return self._v

    def grad(self, x):
        return self._g


GRAD = np.array([0.0, 1.0, 0.0, 1.0])
X_TILTED = np.array([0.0, 0.02, 0.5, 0.3])


# ------------------------------------------------------------- cone build

def test_zero_uncertainty_reduces_to_linear():
    md = make_mode(1.0, [0.2, -0.1], None, [[1.0], [2.0]])
    con = build_soc_constraint(md, 0.99, [1.0, 1.0], 0.3)
    np.testing.assert_array_equal(con.L, [[0.0]])
    assert con.mu == pytest.approx([3.0])
    assert con.c == pytest.approx(-0.3 - 0.1)


def test_segway_mode_one_scalar_factor():
    md = segway_multiplicative_model().modes(X_TILTED)[0]
    con = build_soc_constraint(md, 0.99, GRAD, 0.0)
    q = float(GRAD @ md.sigma_g @ GRAD)
    assert q > 0 and GRAD @ md.sigma_f @ GRAD > 0
    want = math.sqrt(stats.chi2.ppf(math.sqrt(0.99), 4) * q)
    assert abs(con.L[0, 0]) == pytest.approx(want, rel=1e-9)
    assert con.p_f * con.p_g == pytest.approx(0.99)


def test_segway_factor_covers_g_tail():
    # |grad.g - grad.mu_g| <= |L| with probability at least p_g
    md = segway_multiplicative_model().modes(X_TILTED)[0]
    con = build_soc_constraint(md, 0.99, GRAD, 0.0)
    rng = np.random.default_rng(0)
    m = StaticModel([dataclasses.replace(md, weight=1.0)], -20, 20)
    _, g, _ = sample_dynamics(m, X_TILTED, rng, 100_000)
    proj = g[:, :, 0] @ GRAD
    freq = np.mean(np.abs(proj - con.mu[0]) <= abs(con.L[0, 0]))
    se = math.sqrt(con.p_g * (1 - con.p_g) / 1e5)
    assert freq >= con.p_g - 3 * se


def test_confidence_sweep_monotone():
    md = segway_multiplicative_model().modes(X_TILTED)[1]
    ps = np.linspace(0.5, 1 - 1e-6, 40)
    cons = [build_soc_constraint(md, p, GRAD, 0.1) for p in ps]
    Ls = np.array([abs(c.L[0, 0]) for c in cons])
    cs = np.array([c.c for c in cons])
    assert np.all(np.diff(Ls) > 0)
    assert np.all(np.diff(cs) < 0)


@pytest.mark.parametrize("p", [0.0, 1.0, 1.5])
def test_cone_confidence_domain(p):
    md = segway_multiplicative_model().modes(X_TILTED)[0]
    with pytest.raises(ValueError):
        build_soc_constraint(md, p, GRAD, 0.0)


# ------------------------------------------------------------------ SOCP

def test_socp_reference_feasible():
    res = solve_socp([0.5], [(np.array([[0.1]]), np.array([1.0]), 2.0)], [-5], [5])
    assert res.status == "reference-feasible"
    np.testing.assert_array_equal(res.u, [0.5])


def test_socp_linear_matches_projection():
    rng = np.random.default_rng(0)
    for _ in range(40):
        a = rng.normal(size=2)
        b = rng.normal()
        u_ref = rng.normal(size=2) * 3
        uq, st = project_to_halfspace(a, b, u_ref, [-4, -4], [4, 4])
        res = solve_socp(u_ref, [(np.zeros((2, 2)), a, b)], [-4, -4], [4, 4])
        if st == "infeasible-relaxed":
            assert res.status == "infeasible"
            continue
        np.testing.assert_allclose(res.u, uq, atol=1e-6)


def _grid_objective(u_ref, cons, lo, hi, h):
    u = np.arange(lo, hi + h / 2, h)
    ok = np.ones(u.size, dtype=bool)
    for L, mu, c in cons:
        ok &= np.abs(L[0, 0] * u) + mu[0] * u <= c
    if not ok.any():
        return None
    return float(np.min((u[ok] - u_ref) ** 2))


def test_socp_scalar_against_grid():
    m = segway_multiplicative_model()
    idx = TiltIndex(HAND_PARAMS)
    rng = np.random.default_rng(1)
    checked = 0
    for x in uniform_states(60, rng):
        grad = idx.grad(x)
        gam = gamma_eval(idx.value(x))
        cons = [build_soc_constraint(md, p, grad, gam).as_tuple()
                for md, p in zip(m.modes(x), rng.uniform(0.9, 0.999, 2))]
        u_ref = rng.uniform(-20, 20)
        res = solve_socp([u_ref], cons, [-20], [20])
        best = _grid_objective(u_ref, cons, -20, 20, 1e-5)
        if best is None:
            assert res.status == "infeasible"
            continue
        assert res.feasible
        assert res.objective <= best + 1e-9
        # a grid of step h can miss the boundary by h, worth 2 h |u - u_ref| + h^2 in objective
        assert best - res.objective <= 1e-4 + 2e-5 * math.sqrt(best) + 1e-10
        checked += 1
    assert checked > 20


def test_socp_two_controls_against_grid():
    rng = np.random.default_rng(2)
    done = 0
    while done < 15:
        cons = []
        for _ in range(2):
            A = rng.normal(size=(2, 2)) * 0.3
            cons.append((A, rng.normal(size=2), rng.uniform(0.5, 2.0)))
        u_ref = rng.normal(size=2) * 3
        res = solve_socp(u_ref, cons, [-3, -3], [3, 3])
        g = np.linspace(-3, 3, 1201)
        U = np.stack(np.meshgrid(g, g), -1).reshape(-1, 2)
        ok = np.ones(len(U), dtype=bool)
        for L, mu, c in cons:
            ok &= np.linalg.norm(U @ L, axis=1) + U @ mu <= c
        if not ok.any() or res.status == "reference-feasible":
            continue
        best = np.min(np.sum((U[ok] - u_ref) ** 2, 1))
        assert res.objective <= best + 1e-9
        assert res.objective >= best - 0.05 * (1 + math.sqrt(best))
        assert cone_violation(res.u, cons) <= 1e-6
        assert kkt_residual(res.u, u_ref, cons, np.array([-3.0, -3]), np.array([3.0, 3])) <= 1e-6
        assert res.gap <= 1e-7
        done += 1


def test_socp_infeasible_certificate():
    # |u| <= -1 is empty
    res = solve_socp([0.0], [(np.array([[1.0]]), np.array([0.0]), -1.0)], [-5], [5])
    assert res.status == "infeasible"
    assert res.violation == pytest.approx(1.0, abs=1e-6)


def test_socp_rejects_bad_box():
    with pytest.raises(ValueError):
        solve_socp([0.0], [(np.zeros((1, 1)), np.ones(1), 1.0)], [-np.inf], [1])
    with pytest.raises(ValueError):
        solve_socp([0.0], [(np.zeros((1, 1)), np.ones(1), 1.0)], [1], [1])


# -------------------------------------------------------------- bilevel

def test_single_mode_fixed_allocation():
    m = segway_multiplicative_model(km_modes=((1.0, 2.4, 0.05),))
    idx = TiltIndex(HAND_PARAMS)
    x = np.array([0.0, 0.05, 0.5, 0.3])
    res = bilevel_solve(x, nominal_controller(x), m, idx)
    assert res.allocation[0][1] == pytest.approx(0.99)
    assert res.diagnostics["history"] == [res.diagnostics["initial_merit"]]


def _equal_k_objective(x, u_ref, m, idx, eps_f=0.01):
    grad = idx.grad(x)
    gam = gamma_eval(idx.value(x))
    pr = m.project(x[None, :], grad[None, :])
    _, _, p, _, _, st = kernels.additive_allocation(pr.weights, pr.drift[0], pr.rho[0], eps_f, 1e-6)
    # Euclidean projection onto {w.p = 1 - eps_f} within [p_floor, p_ceil]
    w = pr.weights
    proj = lambda lam: np.clip(p + lam * w, 0.5, 1 - 1e-6)
    lam = optimize.brentq(lambda t: w @ proj(t) - (1 - eps_f), -10, 10, xtol=1e-15)
    p = proj(lam)
    cons = [build_soc_constraint(md, pi, grad, gam).as_tuple() for md, pi in zip(m.modes(x), p)]
    res = solve_socp(u_ref, cons, m.lower, m.upper)
    return res.objective if res.feasible else None


def test_bilevel_improves_on_equal_k_start():
    m = segway_multiplicative_model()
    idx = TiltIndex(HAND_PARAMS)
    rng = np.random.default_rng(3)
    compared = 0
    for x in uniform_states(40, rng):
        u_ref = rng.uniform(-20, 20, 1)
        res = bilevel_solve(x, u_ref, m, idx)
        hist = res.diagnostics["history"]
        assert np.all(np.diff(hist) <= 0)
        if not res.feasible:
            continue
        assert res.achieved_probability >= 0.99 - 1e-9
        start = _equal_k_objective(x, u_ref, m, idx)
        if start is not None:
            assert res.diagnostics["objective"] <= start + 1e-9
            compared += 1
    assert compared > 10


def test_interval_and_socp_lower_levels_agree():
    m = segway_multiplicative_model()
    idx = TiltIndex(HAND_PARAMS)
    rng = np.random.default_rng(4)
    for x in uniform_states(8, rng):
        u_ref = rng.uniform(-20, 20, 1)
        a = bilevel_solve(x, u_ref, m, idx, options=BilevelOptions(lower_level="interval"))
        b = bilevel_solve(x, u_ref, m, idx, options=BilevelOptions(lower_level="socp"))
        assert a.status == b.status
        if a.feasible:
            assert a.diagnostics["objective"] == pytest.approx(b.diagnostics["objective"], abs=1e-4)


def test_reduction_to_additive():
    rng = np.random.default_rng(5)
    matched = 0
    while matched < 10:
        G = rng.normal(size=(4, 2))
        modes = []
        for w in (0.6, 0.4):
            A = rng.normal(size=(4, 4))
            modes.append(make_mode(w, rng.normal(size=4), 0.2 * A @ A.T, G))
        m = StaticModel(modes, -5, 5)
        u_ref = rng.normal(size=2) * 3
        index = ConstIndex(0.3, [0.0, 0.0, 0.0, 1.0])
        ra = solve_safe_control_additive(np.zeros(4), u_ref, m, index, eps_f=0.01, eps0=1e-10)
        ps = [p for _, p in ra.allocation]
        if not ra.feasible or min(ps) < 0.5 or max(ps) > 1 - 1e-6:
            continue
        rb = bilevel_solve(np.zeros(4), u_ref, m, index, eps_f=0.01, options=BilevelOptions(eps0=1e-10))
        np.testing.assert_allclose(rb.u, ra.u, atol=1e-6)
        matched += 1


def test_chance_constraint_monte_carlo():
    m = segway_multiplicative_model()
    idx = TiltIndex(HAND_PARAMS)
    rng = np.random.default_rng(6)
    tested = 0
    for x in uniform_states(100, rng):
        res = bilevel_solve(x, nominal_controller(x), m, idx)
        if not res.feasible:
            continue
        f, g, _ = sample_dynamics(m, x, rng, 100_000)
        grad = idx.grad(x)
        phidot = f @ grad + (g[:, :, 0] @ grad) * res.u[0]
        freq = np.mean(phidot <= -gamma_eval(idx.value(x)))
        assert freq >= 0.99 - 3 * math.sqrt(0.99 * 0.01 / 1e5)
        tested += 1
        if tested == 8:
            break
    assert tested == 8


def test_dominates_unimodal_interval():
    m = segway_multiplicative_model()
    idx = TiltIndex(HAND_PARAMS)
    for x in uniform_states(60, np.random.default_rng(7)):
        rep = compare_feasible_sets(x, m, idx, solver="multiplicative", n_points=2000)
        assert rep.multi_modal_interval >= rep.uni_modal_interval


def test_options_validation():
    with pytest.raises(ValueError):
        BilevelOptions(p_floor=0.9, p_ceil=0.8)
    with pytest.raises(ValueError):
        BilevelOptions(lower_level="newton")
    m = segway_multiplicative_model()
    with pytest.raises(ValueError):
        bilevel_solve(X_TILTED, [0.0], m, TiltIndex(HAND_PARAMS), eps_f=0.6)
