import numpy as np
import pytest
from scipy.linalg import expm

from mmrssa.config import bundled_config
from mmrssa.fastsim import rollout_batch
from mmrssa.model import segway_additive_model, segway_multiplicative_model
from mmrssa.safety import HAND_PARAMS, TiltIndex
from mmrssa.sim import (SafeController, compare_feasible_sets, nominal_controller, probe_battery, rollout,
                        safe_control, step)

ZERO_NOISE = ((1.0, (0.0, 0.0, 0.0, 0.0), np.zeros((4, 4))),)


def test_nominal_examples():
    assert nominal_controller([0, 0, 0.0, 0]) == pytest.approx([10.0])
    assert nominal_controller([0, 0, 1.0, 0]) == pytest.approx([0.0])
    assert nominal_controller([0, 0, -2.0, 0]) == pytest.approx([20.0])
    assert nominal_controller([0, 0, 4.0, 0]) == pytest.approx([-20.0])


def test_step_constant_field_is_exact():
    f, g = np.array([1.0, -2.0]), np.array([[0.5], [1.0]])
    x = step([0.0, 1.0], [2.0], 0.1, (f, g))
    np.testing.assert_allclose(x, [0.0 + 0.1 * 2.0, 1.0 + 0.1 * 0.0], atol=1e-15)


def test_step_linear_matches_exponential():
    A = np.array([[0.0, 1.0], [-4.0, -0.3]])
    truth = lambda X: (X[0] @ A.T, np.zeros((2, 1)))
    x0 = np.array([1.0, 0.0])
    x = x0
    for _ in range(100):
        x = step(x, [0.0], 0.01, truth)
    np.testing.assert_allclose(x, expm(A) @ x0, atol=1e-9)


def test_step_fourth_order():
    truth = lambda X: (np.array([X[0, 1], -np.sin(X[0, 0])]), np.zeros((2, 1)))
    x0 = np.array([1.0, 0.0])

    def run(dt):
        x = x0
        for _ in range(int(round(1.0 / dt))):
            x = step(x, [0.0], dt, truth)
        return x

    ref = run(1e-4)
    e1 = np.linalg.norm(run(0.1) - ref)
    e2 = np.linalg.norm(run(0.05) - ref)
    assert 12 < e1 / e2 < 20


def test_step_rejects_bad_dt():
    with pytest.raises(ValueError):
        step([0.0], [0.0], 0.0, (np.zeros(1), np.zeros((1, 1))))


def test_safe_control_unknown_solver():
    with pytest.raises(ValueError):
        safe_control(np.zeros(4), [0.0], segway_additive_model(), TiltIndex(HAND_PARAMS), solver="qp")


@pytest.mark.parametrize("name", ["segway_additive", "segway_multiplicative"])
def test_zero_uncertainty_stays_upright(name):
    idx = bundled_config(name).index
    m = segway_additive_model(modes=ZERO_NOISE)
    rec = rollout(SafeController(m, idx), np.zeros(4), 10.0, 0.01, np.random.default_rng(0), m)
    assert not rec.terminated
    assert rec.max_tilt < 0.1
    assert rec.violations == 0


def test_nominal_only_falls():
    m = segway_additive_model()
    rec = rollout(None, np.zeros(4), 10.0, 0.01, np.random.default_rng(0), m, nominal=nominal_controller)
    assert rec.max_tilt > 0.1
    assert set(rec.statuses) == {"nominal"}


def test_rollout_record_shapes():
    m = segway_additive_model()
    rec = rollout(SafeController(m, TiltIndex(HAND_PARAMS)), np.zeros(4), 0.5, 0.01,
                  np.random.default_rng(1), m)
    assert rec.states.shape == (51, 4)
    assert rec.controls.shape == (50, 1)
    assert len(rec.statuses) == len(rec.allocations) == 50
    assert len(list(rec.rows())) == 50
    assert np.all(np.abs(rec.controls) <= 20.0)
    with pytest.raises(ValueError):
        rollout(None, np.zeros(4), 1.0, 0.01, np.random.default_rng(0), m)


@pytest.mark.parametrize("model,solver", [(segway_additive_model, "additive"),
                                          (segway_multiplicative_model, "multiplicative")])
def test_compiled_rollout_matches_python(model, solver):
    m = model()
    idx = TiltIndex(HAND_PARAMS)
    for seed in (3, 4):
        rec = rollout(SafeController(m, idx, solver=solver), np.zeros(4), 2.0, 0.01,
                      np.random.default_rng(seed), m)
        batch = rollout_batch(m, idx, [seed], T=2.0, solver=solver, keep_states=True)
        np.testing.assert_allclose(batch.states[0], rec.states, rtol=0, atol=1e-9)
        assert batch.violations[0] == rec.violations
        assert batch.infeasible[0] == sum(s == "infeasible-relaxed" for s in rec.statuses)


def test_rollout_batch_thread_determinism():
    m = segway_additive_model()
    idx = bundled_config("segway_additive").index
    a = rollout_batch(m, idx, np.arange(6), T=3.0, keep_states=True, threads=1)
    b = rollout_batch(m, idx, np.arange(6), T=3.0, keep_states=True, threads=3)
    for x, y in zip(a.states, b.states):
        np.testing.assert_array_equal(x, y)
    np.testing.assert_array_equal(a.violations, b.violations)


def test_compare_zero_uncertainty_sets_equal():
    m = segway_additive_model(modes=ZERO_NOISE)
    idx = TiltIndex(HAND_PARAMS)
    for x in np.random.default_rng(5).uniform([0, -0.2, -3, -3], [0, 0.2, 3, 3], (30, 4)):
        rep = compare_feasible_sets(x, m, idx, solver="additive", n_points=1000)
        assert rep.multi_modal_interval == rep.uni_modal_interval
        assert rep.rhs_multi == pytest.approx(rep.rhs_uni, abs=1e-9)


def test_probe_battery_informative():
    m = segway_multiplicative_model()
    reps = probe_battery(m, TiltIndex(HAND_PARAMS), 10, np.random.default_rng(0),
                         lambda rng: rng.uniform([0, -0.2, -3, -3], [0, 0.2, 3, 3]), n_points=1000)
    assert len(reps) == 10
    for r in reps:
        assert 0 < r.multi_modal_interval < 40 or 0 < r.uni_modal_interval < 40
        assert r.multi_modal_interval >= r.uni_modal_interval
