import math

import numpy as np
import pytest

from mmrssa.config import bundled_config
from mmrssa.model import StaticModel, make_mode, segway_multiplicative_model
from mmrssa.safety import SafetyIndexParams
from mmrssa.synthesis import (CMAES, DEFAULT_RANGES, SynthesisConfig, cma_es_synthesize, decode, encode,
                              fitness, minimize_cma, upright_safe)


def test_cma_sphere():
    x, f, gens = minimize_cma(lambda v: float(v @ v), [1.0, -2.0, 0.5], sigma0=0.5, generations=200, seed=1)
    assert gens <= 200
    assert np.max(np.abs(x)) <= 1e-6


def test_cma_ill_conditioned_ellipsoid():
    scale = np.array([1.0, 10.0, 100.0])
    x, f, _ = minimize_cma(lambda v: float(np.sum((scale * (v - 1.0)) ** 2)), np.zeros(3),
                           sigma0=0.5, generations=400, seed=2, tol=1e-14)
    np.testing.assert_allclose(x, 1.0, atol=1e-6)


def test_cma_seeded():
    a = minimize_cma(lambda v: float(np.sum(np.abs(v))), [3.0, 3.0], generations=20, seed=9)
    b = minimize_cma(lambda v: float(np.sum(np.abs(v))), [3.0, 3.0], generations=20, seed=9)
    np.testing.assert_array_equal(a[0], b[0])


def test_ask_respects_acceptance():
    es = CMAES(np.zeros(2), 1.0, 8, seed=0)
    X = es.ask(lambda y: y[0] > 0)
    assert np.all(X[:, 0] > 0)
    with pytest.raises(RuntimeError):
        es.ask(lambda y: False, max_tries=5)


def test_encode_decode_roundtrip():
    p = SafetyIndexParams(0.15, 4.17, 0.55)
    q = decode(encode(p))
    assert (q.alpha, q.k_v, q.beta) == pytest.approx((0.15, 4.17, 0.55), rel=1e-12)


def test_ranges_are_strict():
    with pytest.raises(ValueError):
        encode(SafetyIndexParams(5.0, 1.0, 0.1))
    assert decode([800.0, 0.0, 0.0]) is None
    assert decode([-800.0, 0.0, 0.0]) is None
    with pytest.raises(ValueError):
        SynthesisConfig(ranges=((1.0, 1.0), (0.1, 5.0), (0.001, 1.0)))
    with pytest.raises(ValueError):
        SynthesisConfig(sampler="grid")
    with pytest.raises(ValueError):
        SynthesisConfig(population=1)


def test_upright_safe():
    assert upright_safe(SafetyIndexParams(1.0, 1.0, 0.05))
    assert upright_safe(SafetyIndexParams(0.15, 4.17, 0.55))
    assert not upright_safe(SafetyIndexParams(1.0, 1.0, 0.2))


def _cfg(**kw):
    kw.setdefault("eval_samples", 10_000)
    return SynthesisConfig(**kw)


def test_fitness_all_feasible():
    # control enters the tilt row and the box is huge: every state is feasible
    m = StaticModel([make_mode(1.0, np.zeros(4), None, [[0.0], [1.0], [0.0], [0.0]])], -1e6, 1e6)
    fit = fitness(SafetyIndexParams(1.0, 1.0, 0.05), _cfg(), m, "additive")
    assert fit.n_infeasible == 0
    assert fit.confidence == pytest.approx(1 - 0.9999 ** 10_001, rel=1e-9)
    assert fit.feasible_fraction == 1.0


def test_fitness_all_infeasible():
    # no control authority and a wide drift spread in every direction
    m = StaticModel([make_mode(1.0, np.zeros(4), 1e4 * np.eye(4), np.zeros((4, 1)))], -1e6, 1e6)
    fit = fitness(SafetyIndexParams(1.0, 1.0, 0.05), _cfg(), m, "additive")
    assert fit.n_infeasible == 10_000
    assert fit.confidence < 1e-12


def test_learned_beats_near_phi0():
    raw = bundled_config("segway_multiplicative")
    cfg = _cfg(eval_samples=3000)
    m = segway_multiplicative_model()
    weak = fitness(SafetyIndexParams(1.0, 0.1, 0.001), cfg, m)
    learned = fitness(raw.index.params, cfg, m)
    assert weak.n_infeasible > learned.n_infeasible
    assert weak.as_key() < learned.as_key()


def _small(**kw):
    return SynthesisConfig(population=4, generations=3, eval_samples=400, seed=3, **kw)


def test_synthesis_deterministic_and_thread_independent():
    m = segway_multiplicative_model()
    a = cma_es_synthesize(_small(), m)
    b = cma_es_synthesize(_small(), m)
    c = cma_es_synthesize(_small(), m, threads=3)
    assert a.history == b.history == c.history
    assert a.best == c.best


def test_synthesis_history_monotone():
    res = cma_es_synthesize(_small(), segway_multiplicative_model())
    best = [(r["best_fitness"], r["best_feasible_fraction"]) for r in res.history]
    assert all(x <= y for x, y in zip(best, best[1:]))
    assert res.generations == len(res.history) <= 3
    lo = [r for r, _ in DEFAULT_RANGES]
    hi = [r for _, r in DEFAULT_RANGES]
    for r in res.history:
        assert lo[0] < r["alpha"] < hi[0] and lo[1] < r["k_v"] < hi[1] and lo[2] < r["beta"] < hi[2]
        assert upright_safe(SafetyIndexParams(r["alpha"], r["k_v"], r["beta"]))


def test_synthesis_stops_when_clean():
    m = StaticModel([make_mode(1.0, np.zeros(4), None, [[0.0], [1.0], [0.0], [0.0]])], -1e6, 1e6)
    res = cma_es_synthesize(_small(), m, "additive")
    assert res.stopped_early and res.generations == 1
    assert res.best_fitness.n_infeasible == 0
    assert res.to_dict()["fitness"]["n_samples"] == 400
    assert math.isfinite(res.best_fitness.confidence)
