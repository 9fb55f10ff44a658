"""Safety-index synthesis by CMA-ES over the (alpha, k_v, beta) family.

Candidates are ranked by the certified probability that more than
``z_target`` of the sampled states are feasible, ties broken by the raw
feasible fraction. Every candidate of a run is scored on the same sample
set (uniform sampling) or on rollouts driven by the same seeds
(trajectory sampling).
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .cert import (SEGWAY_REGION, feasibility_mask, prob_at_least, trajectory_states,
                   uniform_states)
from .safety import TILT_LIMIT, GammaSpec, SafetyIndexParams, TiltIndex

DEFAULT_RANGES = ((0.1, 5.0), (0.1, 5.0), (0.001, 1.0))


class CMAES:
    """(mu/mu_w, lambda)-CMA-ES with cumulative step-size adaptation.

    Minimizes; ``tell`` needs only the ordering of the values.
    """

    def __init__(self, x0, sigma0: float, popsize: int | None = None, seed: int = 0):
        self.mean = np.asarray(x0, dtype=float).copy()
        n = self.n = self.mean.size
        self.sigma = float(sigma0)
        self.lam = popsize or 4 + int(3 * math.log(n))
        self.mu = self.lam // 2
        w = math.log(self.mu + 0.5) - np.log(np.arange(1, self.mu + 1))
        self.weights = w / w.sum()
        self.mueff = 1.0 / float(self.weights @ self.weights)
        self.cc = (4 + self.mueff / n) / (n + 4 + 2 * self.mueff / n)
        self.cs = (self.mueff + 2) / (n + self.mueff + 5)
        self.c1 = 2 / ((n + 1.3) ** 2 + self.mueff)
        self.cmu = min(1 - self.c1, 2 * (self.mueff - 2 + 1 / self.mueff) / ((n + 2) ** 2 + self.mueff))
        self.damps = 1 + 2 * max(0.0, math.sqrt((self.mueff - 1) / (n + 1)) - 1) + self.cs
        self.chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))
        self.pc = np.zeros(n)
        self.ps = np.zeros(n)
        self.C = np.eye(n)
        self.B = np.eye(n)
        self.D = np.ones(n)
        self.gen = 0
        self.rng = np.random.default_rng(seed)

    def _sample(self):
        z = self.rng.standard_normal(self.n)
        return self.mean + self.sigma * (self.B @ (self.D * z))

    def ask(self, accept=None, max_tries: int = 1000) -> np.ndarray:
        """lambda candidates; those failing ``accept`` are redrawn."""
        out = np.empty((self.lam, self.n))
        for k in range(self.lam):
            for _ in range(max_tries):
                x = self._sample()
                if accept is None or accept(x):
                    break
            else:
                raise RuntimeError("no acceptable candidate after repeated resampling")
            out[k] = x
        return out

    def tell(self, X, values):
        X = np.asarray(X, dtype=float)
        order = np.argsort(np.asarray(values, dtype=float), kind="stable")
        sel = X[order[:self.mu]]
        old = self.mean
        self.mean = self.weights @ sel
        y = (self.mean - old) / self.sigma
        inv_sqrt = self.B @ np.diag(1.0 / self.D) @ self.B.T
        self.ps = (1 - self.cs) * self.ps + math.sqrt(self.cs * (2 - self.cs) * self.mueff) * (inv_sqrt @ y)
        self.gen += 1
        norm_ps = float(np.linalg.norm(self.ps))
        hsig = norm_ps / math.sqrt(1 - (1 - self.cs) ** (2 * self.gen)) / self.chi_n < 1.4 + 2 / (self.n + 1)
        self.pc = (1 - self.cc) * self.pc + hsig * math.sqrt(self.cc * (2 - self.cc) * self.mueff) * y
        art = (sel - old) / self.sigma
        delta = (1 - hsig) * self.cc * (2 - self.cc)
        self.C = ((1 - self.c1 - self.cmu) * self.C + self.c1 * (np.outer(self.pc, self.pc) + delta * self.C)
                  + self.cmu * (art.T * self.weights) @ art)
        self.sigma *= math.exp((self.cs / self.damps) * (norm_ps / self.chi_n - 1))
        self.C = 0.5 * (self.C + self.C.T)
        evals, evecs = np.linalg.eigh(self.C)
        self.D = np.sqrt(np.maximum(evals, 1e-300))
        self.B = evecs


def minimize_cma(fn, x0, sigma0=0.3, popsize=None, generations=200, seed=0, tol=1e-12):
    """Plain CMA-ES minimization; returns (best x, best value, generations used)."""
    es = CMAES(x0, sigma0, popsize, seed)
    best_x, best_f = None, math.inf
    for _ in range(generations):
        X = es.ask()
        vals = np.array([fn(x) for x in X])
        i = int(np.argmin(vals))
        if vals[i] < best_f:
            best_x, best_f = X[i].copy(), float(vals[i])
        es.tell(X, vals)
        if best_f <= tol:
            break
    return best_x, best_f, es.gen


# ----------------------------------------------------------- parameter maps

def encode(params: SafetyIndexParams, ranges=DEFAULT_RANGES) -> np.ndarray:
    out = []
    for v, (lo, hi) in zip((params.alpha, params.k_v, params.beta), ranges):
        t = (v - lo) / (hi - lo)
        if not 0.0 < t < 1.0:
            raise ValueError(f"value {v} outside range ({lo}, {hi})")
        out.append(math.log(t / (1.0 - t)))
    return np.array(out)


def decode(y, ranges=DEFAULT_RANGES) -> SafetyIndexParams | None:
    """Inverse logit into the ranges; None when rounding lands on a bound."""
    vals = []
    for yi, (lo, hi) in zip(y, ranges):
        v = lo + (hi - lo) / (1.0 + math.exp(-yi)) if yi > -700 else lo
        if not lo < v < hi:
            return None
        vals.append(v)
    return SafetyIndexParams(*vals)


def upright_safe(params: SafetyIndexParams) -> bool:
    """Whether the upright rest state lies strictly inside the safe set."""
    return params.beta < TILT_LIMIT ** params.alpha


# ------------------------------------------------------------------ fitness

@dataclass(frozen=True)
class SynthesisConfig:
    ranges: tuple = DEFAULT_RANGES
    population: int = 8
    generations: int = 50
    eval_samples: int = 10_000
    seed: int = 0
    sigma0: float = 0.3
    z_target: float = 0.9999
    sampler: str = "uniform"               # "uniform" or "trajectory"
    trajectory_controller: str = "safe"
    region: tuple = SEGWAY_REGION
    require_upright_safe: bool = True
    start: SafetyIndexParams = SafetyIndexParams(1.0, 1.0, 0.05)

    def __post_init__(self):
        for lo, hi in self.ranges:
            if not lo < hi:
                raise ValueError("each range needs low < high")
        if self.population < 2 or self.generations < 1 or self.eval_samples < 1:
            raise ValueError("population >= 2, generations >= 1 and eval_samples >= 1 required")
        if self.sampler not in ("uniform", "trajectory"):
            raise ValueError(f"unknown sampler {self.sampler!r}")


@dataclass(order=True)
class Fitness:
    confidence: float
    feasible_fraction: float
    n_infeasible: int = field(compare=False)
    n_samples: int = field(compare=False)

    def as_key(self):
        return (self.confidence, self.feasible_fraction)


def fitness(params: SafetyIndexParams, config: SynthesisConfig, model, solver: str = "multiplicative",
            states=None, gamma: GammaSpec = GammaSpec(), eps_f: float = 0.01) -> Fitness:
    """Certified feasibility of one candidate.

    ``states`` is the shared sample set for uniform sampling; trajectory
    sampling rolls out with the candidate index from the config seed.
    """
    index = TiltIndex(params)
    if config.sampler == "trajectory":
        states = trajectory_states(config.eval_samples, config.seed, model, index,
                                   config.trajectory_controller, gamma, eps_f, solver)
    elif states is None:
        states = uniform_states(config.eval_samples, np.random.default_rng(config.seed), config.region)
    mask = feasibility_mask(states, model, index, gamma, eps_f, solver)
    n_f = int(mask.sum())
    n_n = int(mask.size - n_f)
    return Fitness(prob_at_least(config.z_target, n_f, n_n), n_f / mask.size, n_n, int(mask.size))


@dataclass
class SynthesisResult:
    best: SafetyIndexParams
    best_fitness: Fitness
    history: list            # per generation dicts
    generations: int
    stopped_early: bool

    def to_dict(self):
        return {"params": self.best.as_dict(),
                "fitness": {"confidence": self.best_fitness.confidence,
                            "feasible_fraction": self.best_fitness.feasible_fraction,
                            "n_infeasible": self.best_fitness.n_infeasible,
                            "n_samples": self.best_fitness.n_samples},
                "generations": self.generations, "stopped_early": self.stopped_early}


def cma_es_synthesize(config: SynthesisConfig, model, solver: str = "multiplicative",
                      gamma: GammaSpec = GammaSpec(), eps_f: float = 0.01, threads: int = 1,
                      progress=None) -> SynthesisResult:
    """Search the index family for the candidate with the best certificate."""
    shared = None
    if config.sampler == "uniform":
        shared = uniform_states(config.eval_samples, np.random.default_rng(config.seed), config.region)
    es = CMAES(encode(config.start, config.ranges), config.sigma0, config.population, seed=config.seed)

    def accept(y):
        p = decode(y, config.ranges)
        return p is not None and (not config.require_upright_safe or upright_safe(p))

    def score(y):
        return fitness(decode(y, config.ranges), config, model, solver, shared, gamma, eps_f)

    best_p, best_f = None, None
    history = []
    stopped = False
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        for gen in range(config.generations):
            Y = es.ask(accept)
            fits = list(pool.map(score, Y)) if pool else [score(y) for y in Y]
            keys = [f.as_key() for f in fits]
            # rank: best key first, earlier candidate wins ties
            order = sorted(range(len(fits)), key=lambda k: (-keys[k][0], -keys[k][1], k))
            ranks = np.empty(len(fits))
            ranks[order] = np.arange(len(fits))
            i = order[0]
            if best_f is None or keys[i] > best_f.as_key():
                best_p, best_f = decode(Y[i], config.ranges), fits[i]
            es.tell(Y, ranks)
            row = {"generation": gen, "best_fitness": best_f.confidence,
                   "best_feasible_fraction": best_f.feasible_fraction,
                   "best_n_infeasible": best_f.n_infeasible,
                   "mean_fitness": float(np.mean([f.confidence for f in fits])),
                   "mean_feasible_fraction": float(np.mean([f.feasible_fraction for f in fits])),
                   **best_p.as_dict()}
            history.append(row)
            if progress is not None:
                progress(row)
            if best_f.n_infeasible == 0:
                stopped = True
                break
    finally:
        if pool is not None:
            pool.shutdown()
    return SynthesisResult(best_p, best_f, history, len(history), stopped)
