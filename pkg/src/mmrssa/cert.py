"""Probabilistic feasibility certificates for a safety index.

A state is feasible when the chance-constrained safe-control problem has a
solution there. From N_f feasible and N_n infeasible samples, a Beta prior
on the feasible fraction q gives the posterior Beta(N_f + a, N_n + b) and
the statement P(q > z) = 1 - I_z(N_f + a, N_n + b).
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .mathkit import DomainError, log_beta, reg_inc_beta_complement
from .model import MultiModalModel, SegwayAdditiveModel, SegwayMultiplicativeModel
from .multiplicative import BilevelOptions
from .safety import GammaSpec, gamma_eval
from .sim import safe_control

log = logging.getLogger(__name__)

# Segway sampling box: (p, tilt, p_dot, tilt_rate); p does not affect feasibility
SEGWAY_REGION = ((0.0, 0.0), (-0.2, 0.2), (-3.0, 3.0), (-3.0, 3.0))
CHUNK = 2048


# ----------------------------------------------------------------- posterior

def _check_counts(n_f, n_n, alpha, beta):
    if n_f < 0 or n_n < 0:
        raise DomainError("sample counts must be nonnegative")
    if not (alpha > 0 and beta > 0):
        raise DomainError("prior parameters must be positive")


def posterior_density(z: float, n_f: int, n_n: int, alpha: float = 1.0, beta: float = 1.0) -> float:
    """Beta(N_f + alpha, N_n + beta) density of the feasible fraction at z."""
    if not 0.0 < z < 1.0:
        raise DomainError(f"z must lie in (0, 1), got {z!r}")
    _check_counts(n_f, n_n, alpha, beta)
    a, b = n_f + alpha, n_n + beta
    return math.exp((a - 1.0) * math.log(z) + (b - 1.0) * math.log1p(-z) - log_beta(a, b))


def prob_at_least(z_target: float, n_f: int, n_n: int, alpha: float = 1.0, beta: float = 1.0) -> float:
    """Posterior probability that the feasible fraction exceeds z_target."""
    if not 0.0 <= z_target <= 1.0:
        raise DomainError(f"z_target must lie in [0, 1], got {z_target!r}")
    _check_counts(n_f, n_n, alpha, beta)
    return reg_inc_beta_complement(z_target, n_f + alpha, n_n + beta)


def posterior_mean(n_f: int, n_n: int, alpha: float = 1.0, beta: float = 1.0) -> float:
    _check_counts(n_f, n_n, alpha, beta)
    return (n_f + alpha) / (n_f + n_n + alpha + beta)


@dataclass
class FeasibilityCertificate:
    n_feasible: int
    n_infeasible: int
    prior_alpha: float = 1.0
    prior_beta: float = 1.0
    z_target: float = 0.9999
    confidence: float = field(init=False)

    def __post_init__(self):
        self.confidence = prob_at_least(self.z_target, self.n_feasible, self.n_infeasible,
                                        self.prior_alpha, self.prior_beta)

    @property
    def n_samples(self) -> int:
        return self.n_feasible + self.n_infeasible

    @property
    def posterior(self):
        return self.n_feasible + self.prior_alpha, self.n_infeasible + self.prior_beta

    def statement(self) -> str:
        return f"P(q > {self.z_target:g}) = {self.confidence:.10g}"

    def to_dict(self):
        a, b = self.posterior
        return {"n_feasible": self.n_feasible, "n_infeasible": self.n_infeasible,
                "n_samples": self.n_samples, "prior_alpha": self.prior_alpha,
                "prior_beta": self.prior_beta, "posterior_alpha": a, "posterior_beta": b,
                "posterior_mean": posterior_mean(self.n_feasible, self.n_infeasible,
                                                 self.prior_alpha, self.prior_beta),
                "z_target": self.z_target, "confidence": self.confidence,
                "statement": self.statement()}


# --------------------------------------------------------------- feasibility

def _reference(model, X, target_speed, gain):
    if isinstance(model, (SegwayAdditiveModel, SegwayMultiplicativeModel)):
        return np.clip(gain * (target_speed - X[:, 2]), model.lower[0], model.upper[0])[:, None]
    return np.zeros((len(X), model.m))


def state_is_feasible(x, model: MultiModalModel, index, gamma: GammaSpec = GammaSpec(),
                      eps_f: float = 0.01, solver: str = "multiplicative", u_ref=None,
                      eps0: float = 1e-6, options: BilevelOptions | None = None) -> bool:
    """True when the selected solver finds a control meeting the chance constraint."""
    x = np.asarray(x, dtype=float)
    if u_ref is None:
        u_ref = _reference(model, x[None, :], 1.0, 10.0)[0]
    try:
        res = safe_control(x, u_ref, model, index, gamma, eps_f, solver, eps0, options,
                           feasibility_only=True)
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        log.info("state %s counted infeasible: %s", x.tolist(), exc)
        return False
    return res.feasible


def _mask_chunk(X, model, index, gamma, eps_f, solver, eps0, opts, U_ref):
    G = np.atleast_2d(index.grad(X))
    gam = np.asarray(gamma_eval(index.value(X), gamma), dtype=float).reshape(-1)
    pr = model.project(X, G)
    if solver == "additive":
        if np.any(pr.q) or not np.allclose(pr.a, pr.a[:, :1]):
            raise ValueError("additive solver needs a deterministic, mode-independent g")
        _, status, _, _ = kernels.batch_additive(pr.weights, pr.drift, pr.rho, pr.a[:, 0, :].copy(),
                                                 gam, model.lower, model.upper, U_ref, eps_f, eps0)
        return status != kernels.STATUS_INFEASIBLE
    if model.m != 1:
        return np.array([state_is_feasible(x, model, index, gamma, eps_f, solver, u, eps0, opts)
                         for x, u in zip(X, U_ref)])
    _, _, _, feas, _ = kernels.batch_bilevel_1d(
        pr.weights, pr.drift, pr.rho, pr.a[:, :, 0].copy(), pr.q[:, :, 0, 0].copy(), gam,
        float(model.n * model.m), float(model.lower[0]), float(model.upper[0]), U_ref[:, 0].copy(),
        eps_f, eps0, opts.p_floor, opts.p_ceil, opts.fd_h, opts.max_iter, opts.step_tol, True)
    return feas


def feasibility_mask(X, model: MultiModalModel, index, gamma: GammaSpec = GammaSpec(),
                     eps_f: float = 0.01, solver: str = "multiplicative", eps0: float = 1e-6,
                     options: BilevelOptions | None = None, U_ref=None, threads: int = 1) -> np.ndarray:
    """Feasibility of every state in X (N, n), evaluated in fixed-size chunks.

    Chunk boundaries do not depend on ``threads``, so neither do results.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    opts = options or BilevelOptions(eps0=eps0)
    if U_ref is None:
        U_ref = _reference(model, X, 1.0, 10.0)
    U_ref = np.ascontiguousarray(np.atleast_2d(U_ref), dtype=float)
    if solver not in ("additive", "multiplicative"):
        raise ValueError(f"unknown solver {solver!r}")
    starts = range(0, len(X), CHUNK)

    def run(s):
        return _mask_chunk(X[s:s + CHUNK], model, index, gamma, eps_f, solver, eps0, opts,
                           U_ref[s:s + CHUNK])

    if threads > 1 and len(X) > CHUNK:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=bool)


def uniform_states(n: int, rng: np.random.Generator, region=SEGWAY_REGION) -> np.ndarray:
    lo = np.array([b[0] for b in region], dtype=float)
    hi = np.array([b[1] for b in region], dtype=float)
    return lo + (hi - lo) * rng.random((n, len(region)))


def trajectory_states(n: int, seed: int, model, index, controller: str = "nominal",
                      gamma: GammaSpec = GammaSpec(), eps_f: float = 0.01, solver: str = "additive",
                      T: float = 10.0, dt: float = 0.01, x0=None, threads: int = 1) -> np.ndarray:
    """States visited by seeded rollouts at every control period, first n kept.

    ``controller`` is "nominal" (unfiltered tracker) or "safe" (tracker
    behind the safety filter built from ``index``).
    """
    from .fastsim import rollout_batch

    if controller not in ("nominal", "safe"):
        raise ValueError("controller must be 'nominal' or 'safe'")
    per = int(round(T / dt))
    seq = np.random.SeedSequence(seed)
    parts, have = [], 0
    while have < n:
        # rollouts can end early, so draw further batches until n states exist
        count = max(-(-(n - have) // per), 1)
        seeds = seq.spawn(1)[0].generate_state(count, dtype=np.uint32).astype(np.int64)
        batch = rollout_batch(model, index, seeds, x0=x0, T=T, dt=dt, gamma=gamma, eps_f=eps_f,
                              solver=solver, filtered=controller == "safe", keep_states=True,
                              threads=threads)
        # the state after the last step is never acted on, so it is not sampled
        for s in batch.states:
            parts.append(s[:-1])
            have += len(s) - 1
    return np.concatenate(parts)[:n]


@dataclass
class SampleResult:
    states: np.ndarray
    feasible: np.ndarray

    @property
    def n_feasible(self) -> int:
        return int(self.feasible.sum())

    @property
    def n_infeasible(self) -> int:
        return int(self.feasible.size - self.feasible.sum())

    def certificate(self, z_target=0.9999, alpha=1.0, beta=1.0) -> FeasibilityCertificate:
        return FeasibilityCertificate(self.n_feasible, self.n_infeasible, alpha, beta, z_target)

    def rows(self):
        for x, ok in zip(self.states, self.feasible):
            yield (*x, int(ok))


def sample_feasibility(model, index, n: int, seed: int = 0, sampler: str = "uniform",
                       gamma: GammaSpec = GammaSpec(), eps_f: float = 0.01,
                       solver: str = "multiplicative", region=SEGWAY_REGION,
                       trajectory_controller: str = "nominal", threads: int = 1,
                       options: BilevelOptions | None = None) -> SampleResult:
    """Draw n states uniformly over ``region`` or along rollouts, and test each."""
    if n < 1:
        raise ValueError("need at least one sample")
    if sampler == "uniform":
        X = uniform_states(n, np.random.default_rng(seed), region)
    elif sampler == "trajectory":
        X = trajectory_states(n, seed, model, index, trajectory_controller, gamma, eps_f, solver,
                              threads=threads)
    else:
        raise ValueError(f"unknown sampler {sampler!r}")
    mask = feasibility_mask(X, model, index, gamma, eps_f, solver, options=options, threads=threads)
    return SampleResult(X, mask)

