"""Compiled closed-loop Segway rollouts.

Mirrors :func:`sim.rollout` with the nominal tracker and the safety filter
for the two Segway uncertainty configurations. Both consume the same noise
plan, so a compiled rollout can be checked step by step against the
Python one. Used where rollouts are needed in bulk: trajectory sampling
for certification and synthesis, and invariance experiments.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import kernels
from ._jit import njit
from .model import SegwayAdditiveModel, SegwayMultiplicativeModel
from .multiplicative import BilevelOptions
from .safety import GammaSpec
from .sim import VIOLATION_TOL

KIND_ADDITIVE = 0
KIND_MULTIPLICATIVE = 1
SOLVER_ADDITIVE = 0
SOLVER_MULTIPLICATIVE = 1
TILT_VALID = math.pi / 2


@njit
def _terms(x, P):
    """(f0, f1, g1) at one state; P = (m, m0, J0, mL, R, K_m, K_b, grav)."""
    c = math.cos(x[1])
    s = math.sin(x[1])
    pd = x[2]
    phid = x[3]
    m0, J0, mL, R, K_b, grav = P[1], P[2], P[3], P[4], P[6], P[7]
    det = m0 * J0 - (mL * c) ** 2
    i11 = J0 / det
    i12 = -mL * c / det
    i22 = m0 / det
    h0a = -mL * s * phid ** 2
    h0b = -mL * grav * s
    v = pd - R * phid
    h1a = (K_b / R ** 2) * v
    h1b = -(K_b / R) * v
    f0 = np.array([pd, phid, -(i11 * h0a + i12 * h0b), -(i12 * h0a + i22 * h0b)])
    f1 = np.array([0.0, 0.0, -(i11 * h1a + i12 * h1b), -(i12 * h1a + i22 * h1b)])
    g1 = np.array([0.0, 0.0, i11 / R - i12, i12 / R - i22])
    return f0, f1, g1


@njit
def _index(x, designed, alpha, k_v, beta):
    """(phi, grad) of the tilt index; ``designed=False`` gives phi0."""
    ang = x[1]
    mag = abs(ang)
    sgn = 1.0 if ang > 0.0 else (-1.0 if ang < 0.0 else 0.0)
    p0 = mag - 0.1
    g = np.zeros(4)
    if not designed:
        g[1] = sgn
        return p0, g
    br = -(0.1 ** alpha) + mag ** alpha + k_v * sgn * x[3] + beta
    if br >= p0:
        g[1] = alpha * mag ** (alpha - 1.0) * sgn if mag > 0.0 else 0.0
        g[3] = k_v * sgn
        return br, g
    g[1] = sgn
    return p0, g


@njit
def _pick(w, u):
    K = w.shape[0]
    total = 0.0
    for i in range(K):
        total += w[i]
    target = u * total
    acc = 0.0
    for i in range(K):
        acc += w[i]
        if target < acc:
            return i
    return K - 1


@njit
def _fields(x, P, kind, km, d):
    f0, f1, g1 = _terms(x, P)
    if kind == KIND_ADDITIVE:
        return f0 + P[5] * f1 + d, P[5] * g1
    return f0 + km * f1, km * g1


@njit
def _dot(a, b):
    s = 0.0
    for j in range(a.shape[0]):
        s += a[j] * b[j]
    return s


@njit
def _solve(x, P, kind, w, mu_d, sig_d, mu_k, sd_k, designed, alpha, k_v, beta, slope,
           eps_f, eps0, lo, hi, u_ref, solver, opts, hist):
    """Safe control at x. Returns (u, status, phi, grad)."""
    val, grad = _index(x, designed, alpha, k_v, beta)
    gam = slope * val
    f0, f1, g1 = _terms(x, P)
    K = w.shape[0]
    drift = np.empty(K)
    rho = np.empty(K)
    a = np.empty(K)
    q = np.zeros(K)
    if kind == KIND_ADDITIVE:
        f = f0 + P[5] * f1
        g = P[5] * g1
        an = _dot(grad, g)
        for i in range(K):
            drift[i] = _dot(grad, f + mu_d[i])
            acc = 0.0
            for r in range(4):
                row = 0.0
                for c in range(4):
                    row += sig_d[i, r, c] * grad[c]
                acc += grad[r] * row
            rho[i] = math.sqrt(acc) if acc > 0.0 else 0.0
            a[i] = an
    else:
        gf0 = _dot(grad, f0)
        gf1 = _dot(grad, f1)
        gg1 = _dot(grad, g1)
        for i in range(K):
            drift[i] = gf0 + gf1 * mu_k[i]
            rho[i] = abs(gf1) * sd_k[i]
            a[i] = gg1 * mu_k[i]
            q[i] = (gg1 * sd_k[i]) ** 2
    lo_a = np.array([lo])
    hi_a = np.array([hi])
    ur = np.array([u_ref])
    if solver == SOLVER_ADDITIVE:
        level, _, _, _, _, st = kernels.additive_allocation(w, drift, rho, eps_f, eps0)
        av = np.array([a[0]])
        if st != kernels.ALLOC_OK:
            return kernels.min_vertex(av, ur, lo_a, hi_a)[0], kernels.STATUS_INFEASIBLE, val, grad
        u, pst = kernels.project_halfspace_box(av, level - gam, ur, lo_a, hi_a)
        return u[0], pst, val, grad
    u, _, _, feas, _, _, _ = kernels.bilevel_1d(
        w, drift, rho, a, q, gam, 4.0, lo, hi, u_ref, eps_f, opts[0], opts[1], opts[2],
        opts[3], int(opts[4]), opts[5], False, hist)
    if not feas:
        return u, kernels.STATUS_INFEASIBLE, val, grad
    if u == u_ref:
        return u, kernels.STATUS_REFERENCE, val, grad
    return u, kernels.STATUS_OPTIMAL, val, grad


@njit
def segway_rollout(P, kind, w, mu_d, chol_d, sig_d, mu_k, sd_k, designed, alpha, k_v, beta,
                   slope, eps_f, eps0, lo, hi, x0, dt, target_speed, gain, solver, opts,
                   filtered, mode_u, normals, states, controls, slack, status):
    """One rollout; fills the output arrays and returns the number of steps run."""
    steps = mode_u.shape[0]
    hist = np.empty(int(opts[4]) + 1)
    x = x0.copy()
    for j in range(4):
        states[0, j] = x[j]
    d = np.zeros(4)
    for t in range(steps):
        u_ref = min(max(gain * (target_speed - x[2]), lo), hi)
        if filtered:
            u, st, val, grad = _solve(x, P, kind, w, mu_d, sig_d, mu_k, sd_k, designed, alpha,
                                      k_v, beta, slope, eps_f, eps0, lo, hi, u_ref, solver,
                                      opts, hist)
        else:
            u = u_ref
            st = -1
            val, grad = _index(x, designed, alpha, k_v, beta)
        controls[t] = u
        status[t] = st
        i = _pick(w, mode_u[t])
        km = 0.0
        if kind == KIND_ADDITIVE:
            for r in range(4):
                acc = mu_d[i, r]
                for c in range(4):
                    acc += chol_d[i, r, c] * normals[t, c]
                d[r] = acc
        else:
            km = mu_k[i] + sd_k[i] * normals[t, 0]
        f, g = _fields(x, P, kind, km, d)
        slack[t] = _dot(grad, f + g * u) + slope * val
        k1 = f + g * u
        f, g = _fields(x + 0.5 * dt * k1, P, kind, km, d)
        k2 = f + g * u
        f, g = _fields(x + 0.5 * dt * k2, P, kind, km, d)
        k3 = f + g * u
        f, g = _fields(x + dt * k3, P, kind, km, d)
        k4 = f + g * u
        x = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        for j in range(4):
            states[t + 1, j] = x[j]
        ok = abs(x[1]) < TILT_VALID
        for j in range(4):
            ok = ok and math.isfinite(x[j])
        if not ok:
            return t + 1
    return steps


@dataclass
class RolloutBatch:
    """Outcomes of seeded rollouts; arrays are indexed by rollout."""

    seeds: np.ndarray
    steps: np.ndarray          # steps run before termination
    max_tilt: np.ndarray
    violations: np.ndarray     # steps with realized slack above VIOLATION_TOL
    infeasible: np.ndarray     # steps where the filter had no feasible control
    terminated: np.ndarray
    states: list               # per rollout (steps + 1, 4) when kept

    @property
    def violation_rate(self) -> float:
        return float(self.violations.sum() / max(self.steps.sum(), 1))


def _pack(model):
    P = np.array([model.params.m, model.params.m0, model.params.J0, model.params.mL,
                  model.params.R, model.params.K_m, model.params.K_b, model.params.grav])
    K = len(model.weights)
    if isinstance(model, SegwayAdditiveModel):
        chol = np.array(model._chol, dtype=float).reshape(K, 4, 4)
        return (P, KIND_ADDITIVE, model.weights.copy(), model.mu_d.copy(), chol,
                model.sigma_d.copy(), np.zeros(K), np.zeros(K))
    if isinstance(model, SegwayMultiplicativeModel):
        z = np.zeros((K, 4, 4))
        return (P, KIND_MULTIPLICATIVE, model.weights.copy(), np.zeros((K, 4)), z, z,
                model.mu_k.copy(), model.sigma_k.copy())
    raise TypeError("compiled rollouts support the Segway models only")


def rollout_batch(model, index, seeds, x0=None, T: float = 10.0, dt: float = 0.01,
                  gamma: GammaSpec = GammaSpec(), eps_f: float = 0.01, solver: str = "additive",
                  eps0: float = 1e-6, options: BilevelOptions = BilevelOptions(),
                  target_speed: float = 1.0, gain: float = 10.0, filtered: bool = True,
                  keep_states: bool = False, threads: int = 1) -> RolloutBatch:
    """Seeded Segway rollouts; rollout j draws its noise plan from ``seeds[j]``.

    Results do not depend on ``threads``: each rollout owns its generator.
    """
    packed = _pack(model)
    params = getattr(index, "params", None)
    designed = params is not None
    alpha, k_v, beta = (params.alpha, params.k_v, params.beta) if designed else (1.0, 1.0, 0.0)
    sol = {"additive": SOLVER_ADDITIVE, "multiplicative": SOLVER_MULTIPLICATIVE}[solver]
    opts = np.array([eps0, options.p_floor, options.p_ceil, options.fd_h,
                     float(options.max_iter), options.step_tol])
    x0 = np.zeros(4) if x0 is None else np.asarray(x0, dtype=float)
    steps = int(round(T / dt))
    seeds = np.asarray(seeds, dtype=np.int64)
    lo, hi = float(model.lower[0]), float(model.upper[0])

    def one(seed):
        mode_u, normals = model.noise_plan(np.random.default_rng(int(seed)), steps)
        states = np.full((steps + 1, 4), np.nan)
        controls = np.empty(steps)
        slack = np.empty(steps)
        status = np.empty(steps, dtype=np.int64)
        n = segway_rollout(*packed, designed, alpha, k_v, beta, gamma.slope, eps_f, eps0,
                           lo, hi, x0, dt, target_speed, gain, sol, opts, filtered,
                           mode_u, normals, states, controls, slack, status)
        return n, states[:n + 1], slack[:n], status[:n]

    if threads > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(threads) as pool:
            out = list(pool.map(one, seeds))
    else:
        out = [one(s) for s in seeds]
    n = np.array([o[0] for o in out])
    return RolloutBatch(
        seeds=seeds, steps=n,
        max_tilt=np.array([np.max(np.abs(o[1][:, 1])) for o in out]),
        violations=np.array([int(np.sum(o[2] > VIOLATION_TOL)) for o in out]),
        infeasible=np.array([int(np.sum(o[3] == kernels.STATUS_INFEASIBLE)) for o in out]),
        terminated=n < steps,
        states=[o[1] for o in out] if keep_states else [])
