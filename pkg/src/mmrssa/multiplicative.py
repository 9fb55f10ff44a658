"""Bi-level safe control under multi-modal multiplicative uncertainty.

For a confidence p_i the mode-i chance constraint becomes the cone

    ||L_i' u|| <= -mu_i' u + c_i,
    L_i L_i' = chi2_{nm}(p_g) * grad' Sigma_g grad,
    c_i = -gamma - grad.mu_f - sqrt(chi2_1(p_f)) * rho,

with p_f * p_g = p_i. The upper level moves the allocation p along the
face sum_i w_i p_i = 1 - eps_f to shrink ||u - u_ref||^2; the lower level
is the cone program for fixed p.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .additive import SafeControlResult
from .mathkit import chi2_quantile, cholesky
from .model import ModeParams, MultiModalModel, Projection
from .safety import GammaSpec, gamma_eval
from .socp import cone_violation, solve_socp


@dataclass(frozen=True)
class BilevelOptions:
    p_floor: float = 0.5
    p_ceil: float = 1.0 - 1e-6
    fd_h: float = 1e-4
    max_iter: int = 50
    step_tol: float = 1e-5
    eps0: float = 1e-6
    lower_level: str = "auto"    # "auto", "interval" (m = 1 only) or "socp"

    def __post_init__(self):
        if not 0.0 < self.p_floor < self.p_ceil < 1.0:
            raise ValueError("need 0 < p_floor < p_ceil < 1")
        if self.lower_level not in ("auto", "interval", "socp"):
            raise ValueError(f"unknown lower level {self.lower_level!r}")


@dataclass
class SocConstraint:
    L: np.ndarray       # (m, m), L L' = chi2_{nm}(p_g) Q
    mu: np.ndarray      # (m,)
    c: float
    p_f: float = 1.0
    p_g: float = 1.0

    def value(self, u) -> float:
        """||L' u|| + mu' u - c; nonpositive when satisfied."""
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return float(np.linalg.norm(self.L.T @ u) + self.mu @ u - self.c)

    def as_tuple(self):
        return self.L, self.mu, self.c


@dataclass
class ConfidenceAllocation:
    p: np.ndarray
    achieved: float


def _cone(p, rho, q, a, drift, gam, dof):
    """Cone data from projected scalars: rho scalar, q (m, m), a (m,)."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"confidence must lie in (0, 1), got {p}")
    q_scale = float(np.trace(q))
    p_f, p_g = kernels.confidence_split(p, rho, q_scale)
    k_f = math.sqrt(chi2_quantile(p_f, 1)) if rho > 0.0 else 0.0
    if q_scale > 0.0:
        L = cholesky(chi2_quantile(p_g, dof) * q)
    else:
        L = np.zeros_like(q)
    return SocConstraint(L, np.asarray(a, dtype=float), float(-gam - drift - k_f * rho), p_f, p_g)


def build_soc_constraint(mode: ModeParams, p: float, grad, gamma_val: float) -> SocConstraint:
    """Cone form of the mode's chance constraint at confidence p."""
    grad = np.asarray(grad, dtype=float)
    rho = math.sqrt(max(float(grad @ mode.sigma_f @ grad), 0.0))
    q = mode.g_quad(grad)
    return _cone(p, rho, q, grad @ mode.mu_g, float(grad @ mode.mu_f), gamma_val, mode.n * mode.m)


def _upper_level(merit, w, starts, target, opts: BilevelOptions, feas_only=False):
    """Projected-gradient descent of merit(p) on the allocation face.

    ``merit`` returns (value, feasible, payload). Returns the best point,
    its merit record, the accepted-merit history and the start merit.
    """
    K = w.size
    best = None
    for y in starts:
        p = kernels.project_to_face(np.clip(y, opts.p_floor, opts.p_ceil), w, target,
                                    opts.p_floor, opts.p_ceil)
        rec = merit(p)
        if best is None or rec[0] <= best[1][0]:
            best = (p, rec)
    p, rec = best
    history = [rec[0]]
    init = rec[0]
    wsq = float(w @ w)
    for _ in range(opts.max_iter):
        J, feas = rec[0], rec[1]
        if K == 1 or (feas_only and feas) or (feas and J <= 0.0):
            break
        g = np.empty(K)
        for i in range(K):
            up = p.copy()
            dn = p.copy()
            up[i] = min(p[i] + opts.fd_h, opts.p_ceil)
            dn[i] = max(p[i] - opts.fd_h, opts.p_floor)
            g[i] = (merit(up)[0] - merit(dn)[0]) / (up[i] - dn[i]) if up[i] > dn[i] else 0.0
        g -= (g @ w) / wsq * w
        gnorm = float(np.linalg.norm(g))
        if gnorm == 0.0 or not np.isfinite(gnorm):
            break
        t = 0.25
        accepted = False
        moved = 0.0
        while t >= opts.step_tol:
            p_new = kernels.project_to_face(p - t * g / gnorm, w, target, opts.p_floor, opts.p_ceil)
            moved = float(np.linalg.norm(p_new - p))
            rec_new = merit(p_new)
            if rec_new[0] < J and rec_new[0] <= J + 1e-4 * float(g @ (p_new - p)):
                p, rec = p_new, rec_new
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        history.append(rec[0])
        if moved < opts.step_tol:
            break
    return p, rec, history, init


def _initial_allocations(w, drift, rho, eps_f, opts):
    """Uniform p = 1 - eps_f, and the equalized-k allocation that ignores Sigma_g."""
    starts = [np.full(w.size, 1.0 - eps_f)]
    if w.size > 1:
        _, _, p_add, _, _, st = kernels.additive_allocation(w, drift, rho, eps_f, opts.eps0)
        if st == kernels.ALLOC_OK:
            starts.append(p_add)
    return starts


def _solve_general(pr: Projection, gam, dof, u_ref, lo, hi, eps_f, opts, feas_only):
    w = pr.weights
    K = w.size
    span = float(np.max(np.maximum(hi - u_ref, u_ref - lo)))
    big = 10.0 * (1.0 + span * span)
    cache = {}

    def merit(p):
        key = p.tobytes()
        if key in cache:
            return cache[key]
        cons = [_cone(p[i], pr.rho[0, i], pr.q[0, i], pr.a[0, i], pr.drift[0, i], gam, dof).as_tuple()
                for i in range(K)]
        res = solve_socp(u_ref, cons, lo, hi)
        if res.feasible:
            out = (res.objective, True, res.u, 0.0)
        else:
            out = (big + res.violation, False, res.u, res.violation)
        cache[key] = out
        return out

    starts = _initial_allocations(w, pr.drift[0], pr.rho[0], eps_f, opts)
    p, rec, history, init = _upper_level(merit, w, starts, 1.0 - eps_f, opts, feas_only)
    J, feas, u, viol = rec
    return u, p, J, feas, viol, history, init


def _solve_interval(pr: Projection, gam, dof, u_ref, lo, hi, eps_f, opts, feas_only):
    hist = np.empty(opts.max_iter + 1)
    u, p, J, feas, viol, n_hist, init = kernels.bilevel_1d(
        pr.weights, pr.drift[0], pr.rho[0], pr.a[0, :, 0].copy(), pr.q[0, :, 0, 0].copy(),
        float(gam), float(dof), float(lo[0]), float(hi[0]), float(u_ref[0]), float(eps_f),
        opts.eps0, opts.p_floor, opts.p_ceil, opts.fd_h, opts.max_iter, opts.step_tol,
        feas_only, hist)
    return np.array([u]), p, J, feas, viol, hist[:n_hist].tolist(), init


def bilevel_solve(x, u_ref, model: MultiModalModel, index, gamma: GammaSpec = GammaSpec(),
                  eps_f: float = 0.01, options: BilevelOptions = BilevelOptions(),
                  feasibility_only: bool = False) -> SafeControlResult:
    """Locally least-conservative control for a multiplicative mixture model."""
    if not 0.0 < eps_f < 1.0:
        raise ValueError("eps_f must lie in (0, 1)")
    if not options.p_floor <= 1.0 - eps_f <= options.p_ceil:
        raise ValueError("1 - eps_f must lie within [p_floor, p_ceil]")
    x = np.asarray(x, dtype=float)
    u_ref = np.atleast_1d(np.asarray(u_ref, dtype=float))
    lo, hi = model.lower, model.upper
    grad = index.grad(x)
    gam = float(gamma_eval(index.value(x), gamma))
    pr = model.project(x[None, :], grad[None, :])
    dof = model.n * model.m
    use_interval = options.lower_level == "interval" or (options.lower_level == "auto" and model.m == 1)
    if use_interval and model.m != 1:
        raise ValueError("the interval lower level needs a single control")
    solver = _solve_interval if use_interval else _solve_general
    u, p, J, feas, viol, history, init = solver(pr, gam, dof, u_ref, lo, hi, eps_f, options,
                                                feasibility_only)
    achieved = float(pr.weights @ p)
    cons = [_cone(p[i], pr.rho[0, i], pr.q[0, i], pr.a[0, i], pr.drift[0, i], gam, dof)
            for i in range(p.size)]
    slack = cone_violation(u, [c.as_tuple() for c in cons])
    if not feas:
        status = "infeasible-relaxed"
    elif np.array_equal(u, u_ref):
        status = "reference-feasible"
    else:
        status = "optimal"
    alloc = [(math.sqrt(chi2_quantile(c.p_f, 1)) if c.p_f < 1.0 else 0.0, float(pi))
             for c, pi in zip(cons, p)]
    diag = {"objective": float(J) if feas else float(np.sum((u - u_ref) ** 2)),
            "initial_merit": float(init), "history": [float(h) for h in history],
            "violation": float(viol), "lower_level": "interval" if use_interval else "socp"}
    return SafeControlResult(u, alloc, achieved, float(slack), status, diagnostics=diag)
