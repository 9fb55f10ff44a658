"""Chance-constrained safe control under multi-modal additive uncertainty.

The safety constraint for mode i at sigma multiplier k_i reads

    grad.g u <= -gamma(phi) + o_i(k_i),   o_i(k) = -grad.mu_f_i - k rho_i,

and the least conservative allocation equalizes the offsets o_i while the
covered probability sum_i P(theta_i) chi2_cdf(k_i^2, 1) equals 1 - eps_f.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .mathkit import ellipsoid_support
from .model import ModeParams, MultiModalModel, project_modes
from .safety import GammaSpec, gamma_eval

STATUS_NAMES = {
    kernels.STATUS_REFERENCE: "reference-feasible",
    kernels.STATUS_OPTIMAL: "optimal",
    kernels.STATUS_INFEASIBLE: "infeasible-relaxed",
}


class BracketExhaustedError(RuntimeError):
    """Even k_1 = 10 cannot cover 1 - eps_f of the probability mass."""


class DegenerateModeError(ValueError):
    """A deterministic mode whose offset cannot match the reference."""


@dataclass
class AdditiveConstraint:
    a: np.ndarray        # constraint normal grad.mu_g in control space
    b: float             # right-hand side: level - gamma
    level: float         # common offset of the equalized modes
    k: np.ndarray
    p: np.ndarray
    flags: np.ndarray    # kernels.MODE_* per mode
    achieved: float

    @property
    def per_mode(self):
        offsets = np.where(self.flags == kernels.MODE_EQUALIZED, self.level, np.nan)
        return list(zip(self.k.tolist(), self.p.tolist(), offsets.tolist()))


@dataclass
class SafeControlResult:
    u: np.ndarray
    allocation: list            # per mode (k_i, p_i)
    achieved_probability: float
    slack: float                # constraint value at u; <= 0 when satisfied
    status: str
    rhs: float = float("nan")
    diagnostics: dict = field(default_factory=dict)

    @property
    def feasible(self) -> bool:
        return self.status != "infeasible-relaxed"

    def to_dict(self):
        return {
            "u": [float(v) for v in np.atleast_1d(self.u)],
            "allocation": [{"k": float(k), "p": float(p)} for k, p in self.allocation],
            "achieved_probability": float(self.achieved_probability),
            "slack": float(self.slack),
            "status": self.status,
            "rhs": float(self.rhs),
            "diagnostics": self.diagnostics,
        }


def mode_offset(mode: ModeParams, k: float, grad) -> float:
    """o(x, theta, k) = -grad.mu_f - k * rho."""
    if k < 0:
        raise ValueError("k must be nonnegative")
    grad = np.asarray(grad, dtype=float)
    return float(-grad @ mode.mu_f - k * ellipsoid_support(grad, mode.sigma_f))


def solve_k_chain(k1: float, modes, grad) -> list[float]:
    """Multipliers that give every mode the offset of mode 0 at k1.

    Negative solutions are clamped to 0. A deterministic mode (rho = 0)
    has a fixed offset and raises unless it already matches.
    """
    grad = np.asarray(grad, dtype=float)
    o1 = mode_offset(modes[0], k1, grad)
    ks = [float(k1)]
    for md in modes[1:]:
        rho = ellipsoid_support(grad, md.sigma_f)
        mean_term = float(grad @ md.mu_f)
        if rho == 0.0:
            if not np.isclose(-mean_term, o1, rtol=0.0, atol=1e-12):
                raise DegenerateModeError("deterministic mode cannot match the reference offset")
            ks.append(0.0)
            continue
        ks.append(max((o1 + mean_term) / -rho, 0.0))
    return ks


def _allocation(w, d, rho, gamma_val, a, eps_f, eps0) -> AdditiveConstraint:
    if not 0.0 < eps_f < 1.0:
        raise ValueError("eps_f must lie in (0, 1)")
    level, k, p, flags, achieved, st = kernels.additive_allocation(
        np.ascontiguousarray(w, dtype=float), np.ascontiguousarray(d, dtype=float),
        np.ascontiguousarray(rho, dtype=float), float(eps_f), float(eps0))
    if st == kernels.ALLOC_BRACKET_EXHAUSTED:
        raise BracketExhaustedError(
            f"cannot reach probability {1 - eps_f} with k_1 <= {kernels.K1_MAX}")
    return AdditiveConstraint(np.asarray(a, dtype=float), float(level - gamma_val), float(level),
                              k, p, flags, float(achieved))


def binary_search_allocation(modes, grad, gamma_val: float, eps_f: float,
                             eps0: float = 1e-6) -> AdditiveConstraint:
    """Algorithm-1 allocation for the modes at one state."""
    pr = project_modes(modes, grad)
    return _allocation(pr.weights, pr.drift[0], pr.rho[0], gamma_val, pr.a[0, 0], eps_f, eps0)


def _require_additive(modes):
    g0 = modes[0].mu_g
    for md in modes:
        if np.any(md.sigma_g) or not np.allclose(md.mu_g, g0, rtol=0, atol=1e-12):
            raise ValueError("additive solver needs a deterministic, mode-independent g")


def solve_safe_control_additive(x, u_ref, model: MultiModalModel, index, gamma: GammaSpec = GammaSpec(),
                                eps_f: float = 0.01, eps0: float = 1e-6) -> SafeControlResult:
    """Minimize ||u - u_ref||^2 over the box subject to the aggregated constraint."""
    x = np.asarray(x, dtype=float)
    u_ref = np.atleast_1d(np.asarray(u_ref, dtype=float))
    modes = model.modes(x)
    _require_additive(modes)
    grad = index.grad(x)
    gam = float(gamma_eval(index.value(x), gamma))
    try:
        con = binary_search_allocation(modes, grad, gam, eps_f, eps0)
    except BracketExhaustedError as exc:
        a = np.atleast_1d(np.asarray(grad @ modes[0].mu_g, dtype=float))
        vertex = kernels.min_vertex(a, u_ref, model.lower, model.upper)
        return SafeControlResult(vertex, [], 0.0, float("inf"), "infeasible-relaxed",
                                 diagnostics={"error": str(exc)})
    u, st = kernels.project_halfspace_box(con.a, con.b, u_ref, model.lower, model.upper)
    slack = float(con.a @ u - con.b)
    return SafeControlResult(u, list(zip(con.k.tolist(), con.p.tolist())), con.achieved,
                             slack, STATUS_NAMES[int(st)], rhs=con.b,
                             diagnostics={"level": con.level, "flags": con.flags.tolist()})


def project_to_halfspace(a, b, u_ref, lower, upper):
    """Closest box point to u_ref with a.u <= b; returns (u, status name)."""
    u, st = kernels.project_halfspace_box(np.atleast_1d(np.asarray(a, dtype=float)), float(b),
                                          np.atleast_1d(np.asarray(u_ref, dtype=float)),
                                          np.atleast_1d(np.asarray(lower, dtype=float)),
                                          np.atleast_1d(np.asarray(upper, dtype=float)))
    return u, STATUS_NAMES[int(st)]
