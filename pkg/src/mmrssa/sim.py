"""Closed-loop Segway simulation, the moment-matched baseline and
feasible-control-set measurement."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .additive import BracketExhaustedError, SafeControlResult, binary_search_allocation, solve_safe_control_additive
from .mathkit import chi2_quantile
from .model import MultiModalModel, baseline_unimodal
from .multiplicative import BilevelOptions, _cone, bilevel_solve
from .safety import GammaSpec, gamma_eval

__all__ = [
    "FeasibleSetReport", "RolloutRecord", "SafeController", "baseline_unimodal",
    "compare_feasible_sets", "nominal_controller", "probe_battery", "rollout", "safe_control",
    "step",
]

SOLVERS = ("additive", "multiplicative")
TILT_VALID = math.pi / 2
# realized slack above this counts as a violation; below it is rounding at an active constraint
VIOLATION_TOL = 1e-9


def nominal_controller(x, target_speed: float = 1.0, gain: float = 10.0,
                       lower: float = -20.0, upper: float = 20.0) -> np.ndarray:
    """Proportional speed tracker u = gain (target - p_dot), clipped."""
    x = np.asarray(x, dtype=float)
    return np.array([min(max(gain * (target_speed - x[2]), lower), upper)])


def safe_control(x, u_ref, model, index, gamma=GammaSpec(), eps_f=0.01, solver="multiplicative",
                 eps0=1e-6, options: BilevelOptions | None = None,
                 feasibility_only=False) -> SafeControlResult:
    if solver == "additive":
        return solve_safe_control_additive(x, u_ref, model, index, gamma, eps_f, eps0)
    if solver == "multiplicative":
        opts = options or BilevelOptions(eps0=eps0)
        return bilevel_solve(x, u_ref, model, index, gamma, eps_f, opts, feasibility_only)
    raise ValueError(f"unknown solver {solver!r}; expected one of {SOLVERS}")


@dataclass
class SafeController:
    """Nominal tracking plus the chance-constrained safety filter."""

    model: MultiModalModel
    index: object
    gamma: GammaSpec = GammaSpec()
    eps_f: float = 0.01
    solver: str = "additive"
    target_speed: float = 1.0
    gain: float = 10.0

    def reference(self, x):
        return nominal_controller(x, self.target_speed, self.gain,
                                  float(self.model.lower[0]), float(self.model.upper[0]))

    def __call__(self, x) -> SafeControlResult:
        return safe_control(x, self.reference(x), self.model, self.index, self.gamma,
                            self.eps_f, self.solver)


def _fields(truth, x):
    if callable(truth):
        return truth(x[None, :])
    return truth


def step(x, u, dt: float, truth) -> np.ndarray:
    """One RK4 step of x' = f + g u.

    ``truth`` is either a constant pair (f, g) or a callable of a (1, n)
    state batch returning (f, g) with the uncertain parameters held.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))

    def rhs(z):
        f, g = _fields(truth, z)
        return np.asarray(f, dtype=float) + np.asarray(g, dtype=float) @ u

    k1 = rhs(x)
    k2 = rhs(x + 0.5 * dt * k1)
    k3 = rhs(x + 0.5 * dt * k2)
    k4 = rhs(x + dt * k3)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@dataclass
class RolloutRecord:
    times: np.ndarray
    states: np.ndarray           # (T + 1, n)
    controls: np.ndarray         # (T, m)
    phi: np.ndarray              # (T + 1,)
    slack: np.ndarray            # (T,) realized phi_dot + gamma(phi); > VIOLATION_TOL is a violation
    statuses: list
    allocations: list
    terminated: bool = False
    reason: str = ""

    @property
    def max_tilt(self) -> float:
        return float(np.max(np.abs(self.states[:, 1])))

    @property
    def violations(self) -> int:
        return int(np.sum(self.slack > VIOLATION_TOL))

    def rows(self):
        """Per-step rows: t, state, u, phi, slack, status."""
        for k in range(len(self.controls)):
            yield (self.times[k], *self.states[k], *self.controls[k], self.phi[k],
                   self.slack[k], self.statuses[k])


def rollout(controller: Callable | None, x0, T: float, dt: float, rng: np.random.Generator,
            model: MultiModalModel, index=None, gamma: GammaSpec = GammaSpec(),
            nominal: Callable | None = None) -> RolloutRecord:
    """Simulate under a fresh truth draw per control period.

    ``controller(x)`` returns a SafeControlResult. With ``controller=None``
    the ``nominal(x)`` law is applied unfiltered.
    """
    if controller is None and nominal is None:
        raise ValueError("need a controller or a nominal law")
    if index is None:
        index = getattr(controller, "index", None)
    steps = int(round(T / dt))
    x = np.asarray(x0, dtype=float).copy()
    states = np.empty((steps + 1, x.size))
    controls = np.empty((steps, model.m))
    slack = np.full(steps, np.nan)
    statuses, allocs = [], []
    states[0] = x
    mode_u, normals = model.noise_plan(rng, steps)
    done = steps
    reason = ""
    for k in range(steps):
        if controller is None:
            u = np.atleast_1d(nominal(x))
            statuses.append("nominal")
            allocs.append([])
        else:
            res = controller(x)
            u = np.atleast_1d(res.u)
            statuses.append(res.status)
            allocs.append(res.allocation)
        controls[k] = u
        truth = model.truth_from(x, float(mode_u[k]), normals[k])
        if index is not None:
            f, g = _fields(truth, x)
            phidot = float(index.grad(x) @ (np.asarray(f) + np.asarray(g) @ u))
            slack[k] = phidot + float(gamma_eval(index.value(x), gamma))
        x = step(x, u, dt, truth)
        states[k + 1] = x
        if not np.all(np.isfinite(x)) or abs(x[1]) >= TILT_VALID:
            done = k + 1
            reason = "tilt left the model's validity range"
            break
    n = done
    phi_vals = (np.asarray(index.value(states[:n + 1]), dtype=float) if index is not None
                else np.full(n + 1, np.nan))
    return RolloutRecord(np.arange(n + 1) * dt, states[:n + 1], controls[:n], phi_vals,
                         slack[:n], statuses[:n], allocs[:n], n < steps, reason)


@dataclass
class FeasibleSetReport:
    state: np.ndarray
    multi_modal_interval: float
    uni_modal_interval: float
    rhs_multi: float
    rhs_uni: float
    box: tuple = field(default=(), repr=False)

    def to_row(self):
        return (*self.state, self.multi_modal_interval, self.uni_modal_interval,
                self.rhs_multi, self.rhs_uni)


def _sweep(lower, upper, n_points):
    m = lower.size
    if m == 1:
        return np.linspace(lower[0], upper[0], n_points)[:, None], float(upper[0] - lower[0])
    if m == 2:
        side = int(round(math.sqrt(n_points)))
        a = np.linspace(lower[0], upper[0], side)
        b = np.linspace(lower[1], upper[1], side)
        A, B = np.meshgrid(a, b, indexing="ij")
        return np.column_stack([A.ravel(), B.ravel()]), float(np.prod(upper - lower))
    raise ValueError("feasible-set measurement supports m = 1 or m = 2")


def _cone_mask(U, cons):
    ok = np.ones(len(U), dtype=bool)
    for c in cons:
        ok &= np.linalg.norm(U @ c.L, axis=1) + U @ c.mu - c.c <= 0.0
    return ok


def _multiplicative_cones(model, x, grad, gam, p):
    pr = model.project(x[None, :], grad[None, :])
    dof = model.n * model.m
    return [_cone(p[i], pr.rho[0, i], pr.q[0, i], pr.a[0, i], pr.drift[0, i], gam, dof)
            for i in range(len(p))]


def compare_feasible_sets(x, model: MultiModalModel, index, gamma: GammaSpec = GammaSpec(),
                          eps_f: float = 0.01, solver: str = "multiplicative", u_ref=None,
                          n_points: int = 10_000) -> FeasibleSetReport:
    """Measure of the safe control set under the mixture and under the
    moment-matched single Gaussian, both swept over the control box."""
    x = np.asarray(x, dtype=float)
    lo, hi = model.lower, model.upper
    U, volume = _sweep(lo, hi, n_points)
    grad = index.grad(x)
    gam = float(gamma_eval(index.value(x), gamma))
    uni = model.unimodal()
    if solver == "additive":
        try:
            con = binary_search_allocation(model.modes(x), grad, gam, eps_f)
            ok_multi = U @ con.a <= con.b
            rhs_multi = con.b
        except BracketExhaustedError:
            ok_multi = np.zeros(len(U), dtype=bool)
            rhs_multi = -np.inf
        (mode,) = uni.modes(x)
        k = math.sqrt(chi2_quantile(1.0 - eps_f, 1))
        rho = math.sqrt(max(float(grad @ mode.sigma_f @ grad), 0.0))
        b_uni = float(-grad @ mode.mu_f - k * rho - gam)
        ok_uni = U @ (grad @ mode.mu_g) <= b_uni
    elif solver == "multiplicative":
        u_ref = np.zeros(model.m) if u_ref is None else np.atleast_1d(u_ref)
        res = bilevel_solve(x, u_ref, model, index, gamma, eps_f)
        p = np.array([pi for _, pi in res.allocation])
        cons = _multiplicative_cones(model, x, grad, gam, p)
        ok_multi = _cone_mask(U, cons)
        uni_cons = _multiplicative_cones(uni, x, grad, gam, np.array([1.0 - eps_f]))
        ok_uni = _cone_mask(U, uni_cons)
        rhs_multi = min(c.c for c in cons)
        b_uni = uni_cons[0].c
    else:
        raise ValueError(f"unknown solver {solver!r}")
    frac = volume / len(U)
    return FeasibleSetReport(x, float(ok_multi.sum() * frac), float(ok_uni.sum() * frac),
                             float(rhs_multi), float(b_uni), (lo.copy(), hi.copy()))


def _informative(rep: FeasibleSetReport, box_measure: float) -> bool:
    """The constraint cuts the box for at least one method."""
    return any(0.0 < v < box_measure for v in (rep.multi_modal_interval, rep.uni_modal_interval))


def probe_battery(model: MultiModalModel, index, n: int, rng: np.random.Generator, sampler,
                  gamma: GammaSpec = GammaSpec(), eps_f: float = 0.01,
                  solver: str = "multiplicative", n_points: int = 10_000,
                  max_draws: int = 100_000) -> list[FeasibleSetReport]:
    """Comparisons at the first n sampled states where the safe set is a
    proper, nonempty part of the control box for at least one method.

    ``sampler(rng)`` draws one state. States where both sets are empty or
    both cover the whole box carry no information about conservatism.
    """
    box = float(np.prod(model.upper - model.lower))
    out = []
    for _ in range(max_draws):
        if len(out) == n:
            break
        x = sampler(rng)
        rep = compare_feasible_sets(x, model, index, gamma, eps_f, solver, n_points=n_points)
        if _informative(rep, box):
            out.append(rep)
    return out
