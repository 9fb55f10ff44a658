"""Primal log-barrier interior-point method for the safe-control SOCP.

    minimize    ||u - u_ref||^2
    subject to  ||L_i' u|| <= -mu_i' u + c_i,   i = 1..K
                lower <= u <= upper

Each cone contributes -log(t^2 - ||y||^2) with t = c_i - mu_i' u and
y = L_i' u; each box side contributes -log of its slack. A phase-I
problem over (u, s) with t = c_i + s - mu_i' u either finds a strictly
feasible start or certifies that no point of the box is feasible.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GAP_TOL = 1e-8
GROWTH = 5.0


@dataclass
class SocpResult:
    u: np.ndarray
    objective: float
    status: str            # "reference-feasible", "optimal" or "infeasible"
    violation: float       # max_i ||L_i' u|| + mu_i' u - c_i, clipped at 0
    gap: float             # barrier duality-gap bound nu / tau
    kkt_residual: float
    iterations: int

    @property
    def feasible(self) -> bool:
        return self.status != "infeasible"


def cone_violation(u, constraints) -> float:
    """Largest constraint value; nonpositive when all cones hold."""
    u = np.asarray(u, dtype=float)
    if not constraints:
        return -np.inf
    return max(float(np.linalg.norm(L.T @ u) + mu @ u - c) for L, mu, c in constraints)


class _Barrier:
    """Barrier-augmented objective over z = u (phase II) or z = (u, s) (phase I)."""

    def __init__(self, constraints, lower, upper, u_ref, phase_one):
        self.cons = constraints
        self.lo = lower
        self.hi = upper
        self.u_ref = u_ref
        self.p1 = phase_one
        self.m = lower.shape[0]

    def _split(self, z):
        return (z[:-1], z[-1]) if self.p1 else (z, 0.0)

    def objective(self, z):
        if self.p1:
            return z[-1], np.eye(z.size)[-1], np.zeros((z.size, z.size))
        d = z - self.u_ref
        return float(d @ d), 2.0 * d, 2.0 * np.eye(z.size)

    def barrier(self, z, need_derivs=True):
        u, s = self._split(z)
        dim = z.size
        val = 0.0
        grad = np.zeros(dim)
        hess = np.zeros((dim, dim))
        for L, mu, c in self.cons:
            t = c + s - mu @ u
            y = L.T @ u
            gap = t * t - y @ y
            if t <= 0.0 or gap <= 0.0:
                return np.inf, None, None
            val -= np.log(gap)
            if not need_derivs:
                continue
            alpha = np.zeros(dim)
            alpha[:self.m] = -mu
            if self.p1:
                alpha[-1] = 1.0
            B = np.zeros((y.size, dim))
            B[:, :self.m] = L.T
            dgap = 2.0 * t * alpha - 2.0 * B.T @ y
            grad -= dgap / gap
            hess -= (2.0 * np.outer(alpha, alpha) - 2.0 * B.T @ B) / gap
            hess += np.outer(dgap, dgap) / gap ** 2
        sl = u - self.lo
        su = self.hi - u
        if np.any(sl <= 0.0) or np.any(su <= 0.0):
            return np.inf, None, None
        val -= np.sum(np.log(sl)) + np.sum(np.log(su))
        if need_derivs:
            grad[:self.m] += -1.0 / sl + 1.0 / su
            hess[np.arange(self.m), np.arange(self.m)] += 1.0 / sl ** 2 + 1.0 / su ** 2
        return val, grad, hess

    @property
    def nu(self):
        return 2.0 * len(self.cons) + 2.0 * self.m

    def center(self, z, tau, max_newton=100, tol=1e-12):
        """Newton's method with backtracking on tau * f + barrier."""
        its = 0
        for its in range(1, max_newton + 1):
            f, fg, fh = self.objective(z)
            b, bg, bh = self.barrier(z)
            F = tau * f + b
            grad = tau * fg + bg
            hess = tau * fh + bh
            try:
                step = -np.linalg.solve(hess, grad)
            except np.linalg.LinAlgError:
                step = -np.linalg.lstsq(hess, grad, rcond=None)[0]
            dec = float(-grad @ step)
            if dec / 2.0 <= tol:
                break
            t = 1.0
            while t > 1e-14:
                zn = z + t * step
                bn = self.barrier(zn, need_derivs=False)[0]
                if np.isfinite(bn):
                    # inside the quadratic region a full step is safe even
                    # when rounding hides the decrease in F
                    if t == 1.0 and dec < 0.04:
                        break
                    fn = tau * self.objective(zn)[0] + bn
                    if fn <= F - 0.25 * t * dec:
                        break
                t *= 0.5
            else:
                break
            z = zn
            if self.p1 and cone_violation(z[:-1], self.cons) < 0.0 and self._interior_box(z[:-1]):
                break
        return z, its

    def _interior_box(self, u):
        return bool(np.all(u > self.lo) and np.all(u < self.hi))


def _interior_start(u_ref, lo, hi):
    frac = np.clip((u_ref - lo) / (hi - lo), 0.05, 0.95)
    return lo + frac * (hi - lo)


def _normalize(constraints, m):
    out = []
    for L, mu, c in constraints:
        L = np.asarray(L, dtype=float).reshape(m, -1)
        mu = np.asarray(mu, dtype=float).reshape(m)
        out.append((L, mu, float(c)))
    return out


def _cone_grad(L, mu, u):
    y = L.T @ u
    ny = np.linalg.norm(y)
    return mu + (L @ y) / ny if ny > 0.0 else None


def _active_sets(u, constraints, lo, hi, tol):
    act = [i for i, (L, mu, c) in enumerate(constraints)
           if np.linalg.norm(L.T @ u) + mu @ u - c > -tol]
    at_lo = np.abs(u - lo) <= tol * np.maximum(1.0, np.abs(lo))
    at_hi = np.abs(hi - u) <= tol * np.maximum(1.0, np.abs(hi))
    return act, at_lo, at_hi


def kkt_residual(u, u_ref, constraints, lower, upper, tol=1e-6) -> float:
    """Stationarity residual with least-squares multipliers on the active set.

    Cone multipliers are fit on the free coordinates and clipped at zero;
    coordinates on a bound only count the part of the residual whose sign
    a nonnegative bound multiplier cannot absorb.
    """
    u = np.asarray(u, dtype=float)
    act, at_lo, at_hi = _active_sets(u, constraints, lower, upper, tol)
    r = 2.0 * (u - u_ref)
    grads = [g for g in (_cone_grad(*constraints[i][:2], u) for i in act) if g is not None]
    if grads:
        free = ~(at_lo | at_hi)
        Gm = np.array(grads).T
        if np.any(free):
            lam = np.linalg.lstsq(Gm[free], -r[free], rcond=None)[0]
        else:
            lam = np.zeros(len(grads))
        r = r + Gm @ np.maximum(lam, 0.0)
    r = np.where(at_lo, np.minimum(r, 0.0), r)
    r = np.where(at_hi, np.maximum(r, 0.0), r)
    return float(np.linalg.norm(r))


def _polish(u, u_ref, constraints, lo, hi, tol=1e-6, iters=20):
    """Newton on the active-set KKT equations; returns an improved u or None."""
    act, at_lo, at_hi = _active_sets(u, constraints, lo, hi, tol)
    if not act:
        return None
    free = np.flatnonzero(~(at_lo | at_hi))
    nf, na = free.size, len(act)
    if na > nf:
        return None
    z = u.copy()
    lam = np.zeros(na)
    for _ in range(iters):
        rows = []
        H = 2.0 * np.eye(nf)
        grad = 2.0 * (z - u_ref)[free]
        G = np.empty((na, nf))
        gval = np.empty(na)
        for j, i in enumerate(act):
            L, mu, c = constraints[i]
            y = L.T @ z
            ny = np.linalg.norm(y)
            if ny == 0.0:
                return None
            gi = mu + L @ y / ny
            G[j] = gi[free]
            gval[j] = ny + mu @ z - c
            Hi = (L @ L.T) / ny - np.outer(L @ y, L @ y) / ny ** 3
            H += lam[j] * Hi[np.ix_(free, free)]
            grad += lam[j] * gi[free]
            rows.append(gi)
        kkt = np.block([[H, G.T], [G, np.zeros((na, na))]])
        rhs = -np.concatenate([grad, gval])
        try:
            step = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            return None
        z[free] += step[:nf]
        lam += step[nf:]
        if np.linalg.norm(step) < 1e-15 * (1.0 + np.linalg.norm(z)):
            break
    if np.any(lam < -1e-9) or np.any(z < lo) or np.any(z > hi):
        return None
    return z


def phase_one(constraints, lower, upper, u_start, gap_tol=GAP_TOL):
    """Find a strictly feasible u or prove infeasibility.

    Returns (u, s_upper, s_lower): s_upper is the attained max violation,
    s_lower a certified lower bound on the best achievable violation.
    """
    m = lower.size
    u0 = _interior_start(u_start, lower, upper)
    s0 = max(cone_violation(u0, constraints), 0.0) + 1.0
    z = np.append(u0, s0)
    bar = _Barrier(constraints, lower, upper, None, phase_one=True)
    tau = 1.0
    s_low = -np.inf
    for _ in range(200):
        z, _ = bar.center(z, tau)
        viol = cone_violation(z[:m], constraints)
        if viol < 0.0:
            return z[:m], viol, s_low
        s_low = z[-1] - bar.nu / tau
        if bar.nu / tau < gap_tol * max(1.0, abs(z[-1])):
            return z[:m], viol, s_low
        tau *= GROWTH
    return z[:m], cone_violation(z[:m], constraints), s_low


def solve_socp(u_ref, constraints, lower, upper, gap_tol: float = GAP_TOL) -> SocpResult:
    """Interior-point solve of the box-constrained SOCP projection.

    ``constraints`` is a sequence of (L (m, r), mu (m,), c) triples.
    """
    u_ref = np.atleast_1d(np.asarray(u_ref, dtype=float))
    m = u_ref.size
    lo = np.broadcast_to(np.asarray(lower, dtype=float), (m,)).copy()
    hi = np.broadcast_to(np.asarray(upper, dtype=float), (m,)).copy()
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ValueError("control box must be finite")
    if np.any(hi <= lo):
        raise ValueError("control box must have nonempty interior")
    cons = _normalize(constraints, m)

    if np.all(u_ref > lo) and np.all(u_ref < hi) and cone_violation(u_ref, cons) < 0.0:
        return SocpResult(u_ref.copy(), 0.0, "reference-feasible", 0.0, 0.0, 0.0, 0)

    u0, viol, s_low = phase_one(cons, lo, hi, u_ref, gap_tol)
    if viol >= 0.0:
        return SocpResult(u0, float(np.sum((u0 - u_ref) ** 2)), "infeasible",
                          max(viol, 0.0), max(s_low, 0.0), float("nan"), 0)

    bar = _Barrier(cons, lo, hi, u_ref, phase_one=False)
    span = float(np.max(np.maximum(hi - u_ref, u_ref - lo)))
    tau = 1.0 / max(1.0, span * span)
    u = u0
    total = 0
    while True:
        u, its = bar.center(u, tau)
        total += its
        if bar.nu / tau <= gap_tol:
            break
        tau *= GROWTH
    res = kkt_residual(u, u_ref, cons, lo, hi)
    polished = _polish(u, u_ref, cons, lo, hi)
    if polished is not None:
        pres = kkt_residual(polished, u_ref, cons, lo, hi)
        if cone_violation(polished, cons) <= 1e-12 and pres < res:
            u, res = polished, pres
    obj = float(np.sum((u - u_ref) ** 2))
    return SocpResult(u, obj, "optimal", max(cone_violation(u, cons), 0.0), bar.nu / tau,
                      res, total)
