"""Compiled inner loops shared by the solvers, certification and synthesis.

Inputs are the projected per-mode scalars (see :class:`model.Projection`):
weights ``w``, drift ``d = grad.mu_f``, ``rho = sqrt(grad' Sigma_f grad)``,
``a = grad.mu_g`` and ``q = grad' Sigma_g grad``. The single-control
(m = 1) kernels solve the second-order cone lower level exactly as an
interval intersection.
"""
import math

import numpy as np

from ._jit import njit
from .mathkit import _chi2_cdf, _chi2_ppf

# per-mode allocation flags
MODE_EQUALIZED = 0
MODE_CLAMPED = 1
MODE_DETERMINISTIC_KEPT = 2
MODE_DETERMINISTIC_DROPPED = 3

# additive allocation status
ALLOC_OK = 0
ALLOC_BRACKET_EXHAUSTED = 1

# projection / solver status
STATUS_REFERENCE = 0
STATUS_OPTIMAL = 1
STATUS_INFEASIBLE = 2

K1_MAX = 10.0


@njit
def _evaluate_k1(k1, ref, w, d, rho, k, p, flags):
    level = -d[ref] - k1 * rho[ref]
    total = 0.0
    for i in range(w.shape[0]):
        if rho[i] > 0.0:
            ki = (-level - d[i]) / rho[i]
            if ki < 0.0:
                k[i] = 0.0
                p[i] = 0.0
                flags[i] = MODE_CLAMPED
            else:
                k[i] = ki
                p[i] = _chi2_cdf(ki * ki, 1.0)
                flags[i] = MODE_EQUALIZED
        else:
            k[i] = 0.0
            if -d[i] >= level:
                p[i] = 1.0
                flags[i] = MODE_DETERMINISTIC_KEPT
            else:
                p[i] = 0.0
                flags[i] = MODE_DETERMINISTIC_DROPPED
        total += w[i] * p[i]
    return level, total


@njit
def _bisect_k1(ref, w, d, rho, target, eps0, k, p, flags):
    level, total = _evaluate_k1(K1_MAX, ref, w, d, rho, k, p, flags)
    if total < target:
        return level, total, False
    lo = 0.0
    hi = K1_MAX
    while hi - lo >= eps0:
        mid = 0.5 * (lo + hi)
        _, total = _evaluate_k1(mid, ref, w, d, rho, k, p, flags)
        if total >= target:
            hi = mid
        else:
            lo = mid
    level, total = _evaluate_k1(hi, ref, w, d, rho, k, p, flags)
    return level, total, True


@njit
def additive_allocation(w, d, rho, eps_f, eps0):
    """Least-conservative confidence allocation for additive uncertainty.

    Bisects a reference mode's sigma multiplier on [0, 10]; every other
    mode's multiplier is solved from equal offsets. The reference is the
    uncertain mode with the least safe mean, so no other uncertain mode
    needs a negative multiplier. If its bracket cannot reach the target,
    the next modes in that order are tried. Returns
    (level, k, p, flags, achieved, status); the constraint right-hand side
    is ``level - gamma``.
    """
    K = w.shape[0]
    k = np.zeros(K)
    p = np.zeros(K)
    flags = np.zeros(K, dtype=np.int64)
    target = 1.0 - eps_f
    order = np.argsort(-d, kind="mergesort")  # least safe mean first
    n_unc = 0
    for i in range(K):
        if rho[i] > 0.0:
            n_unc += 1
    if n_unc == 0:
        # every mode deterministic: drop the tightest modes while the
        # dropped weight stays within eps_f
        dropped = 0.0
        level = -d[order[0]]
        for j in range(K):
            idx = order[j]
            level = -d[idx]
            if dropped + w[idx] > eps_f + 1e-15:
                break
            dropped += w[idx]
        achieved = 0.0
        for i in range(K):
            if -d[i] >= level:
                p[i] = 1.0
                flags[i] = MODE_DETERMINISTIC_KEPT
            else:
                flags[i] = MODE_DETERMINISTIC_DROPPED
            achieved += w[i] * p[i]
        status = ALLOC_OK if achieved >= target else ALLOC_BRACKET_EXHAUSTED
        return level, k, p, flags, achieved, status
    level = 0.0
    total = 0.0
    for j in range(K):
        ref = order[j]
        if rho[ref] <= 0.0:
            continue
        level, total, ok = _bisect_k1(ref, w, d, rho, target, eps0, k, p, flags)
        if ok:
            return level, k, p, flags, total, ALLOC_OK
    return level, k, p, flags, total, ALLOC_BRACKET_EXHAUSTED


@njit
def min_vertex(a, u_ref, lo, hi):
    """Box point minimizing a.u, nearest to u_ref along directions a ignores."""
    m = a.shape[0]
    vert = np.empty(m)
    for j in range(m):
        if a[j] > 0.0:
            vert[j] = lo[j]
        elif a[j] < 0.0:
            vert[j] = hi[j]
        else:
            vert[j] = min(max(u_ref[j], lo[j]), hi[j])
    return vert


@njit
def project_halfspace_box(a, b, u_ref, lo, hi):
    """argmin ||u - u_ref||^2 over {a.u <= b} and the box [lo, hi].

    Bisects the single multiplier nu in u(nu) = clip(u_ref - nu a). If no
    box point satisfies the halfspace, returns the box vertex minimizing
    a.u with STATUS_INFEASIBLE.
    """
    m = a.shape[0]
    u = np.empty(m)
    val = 0.0
    for j in range(m):
        u[j] = min(max(u_ref[j], lo[j]), hi[j])
        val += a[j] * u[j]
    if val <= b:
        return u, STATUS_REFERENCE
    vert = min_vertex(a, u_ref, lo, hi)
    vmin = 0.0
    for j in range(m):
        vmin += a[j] * vert[j]
    if vmin > b:
        return vert, STATUS_INFEASIBLE
    nu_lo = 0.0
    nu_hi = 1.0
    for _ in range(2000):
        s = 0.0
        for j in range(m):
            s += a[j] * min(max(u_ref[j] - nu_hi * a[j], lo[j]), hi[j])
        if s <= b:
            break
        nu_lo = nu_hi
        nu_hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (nu_lo + nu_hi)
        if mid <= nu_lo or mid >= nu_hi:
            break
        s = 0.0
        for j in range(m):
            s += a[j] * min(max(u_ref[j] - mid * a[j], lo[j]), hi[j])
        if s <= b:
            nu_hi = mid
        else:
            nu_lo = mid
    for j in range(m):
        u[j] = min(max(u_ref[j] - nu_hi * a[j], lo[j]), hi[j])
    return u, STATUS_OPTIMAL


@njit
def confidence_split(p, rho_i, q_i):
    """(p_f, p_g) with p_f * p_g = p; the whole budget goes to the only
    uncertain factor when the other one is deterministic."""
    if q_i <= 0.0:
        return p, 1.0
    if rho_i <= 0.0:
        return 1.0, p
    s = math.sqrt(p)
    return s, s


@njit
def soc_scalars(p, rho_i, q_i, d_i, gam, dof_g):
    """(L, c) of the cone constraint L|u| + a u <= c for one mode, m = 1."""
    pf, pg = confidence_split(p, rho_i, q_i)
    kf = math.sqrt(_chi2_ppf(pf, 1.0)) if rho_i > 0.0 else 0.0
    kg2 = _chi2_ppf(pg, dof_g) if q_i > 0.0 else 0.0
    return math.sqrt(kg2 * q_i), -gam - d_i - kf * rho_i


@njit
def _cut(lo, hi, s, c):
    if s > 0.0:
        hi = min(hi, c / s)
    elif s < 0.0:
        lo = max(lo, c / s)
    elif c < 0.0:
        return 1.0, 0.0
    return lo, hi


@njit
def soc_interval_1d(L, mu, c, lo, hi):
    """{u in [lo, hi] : L|u| + mu u <= c} as (lo, hi); empty when lo > hi."""
    alo, ahi = _cut(max(lo, 0.0), hi, mu + L, c)
    blo, bhi = _cut(lo, min(hi, 0.0), mu - L, c)
    a_empty = alo > ahi
    b_empty = blo > bhi
    if a_empty and b_empty:
        return 1.0, 0.0
    if a_empty:
        return blo, bhi
    if b_empty:
        return alo, ahi
    return min(alo, blo), max(ahi, bhi)


@njit
def min_max_violation_1d(Ls, mus, cs, lo, hi):
    """min over u in [lo, hi] of max_i (L_i|u| + mu_i u - c_i) and its argmin.

    The objective is a max of lines, so the minimum sits at a box end, at
    u = 0, or where two lines cross.
    """
    K = Ls.shape[0]
    slopes = np.empty(2 * K)
    offs = np.empty(2 * K)
    for i in range(K):
        slopes[2 * i] = mus[i] + Ls[i]
        slopes[2 * i + 1] = mus[i] - Ls[i]
        offs[2 * i] = cs[i]
        offs[2 * i + 1] = cs[i]
    n_lines = 2 * K
    cand = np.empty(3 + n_lines * (n_lines - 1) // 2)
    cand[0] = lo
    cand[1] = hi
    cand[2] = min(max(0.0, lo), hi)
    nc = 3
    for j in range(n_lines):
        for k in range(j + 1, n_lines):
            ds = slopes[j] - slopes[k]
            if ds != 0.0:
                u = (offs[j] - offs[k]) / ds
                if lo <= u <= hi:
                    cand[nc] = u
                    nc += 1
    best = math.inf
    best_u = lo
    for t in range(nc):
        u = cand[t]
        worst = -math.inf
        for i in range(K):
            v = Ls[i] * abs(u) + mus[i] * u - cs[i]
            if v > worst:
                worst = v
        if worst < best:
            best = worst
            best_u = u
    return best, best_u


@njit
def lower_level_1d(p, d, rho, a, q, gam, dof_g, lo, hi, u_ref):
    """Exact m = 1 lower level for a fixed allocation p.

    Returns (feasible, u, objective, violation). When infeasible, u is the
    Phase-I point minimizing the largest constraint violation.
    """
    K = p.shape[0]
    Ls = np.empty(K)
    cs = np.empty(K)
    ilo = lo
    ihi = hi
    for i in range(K):
        L, c = soc_scalars(p[i], rho[i], q[i], d[i], gam, dof_g)
        Ls[i] = L
        cs[i] = c
        if ilo <= ihi:
            ilo, ihi = soc_interval_1d(L, a[i], c, ilo, ihi)
    if ilo <= ihi:
        u = min(max(u_ref, ilo), ihi)
        return True, u, (u - u_ref) ** 2, 0.0
    viol, u = min_max_violation_1d(Ls, a, cs, lo, hi)
    return False, u, (u - u_ref) ** 2, max(viol, 0.0)


@njit
def project_to_face(y, w, target, floor, ceil):
    """Euclidean projection of y onto {w.p = target, floor <= p <= ceil}."""
    K = y.shape[0]
    lam_lo = math.inf
    lam_hi = -math.inf
    for i in range(K):
        lam_lo = min(lam_lo, (y[i] - ceil) / w[i])
        lam_hi = max(lam_hi, (y[i] - floor) / w[i])
    p = np.empty(K)
    for _ in range(200):
        lam = 0.5 * (lam_lo + lam_hi)
        s = 0.0
        for i in range(K):
            p[i] = min(max(y[i] - lam * w[i], floor), ceil)
            s += w[i] * p[i]
        if s > target:
            lam_lo = lam
        else:
            lam_hi = lam
        if lam_hi - lam_lo <= 1e-16 * (1.0 + abs(lam)):
            break
    s = 0.0
    for i in range(K):
        p[i] = min(max(y[i] - lam_hi * w[i], floor), ceil)
        s += w[i] * p[i]
    # put the bisection residual on a free coordinate
    resid = target - s
    for i in range(K):
        if resid == 0.0:
            break
        cand = p[i] + resid / w[i]
        if floor <= cand <= ceil:
            p[i] = cand
            break
    return p


@njit
def _merit(p, d, rho, a, q, gam, dof_g, lo, hi, u_ref, big):
    feas, u, obj, viol = lower_level_1d(p, d, rho, a, q, gam, dof_g, lo, hi, u_ref)
    if feas:
        return obj, feas, u
    return big + viol, feas, u


@njit
def bilevel_1d(w, d, rho, a, q, gam, dof_g, lo, hi, u_ref, eps_f, eps0,
               floor, ceil, fd_h, max_iter, step_tol, feas_only, hist):
    """Projected-gradient upper level over the allocation face with the
    exact interval lower level.

    Starts from the better of the equalized-k allocation and the uniform
    allocation p_i = 1 - eps_f. ``hist`` receives the merit after the start
    and after each accepted step. Returns
    (u, p, merit, feasible, violation, n_hist, init_merit).
    """
    K = w.shape[0]
    target = 1.0 - eps_f
    span = max(abs(hi - u_ref), abs(u_ref - lo))
    big = 10.0 * (1.0 + span * span)

    uniform = np.full(K, min(max(target, floor), ceil))
    best_p = project_to_face(uniform, w, target, floor, ceil)
    best_j, best_feas, best_u = _merit(best_p, d, rho, a, q, gam, dof_g, lo, hi, u_ref, big)
    _, _, p_add, _, _, st = additive_allocation(w, d, rho, eps_f, eps0)
    if st == ALLOC_OK and K > 1:
        y = np.empty(K)
        for i in range(K):
            y[i] = min(max(p_add[i], floor), ceil)
        p_eq = project_to_face(y, w, target, floor, ceil)
        j_eq, f_eq, u_eq = _merit(p_eq, d, rho, a, q, gam, dof_g, lo, hi, u_ref, big)
        if j_eq <= best_j:
            best_p, best_j, best_feas, best_u = p_eq, j_eq, f_eq, u_eq
    p = best_p
    J = best_j
    feas = best_feas
    u = best_u
    init_j = J
    hist[0] = J
    n_hist = 1
    wsq = 0.0
    for i in range(K):
        wsq += w[i] * w[i]
    g = np.empty(K)
    probe = np.empty(K)
    trial = np.empty(K)
    for _ in range(max_iter):
        if K == 1 or (feas_only and feas) or (feas and J <= 0.0):
            break
        for i in range(K):
            for j in range(K):
                probe[j] = p[j]
            up = min(p[i] + fd_h, ceil)
            dn = max(p[i] - fd_h, floor)
            probe[i] = up
            jp, _, _ = _merit(probe, d, rho, a, q, gam, dof_g, lo, hi, u_ref, big)
            probe[i] = dn
            jm, _, _ = _merit(probe, d, rho, a, q, gam, dof_g, lo, hi, u_ref, big)
            g[i] = (jp - jm) / (up - dn) if up > dn else 0.0
        gw = 0.0
        for i in range(K):
            gw += g[i] * w[i]
        gnorm = 0.0
        for i in range(K):
            g[i] -= gw / wsq * w[i]
            gnorm += g[i] * g[i]
        gnorm = math.sqrt(gnorm)
        if gnorm == 0.0 or not math.isfinite(gnorm):
            break
        t = 0.25
        accepted = False
        moved = 0.0
        while t >= step_tol:
            for i in range(K):
                trial[i] = p[i] - t * g[i] / gnorm
            p_new = project_to_face(trial, w, target, floor, ceil)
            decrease = 0.0
            moved = 0.0
            for i in range(K):
                decrease += g[i] * (p_new[i] - p[i])
                moved += (p_new[i] - p[i]) ** 2
            moved = math.sqrt(moved)
            j_new, f_new, u_new = _merit(p_new, d, rho, a, q, gam, dof_g, lo, hi, u_ref, big)
            if j_new < J and j_new <= J + 1e-4 * decrease:
                p = p_new
                J = j_new
                feas = f_new
                u = u_new
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        hist[n_hist] = J
        n_hist += 1
        if moved < step_tol:
            break
    viol = 0.0 if feas else J - big
    return u, p, J, feas, viol, n_hist, init_j


@njit
def batch_bilevel_1d(w, D, RHO, A, Q, GAM, dof_g, lo, hi, U_ref, eps_f, eps0,
                     floor, ceil, fd_h, max_iter, step_tol, feas_only):
    N, K = D.shape
    U = np.empty(N)
    P = np.empty((N, K))
    merit = np.empty(N)
    feasible = np.zeros(N, dtype=np.bool_)
    viol = np.empty(N)
    hist = np.empty(max_iter + 1)
    for s in range(N):
        u, p, J, feas, v, _, _ = bilevel_1d(w, D[s], RHO[s], A[s], Q[s], GAM[s], dof_g, lo, hi,
                                           U_ref[s], eps_f, eps0, floor, ceil, fd_h, max_iter,
                                           step_tol, feas_only, hist)
        U[s] = u
        P[s] = p
        merit[s] = J
        feasible[s] = feas
        viol[s] = v
    return U, P, merit, feasible, viol


@njit
def batch_additive(w, D, RHO, A, GAM, lo, hi, U_ref, eps_f, eps0):
    """Additive safe control for N states. A is (N, m), U_ref (N, m)."""
    N, K = D.shape
    m = A.shape[1]
    U = np.empty((N, m))
    status = np.empty(N, dtype=np.int64)
    rhs = np.empty(N)
    achieved = np.empty(N)
    for s in range(N):
        level, _, _, _, ach, st = additive_allocation(w, D[s], RHO[s], eps_f, eps0)
        b = level - GAM[s]
        rhs[s] = b
        achieved[s] = ach
        if st != ALLOC_OK:
            U[s] = min_vertex(A[s], U_ref[s], lo, hi)
            status[s] = STATUS_INFEASIBLE
        else:
            u, pst = project_halfspace_box(A[s], b, U_ref[s], lo, hi)
            U[s] = u
            status[s] = pst
    return U, status, rhs, achieved
