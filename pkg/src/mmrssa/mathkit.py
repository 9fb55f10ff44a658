"""Special functions and small dense linear algebra.

Everything here is written as scalar loops so it compiles under numba and
can be called from the other kernels. The public wrappers validate inputs
and raise; the ``_``-prefixed kernels assume valid inputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._jit import njit


class DomainError(ValueError):
    """Argument outside the domain of a special function."""


class NotPSDError(ValueError):
    """Matrix failed the positive-semidefinite check."""


@dataclass(frozen=True)
class NumericPolicy:
    psd_tol: float = 1e-9       # relative to the largest diagonal entry
    symmetry_tol: float = 1e-9


DEFAULT_POLICY = NumericPolicy()

_EPS = 2.220446049250313e-16
_FPMIN = 1e-300
_LN_SQRT_2PI = 0.9189385332046727

# Wichura (1988) AS241, PPND16.
_A = (3.3871328727963666080e0, 1.3314166789178437745e2, 1.9715909503065514427e3,
      1.3731693765509461125e4, 4.5921953931549871457e4, 6.7265770927008700853e4,
      3.3430575583588128105e4, 2.5090809287301226727e3)
_B = (1.0, 4.2313330701600911252e1, 6.8718700749205790830e2, 5.3941960214247511077e3,
      2.1213794301586595867e4, 3.9307895800092710610e4, 2.8729085735721942674e4,
      5.2264952788528545610e3)
_C = (1.42343711074968357734e0, 4.63033784615654529590e0, 5.76949722146069140550e0,
      3.64784832476320460504e0, 1.27045825245236838258e0, 2.41780725177450611770e-1,
      2.27238449892691845833e-2, 7.74545014278341407640e-4)
_D = (1.0, 2.05319162663775882187e0, 1.67638483018380384940e0, 6.89767334985100004550e-1,
      1.48103976427480074590e-1, 1.51986665636164571966e-2, 5.47593808499534494600e-4,
      1.05075007164441684324e-9)
_E = (6.65790464350110377720e0, 5.46378491116411436990e0, 1.78482653991729133580e0,
      2.96560571828504891230e-1, 2.65321895265761230930e-2, 1.24266094738807843860e-3,
      2.71155556874348757815e-5, 2.01033439929228813265e-7)
_F = (1.0, 5.99832206555887937690e-1, 1.36929880922735805310e-1, 1.48753612908506148525e-2,
      7.86869131145613259100e-4, 1.84631831751005468180e-5, 1.42151175831644588870e-7,
      2.04426310338993978564e-15)


@njit
def _poly(c, x):
    acc = 0.0
    for i in range(len(c) - 1, -1, -1):
        acc = acc * x + c[i]
    return acc


@njit
def _ndtri(p):
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        return q * _poly(_A, r) / _poly(_B, r)
    r = p if q < 0.0 else 1.0 - p
    r = math.sqrt(-math.log(r))
    if r <= 5.0:
        r -= 1.6
        val = _poly(_C, r) / _poly(_D, r)
    else:
        r -= 5.0
        val = _poly(_E, r) / _poly(_F, r)
    return -val if q < 0.0 else val


@njit
def _ndtr(z):
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


@njit
def _gamma_series(a, x):
    # sum_{n>=0} x^n / (a (a+1) ... (a+n)), times the prefactor
    ap = a
    term = 1.0 / a
    total = term
    for _ in range(100000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


@njit
def _gamma_cf(a, x):
    # modified Lentz evaluation of the upper-tail continued fraction
    b = x + 1.0 - a
    c = 1.0 / _FPMIN
    d = 1.0 / b
    h = d
    for i in range(1, 100000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = b + an / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


@njit
def _gammainc(a, x):
    """Regularized lower incomplete gamma P(a, x)."""
    if x <= 0.0:
        return 0.0
    if x < a + 1.0:
        return _gamma_series(a, x)
    return 1.0 - _gamma_cf(a, x)


@njit
def _gammaincc(a, x):
    """Regularized upper incomplete gamma Q(a, x)."""
    if x <= 0.0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gamma_series(a, x)
    return _gamma_cf(a, x)


@njit
def _chi2_cdf(y, dof):
    return _gammainc(0.5 * dof, 0.5 * y)


@njit
def _chi2_sf(y, dof):
    return _gammaincc(0.5 * dof, 0.5 * y)


@njit
def _chi2_ppf(p, dof):
    if p <= 0.0:
        return 0.0
    a = 0.5 * dof
    upper = p > 0.5
    target = 1.0 - p if upper else p
    # Wilson-Hilferty start, small-p power law when that goes nonpositive
    z = _ndtri(p)
    h = 1.0 / (9.0 * a)
    x = a * (1.0 - h + z * math.sqrt(h)) ** 3
    if not (x > 0.0) or p < 0.05:
        x_small = math.exp((math.log(p) + math.lgamma(a + 1.0)) / a)
        if not (x > 0.0) or x_small < x:
            x = x_small
    lo = 0.0
    hi = math.inf
    log_norm = math.lgamma(a)
    for _ in range(300):
        if upper:
            resid = target - _gammaincc(a, x)   # increases with x
        else:
            resid = _gammainc(a, x) - target
        if resid == 0.0:
            break
        if resid < 0.0:
            lo = x
        else:
            hi = x
        dens = math.exp((a - 1.0) * math.log(x) - x - log_norm)
        step = resid / dens if dens > 0.0 else math.inf
        x_new = x - step
        if not (lo < x_new < hi):
            if math.isinf(hi):
                x_new = 2.0 * x if x > 0.0 else 1.0
            else:
                x_new = 0.5 * (lo + hi)
        if abs(x_new - x) <= 4.0 * _EPS * x_new:
            x = x_new
            break
        x = x_new
    return 2.0 * x


@njit
def _stirling_corr(x):
    # log Gamma(x) - [(x - 1/2) ln x - x + ln sqrt(2 pi)], valid for x >= 10
    r = 1.0 / x
    r2 = r * r
    return r * (1.0 / 12.0 - r2 * (1.0 / 360.0 - r2 * (1.0 / 1260.0 - r2 * (1.0 / 1680.0 - r2 / 1188.0))))


@njit
def _lbeta(a, b):
    if a < b:
        a, b = b, a
    if b >= 10.0:
        return (_LN_SQRT_2PI - 0.5 * math.log(b) - (a - 0.5) * math.log1p(b / a)
                - b * math.log1p(a / b)
                + _stirling_corr(a) + _stirling_corr(b) - _stirling_corr(a + b))
    if a >= 10.0:
        # log Gamma(a+b) - log Gamma(a) without cancellation
        diff = ((a - 0.5) * math.log1p(b / a) + b * math.log(a + b) - b
                + _stirling_corr(a + b) - _stirling_corr(a))
        return math.lgamma(b) - diff
    return math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)


@njit
def _beta_cf(a, b, x):
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _FPMIN:
        d = _FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, 200000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return h


@njit
def _beta_series(a, b, x):
    # power series in x, for small b*x and x away from 1
    ai = 1.0 / a
    u = (1.0 - b) * x
    v = u / (a + 1.0)
    t1 = v
    t = u
    n = 2.0
    s = 0.0
    z = _EPS * ai
    while abs(v) > z:
        u = (n - b) * x / n
        t *= u
        v = t / (a + n)
        s += v
        n += 1.0
    s += t1 + ai
    return math.exp(a * math.log(x) - _lbeta(a, b)) * s


@njit
def _betainc(x, a, b):
    """Regularized incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    if b * x <= 1.0 and x <= 0.95:
        return _beta_series(a, b, x)
    front = a * math.log(x) + b * math.log1p(-x) - _lbeta(a, b)
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(front) * _beta_cf(a, b, x) / a
    return 1.0 - math.exp(front) * _beta_cf(b, a, 1.0 - x) / b


@njit
def _betaincc(x, a, b):
    """1 - I_x(a, b), evaluated on the side that keeps precision."""
    if x <= 0.0:
        return 1.0
    if x >= 1.0:
        return 0.0
    return _betainc(1.0 - x, b, a)


@njit
def _cholesky_psd(M, tol):
    n = M.shape[0]
    L = np.zeros((n, n))
    for j in range(n):
        s = M[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if s < -tol:
            return L, -1
        if s <= tol:
            continue
        piv = math.sqrt(s)
        L[j, j] = piv
        for i in range(j + 1, n):
            t = M[i, j]
            for k in range(j):
                t -= L[i, k] * L[j, k]
            L[i, j] = t / piv
    return L, 0


@njit
def _cholesky_pivoted(M, tol):
    # returns (L, perm, rank) with M[perm][:, perm] = L[:, :rank] L[:, :rank]^T
    n = M.shape[0]
    A = M.copy()
    perm = np.arange(n)
    L = np.zeros((n, n))
    rank = 0
    for k in range(n):
        best = k
        for i in range(k + 1, n):
            if A[i, i] > A[best, best]:
                best = i
        if A[best, best] < -tol:
            return L, perm, -1
        if A[best, best] <= tol:
            for i in range(k, n):
                if A[i, i] < -tol:
                    return L, perm, -1
            break
        if best != k:
            for c in range(n):
                tmp = A[k, c]
                A[k, c] = A[best, c]
                A[best, c] = tmp
            for r in range(n):
                tmp = A[r, k]
                A[r, k] = A[r, best]
                A[r, best] = tmp
            for c in range(k):
                tmp = L[k, c]
                L[k, c] = L[best, c]
                L[best, c] = tmp
            tp = perm[k]
            perm[k] = perm[best]
            perm[best] = tp
        piv = math.sqrt(A[k, k])
        L[k, k] = piv
        for i in range(k + 1, n):
            L[i, k] = A[i, k] / piv
        for i in range(k + 1, n):
            for j in range(k + 1, i + 1):
                A[i, j] -= L[i, k] * L[j, k]
                A[j, i] = A[i, j]
        rank += 1
    return L, perm, rank


@njit
def _support(grad, sigma):
    n = grad.shape[0]
    acc = 0.0
    for i in range(n):
        row = 0.0
        for j in range(n):
            row += sigma[i, j] * grad[j]
        acc += grad[i] * row
    return math.sqrt(acc) if acc > 0.0 else 0.0


# ---------------------------------------------------------------- public API

def _check_prob_open(p):
    if not (0.0 < p < 1.0):
        raise DomainError(f"probability must lie in (0, 1), got {p!r}")


def normal_quantile(p: float) -> float:
    """Inverse of the standard normal CDF."""
    _check_prob_open(p)
    return float(_ndtri(float(p)))


def normal_cdf(z: float) -> float:
    return float(_ndtr(float(z)))


def chi2_cdf(y: float, dof: int) -> float:
    """Chi-squared CDF, P(dof/2, y/2)."""
    if y < 0.0 or not math.isfinite(y):
        raise DomainError(f"chi2_cdf needs a finite y >= 0, got {y!r}")
    if dof <= 0:
        raise DomainError(f"degrees of freedom must be positive, got {dof!r}")
    return float(_chi2_cdf(float(y), float(dof)))


def chi2_quantile(p: float, dof: int) -> float:
    """Inverse of :func:`chi2_cdf` in its first argument."""
    if not (0.0 <= p < 1.0):
        raise DomainError(f"chi2_quantile needs 0 <= p < 1, got {p!r}")
    if dof <= 0:
        raise DomainError(f"degrees of freedom must be positive, got {dof!r}")
    return float(_chi2_ppf(float(p), float(dof)))


def reg_inc_beta(z: float, a: float, b: float) -> float:
    """Regularized incomplete beta function I_z(a, b)."""
    if not (0.0 <= z <= 1.0):
        raise DomainError(f"z must lie in [0, 1], got {z!r}")
    if not (a > 0.0 and b > 0.0):
        raise DomainError(f"a and b must be positive, got a={a!r}, b={b!r}")
    return float(_betainc(float(z), float(a), float(b)))


def reg_inc_beta_complement(z: float, a: float, b: float) -> float:
    """1 - I_z(a, b) without the cancellation of the naive difference."""
    if not (0.0 <= z <= 1.0):
        raise DomainError(f"z must lie in [0, 1], got {z!r}")
    if not (a > 0.0 and b > 0.0):
        raise DomainError(f"a and b must be positive, got a={a!r}, b={b!r}")
    return float(_betaincc(float(z), float(a), float(b)))


def log_beta(a: float, b: float) -> float:
    if not (a > 0.0 and b > 0.0):
        raise DomainError(f"a and b must be positive, got a={a!r}, b={b!r}")
    return float(_lbeta(float(a), float(b)))


def _as_square(M) -> np.ndarray:
    M = np.ascontiguousarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix has non-finite entries")
    return M


def _psd_tol(M, policy):
    scale = float(np.max(np.abs(np.diag(M)))) if M.size else 0.0
    return policy.psd_tol * max(scale, 1.0)


def cholesky(M, policy: NumericPolicy = DEFAULT_POLICY) -> np.ndarray:
    """Lower factor L with L @ L.T == M for a symmetric PSD matrix.

    Zero pivots are accepted (semidefinite input). If the unpivoted sweep
    cannot reproduce ``M``, the pivoted factorization is used instead and
    its factor is returned in the original row order, which is then no
    longer triangular but still satisfies L @ L.T == M.
    """
    M = _as_square(M)
    scale = max(float(np.max(np.abs(M))) if M.size else 0.0, 1.0)
    if np.max(np.abs(M - M.T), initial=0.0) > policy.symmetry_tol * scale:
        raise NotPSDError("matrix is not symmetric")
    tol = _psd_tol(M, policy)
    L, status = _cholesky_psd(M, tol)
    if status == 0 and np.max(np.abs(L @ L.T - M), initial=0.0) <= 1e-8 * scale:
        return L
    return pivoted_cholesky(M, policy)[0]


def pivoted_cholesky(M, policy: NumericPolicy = DEFAULT_POLICY):
    """Rank-revealing Cholesky.

    Returns ``(L, rank)`` where ``L`` is n x n with L @ L.T == M and only
    ``rank`` nonzero columns. Raises :class:`NotPSDError` on a pivot below
    the tolerance.
    """
    M = _as_square(M)
    tol = _psd_tol(M, policy)
    Lp, perm, rank = _cholesky_pivoted(M, tol)
    if rank < 0:
        raise NotPSDError("matrix is not positive semidefinite")
    L = np.zeros_like(Lp)
    L[perm] = Lp
    return L, int(rank)


def is_psd(M, policy: NumericPolicy = DEFAULT_POLICY) -> bool:
    try:
        cholesky(M, policy)
    except NotPSDError:
        return False
    return True


def ellipsoid_support(grad, sigma) -> float:
    """Support function of the 1-sigma ellipsoid {d : d' inv(S) d <= 1}.

    The maximum of grad . d over that ellipsoid is sqrt(grad' S grad), which
    needs no inverse and so also covers singular S.
    """
    grad = np.ascontiguousarray(grad, dtype=np.float64)
    sigma = np.ascontiguousarray(sigma, dtype=np.float64)
    if sigma.shape != (grad.shape[0], grad.shape[0]):
        raise ValueError(f"dimension mismatch: grad {grad.shape} vs sigma {sigma.shape}")
    return float(_support(grad, sigma))
