"""Multi-modal Gaussian control-affine dynamics and the Segway instantiation.

A model maps a state to a list of Gaussian modes for the drift ``f`` and
the actuation matrix ``g``. The solvers never look at full covariances,
only at their projection onto the safety-index gradient, so every model
also knows how to produce that projection for a batch of states.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .mathkit import NotPSDError, cholesky, is_psd

WEIGHT_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class ModeParams:
    """One Gaussian mode of the dynamics at a fixed state.

    ``sigma_g`` is the covariance of vec(g) with columns stacked, shape
    (n*m, n*m). Block (j, k) is the cross-covariance of columns j and k.
    """

    weight: float
    mu_f: np.ndarray
    sigma_f: np.ndarray
    mu_g: np.ndarray
    sigma_g: np.ndarray

    @property
    def n(self) -> int:
        return self.mu_f.shape[0]

    @property
    def m(self) -> int:
        return self.mu_g.shape[1]

    def g_quad(self, grad) -> np.ndarray:
        """m x m matrix grad' Sigma_g grad, entry (j, k) = grad' S_jk grad."""
        grad = np.asarray(grad, dtype=float)
        blocks = np.kron(np.eye(self.m), grad[None, :])
        return blocks @ self.sigma_g @ blocks.T


def make_mode(weight, mu_f, sigma_f=None, mu_g=None, sigma_g=None) -> ModeParams:
    mu_f = np.asarray(mu_f, dtype=float)
    n = mu_f.shape[0]
    mu_g = np.zeros((n, 1)) if mu_g is None else np.asarray(mu_g, dtype=float).reshape(n, -1)
    m = mu_g.shape[1]
    sigma_f = np.zeros((n, n)) if sigma_f is None else np.asarray(sigma_f, dtype=float)
    sigma_g = np.zeros((n * m, n * m)) if sigma_g is None else np.asarray(sigma_g, dtype=float)
    if sigma_f.shape != (n, n):
        raise ValueError(f"sigma_f must be {n}x{n}, got {sigma_f.shape}")
    if sigma_g.shape != (n * m, n * m):
        raise ValueError(f"sigma_g must be {n * m}x{n * m}, got {sigma_g.shape}")
    if not 0.0 <= weight <= 1.0:
        raise ValueError(f"mode weight must lie in [0, 1], got {weight}")
    return ModeParams(float(weight), mu_f, sigma_f, mu_g, sigma_g)


@dataclass
class Projection:
    """Mode moments projected onto the safety-index gradient for N states.

    drift[s, i] = grad . mu_f,  rho[s, i] = sqrt(grad' Sigma_f grad),
    a[s, i] = grad . mu_g (length m), q[s, i] = grad' Sigma_g grad (m x m).
    """

    weights: np.ndarray
    drift: np.ndarray
    rho: np.ndarray
    a: np.ndarray
    q: np.ndarray

    def __len__(self):
        return self.drift.shape[0]

    def row(self, s: int) -> "Projection":
        return Projection(self.weights, self.drift[s:s + 1], self.rho[s:s + 1],
                          self.a[s:s + 1], self.q[s:s + 1])


def project_modes(modes: Sequence[ModeParams], grad) -> Projection:
    grad = np.asarray(grad, dtype=float)
    K, m = len(modes), modes[0].m
    drift = np.empty((1, K))
    rho = np.empty((1, K))
    a = np.empty((1, K, m))
    q = np.empty((1, K, m, m))
    for i, md in enumerate(modes):
        drift[0, i] = grad @ md.mu_f
        rho[0, i] = math.sqrt(max(float(grad @ md.sigma_f @ grad), 0.0))
        a[0, i] = grad @ md.mu_g
        q[0, i] = md.g_quad(grad)
    return Projection(np.array([md.weight for md in modes]), drift, rho, a, q)


def pick_mode(weights, u: float) -> int:
    """Mode index for a uniform draw u by inverting the weight CDF."""
    cdf = np.cumsum(weights)
    return int(min(np.searchsorted(cdf, u * cdf[-1], side="right"), len(weights) - 1))


def _psd_factor(S):
    return cholesky(S) if np.any(S) else np.zeros_like(S)


class MultiModalModel:
    """Base class: x' = f(x, theta) + g(x, theta) u with Gaussian modes."""

    n: int
    m: int

    def __init__(self, n: int, m: int, lower, upper):
        self.n = n
        self.m = m
        self.lower = np.broadcast_to(np.asarray(lower, dtype=float), (m,)).copy()
        self.upper = np.broadcast_to(np.asarray(upper, dtype=float), (m,)).copy()
        if np.any(self.lower > self.upper):
            raise ValueError("control lower bound exceeds upper bound")

    @property
    def control_bounds(self):
        return self.lower, self.upper

    @property
    def weights(self) -> np.ndarray:
        raise NotImplementedError

    def modes(self, x) -> list[ModeParams]:
        raise NotImplementedError

    def project(self, X, G) -> Projection:
        """Projected moments for states X (N, n) and gradients G (N, n)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        G = np.atleast_2d(np.asarray(G, dtype=float))
        parts = [project_modes(self.modes(x), g) for x, g in zip(X, G)]
        return Projection(parts[0].weights,
                          np.concatenate([p.drift for p in parts]),
                          np.concatenate([p.rho for p in parts]),
                          np.concatenate([p.a for p in parts]),
                          np.concatenate([p.q for p in parts]))

    def sample(self, x, rng: np.random.Generator, size: int | None = None):
        """Draw (f, g, mode index) from the mode Gaussians at state x."""
        modes = self.modes(x)
        w = np.array([md.weight for md in modes])
        count = 1 if size is None else int(size)
        idx = rng.choice(len(modes), size=count, p=w / w.sum())
        f = np.empty((count, self.n))
        g = np.empty((count, self.n, self.m))
        for i, md in enumerate(modes):
            sel = np.flatnonzero(idx == i)
            if sel.size == 0:
                continue
            zf = rng.standard_normal((sel.size, self.n))
            zg = rng.standard_normal((sel.size, self.n * self.m))
            f[sel] = md.mu_f + zf @ _psd_factor(md.sigma_f).T
            vec_g = md.mu_g.reshape(-1, order="F") + zg @ _psd_factor(md.sigma_g).T
            g[sel] = vec_g.reshape(sel.size, self.m, self.n).transpose(0, 2, 1)
        if size is None:
            return f[0], g[0], int(idx[0])
        return f, g, idx

    # A rollout draws all of its randomness up front as a noise plan: one
    # uniform per step for the mode and a block of standard normals.
    noise_dim: int | None = None

    def noise_plan(self, rng: np.random.Generator, steps: int):
        r = self.noise_dim if self.noise_dim is not None else self.n + self.n * self.m
        return rng.random(steps), rng.standard_normal((steps, r))

    def truth_from(self, x, u: float, z) -> Callable:
        """Realization for one noise-plan entry; (f, g) held at state x."""
        modes = self.modes(x)
        md = modes[pick_mode(np.array([m.weight for m in modes]), u)]
        f = md.mu_f + _psd_factor(md.sigma_f) @ z[:self.n]
        vec_g = md.mu_g.reshape(-1, order="F") + _psd_factor(md.sigma_g) @ z[self.n:]
        g = vec_g.reshape(self.m, self.n).T
        return lambda _x: (f, g)

    def truth(self, x, rng: np.random.Generator) -> Callable:
        """One realization of the uncertainty, as a function of the state."""
        u, z = self.noise_plan(rng, 1)
        return self.truth_from(x, float(u[0]), z[0])

    def unimodal(self) -> "MultiModalModel":
        return UnimodalModel(self)


class StaticModel(MultiModalModel):
    """State-independent modes, used for generic configs and tests."""

    def __init__(self, modes: Sequence[ModeParams], lower, upper):
        modes = list(modes)
        if not modes:
            raise ValueError("model needs at least one mode")
        _check_weights([md.weight for md in modes])
        n, m = modes[0].n, modes[0].m
        for md in modes:
            if md.n != n or md.m != m:
                raise ValueError("all modes must share state and control dimensions")
            if not is_psd(md.sigma_f) or not is_psd(md.sigma_g):
                raise NotPSDError("mode covariance is not positive semidefinite")
        super().__init__(n, m, lower, upper)
        self._modes = modes

    @property
    def weights(self):
        return np.array([md.weight for md in self._modes])

    def modes(self, x):
        return self._modes


class UnimodalModel(MultiModalModel):
    """Moment-matched single Gaussian of another model."""

    def __init__(self, base: MultiModalModel):
        super().__init__(base.n, base.m, base.lower, base.upper)
        self.base = base

    @property
    def weights(self):
        return np.ones(1)

    def modes(self, x):
        return [baseline_unimodal(self.base.modes(x))]


def _check_weights(weights):
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0) or np.any(w > 1):
        raise ValueError("mode weights must lie in [0, 1]")
    if abs(w.sum() - 1.0) > WEIGHT_TOL:
        raise ValueError(f"mode weights must sum to 1, got {w.sum():.12g}")


def mixture_moments(modes: Sequence[ModeParams]):
    """First two moments of the mixture for f and for vec(g)."""
    w = np.array([md.weight for md in modes])
    mf = np.array([md.mu_f for md in modes])
    mg = np.array([md.mu_g.reshape(-1, order="F") for md in modes])
    mean_f = w @ mf
    mean_g = w @ mg
    df = mf - mean_f
    dg = mg - mean_g
    cov_f = sum(wi * md.sigma_f for wi, md in zip(w, modes)) + (w[:, None] * df).T @ df
    cov_g = sum(wi * md.sigma_g for wi, md in zip(w, modes)) + (w[:, None] * dg).T @ dg
    return mean_f, cov_f, mean_g, cov_g


def baseline_unimodal(modes: Sequence[ModeParams]) -> ModeParams:
    """Single Gaussian with the mixture's mean and covariance, weight 1."""
    if not modes:
        raise ValueError("need at least one mode")
    if len(modes) == 1:
        md = modes[0]
        return ModeParams(1.0, md.mu_f, md.sigma_f, md.mu_g, md.sigma_g)
    mean_f, cov_f, mean_g, cov_g = mixture_moments(modes)
    n, m = modes[0].n, modes[0].m
    cov_f = 0.5 * (cov_f + cov_f.T)
    cov_g = 0.5 * (cov_g + cov_g.T)
    return ModeParams(1.0, mean_f, cov_f, mean_g.reshape(n, m, order="F"), cov_g)


def sample_dynamics(model: MultiModalModel, x, rng: np.random.Generator, size: int | None = None):
    return model.sample(x, rng, size)


# ------------------------------------------------------------------ Segway

@dataclass(frozen=True)
class SegwayParams:
    """Physical constants. Only the product mL enters the dynamics."""

    m: float = 44.8
    m0: float = 52.7
    J0: float = 5.2
    mL: float = 9.3
    R: float = 0.195
    K_m: float = 2.524
    K_b: float = 0.189
    grav: float = 9.81

    def __post_init__(self):
        for name in ("m", "m0", "J0", "mL", "R", "K_m", "grav"):
            if not getattr(self, name) > 0:
                raise ValueError(f"SegwayParams.{name} must be positive")
        if self.K_b < 0:
            raise ValueError("SegwayParams.K_b must be nonnegative")

    @property
    def L(self) -> float:
        return self.mL / self.m


@dataclass(frozen=True)
class SegwayState:
    p: float = 0.0
    varphi: float = 0.0
    p_dot: float = 0.0
    varphi_dot: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.p, self.varphi, self.p_dot, self.varphi_dot])


DET_MIN = 1e-12


def segway_terms(X, params: SegwayParams):
    """Split the Segway vector fields by their dependence on K_m.

    Returns (f0, f1, g1), each (N, 4), with f = f0 + K_m f1 and g = K_m g1.
    Both B and b_t are linear in K_m, which gives this exact split.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    phi, pd, phid = X[:, 1], X[:, 2], X[:, 3]
    c, s = np.cos(phi), np.sin(phi)
    P = params
    det = P.m0 * P.J0 - (P.mL * c) ** 2
    if np.any(np.abs(det) < DET_MIN):
        raise np.linalg.LinAlgError("Segway inertia matrix is singular")
    i11, i12, i22 = P.J0 / det, -P.mL * c / det, P.m0 / det
    h0a = -P.mL * s * phid ** 2
    h0b = -P.mL * P.grav * s
    v = pd - P.R * phid
    h1a = (P.K_b / P.R ** 2) * v
    h1b = -(P.K_b / P.R) * v
    zeros = np.zeros_like(phi)
    f0 = np.stack([pd, phid, -(i11 * h0a + i12 * h0b), -(i12 * h0a + i22 * h0b)], axis=1)
    f1 = np.stack([zeros, zeros, -(i11 * h1a + i12 * h1b), -(i12 * h1a + i22 * h1b)], axis=1)
    g1 = np.stack([zeros, zeros, i11 / P.R - i12, i12 / P.R - i22], axis=1)
    return f0, f1, g1


def segway_nominal(x, params: SegwayParams = SegwayParams(), K_m: float | None = None):
    """Deterministic Segway fields at one state: (f (4,), g (4, 1))."""
    x = np.asarray(x.as_array() if isinstance(x, SegwayState) else x, dtype=float)
    if abs(x[1]) >= math.pi / 2:
        raise ValueError("tilt angle outside the model's validity range |varphi| < pi/2")
    k = params.K_m if K_m is None else K_m
    f0, f1, g1 = segway_terms(x, params)
    return f0[0] + k * f1[0], (k * g1[0])[:, None]


def segway_nominal_batch(X, params: SegwayParams, K_m: float | None = None):
    k = params.K_m if K_m is None else K_m
    f0, f1, g1 = segway_terms(X, params)
    return f0 + k * f1, k * g1


DEFAULT_BOUNDS = (-20.0, 20.0)


class SegwayAdditiveModel(MultiModalModel):
    """Nominal Segway plus a Gaussian-mixture disturbance d on the drift."""

    kind = "segway_additive"

    def __init__(self, params: SegwayParams, modes, lower=DEFAULT_BOUNDS[0], upper=DEFAULT_BOUNDS[1]):
        super().__init__(4, 1, lower, upper)
        self.params = params
        w, mus, sigmas = [], [], []
        for weight, mu_d, sigma_d in modes:
            mu_d = np.asarray(mu_d, dtype=float).reshape(4)
            sigma_d = np.asarray(sigma_d, dtype=float).reshape(4, 4)
            if not is_psd(sigma_d):
                raise NotPSDError("disturbance covariance is not positive semidefinite")
            w.append(float(weight))
            mus.append(mu_d)
            sigmas.append(sigma_d)
        _check_weights(w)
        self._w = np.array(w)
        self.mu_d = np.array(mus)
        self.sigma_d = np.array(sigmas)
        self._chol = [_psd_factor(S) for S in sigmas]

    @property
    def weights(self):
        return self._w

    def modes(self, x):
        f, g = segway_nominal_batch(np.asarray(x, dtype=float), self.params)
        zero_g = np.zeros((4, 4))
        return [ModeParams(w, f[0] + mu, S, g[0][:, None], zero_g)
                for w, mu, S in zip(self._w, self.mu_d, self.sigma_d)]

    def project(self, X, G):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        G = np.atleast_2d(np.asarray(G, dtype=float))
        f, g = segway_nominal_batch(X, self.params)
        base = np.einsum("sj,sj->s", G, f)
        drift = base[:, None] + G @ self.mu_d.T
        var = np.einsum("sj,ijk,sk->si", G, self.sigma_d, G)
        rho = np.sqrt(np.maximum(var, 0.0))
        a = np.repeat(np.einsum("sj,sj->s", G, g)[:, None], len(self._w), axis=1)[:, :, None]
        q = np.zeros(a.shape + (1,))
        return Projection(self._w, drift, rho, a, q)

    noise_dim = 4

    def truth_from(self, x, u, z):
        i = pick_mode(self._w, u)
        d = self.mu_d[i] + self._chol[i] @ z
        params = self.params

        def fields(xs):
            f, g = segway_nominal_batch(xs, params)
            return f[0] + d, g[0][:, None]

        return fields

    def unimodal(self):
        mean = self._w @ self.mu_d
        dev = self.mu_d - mean
        cov = np.einsum("i,ijk->jk", self._w, self.sigma_d) + (self._w[:, None] * dev).T @ dev
        return SegwayAdditiveModel(self.params, [(1.0, mean, 0.5 * (cov + cov.T))],
                                   self.lower, self.upper)


class SegwayMultiplicativeModel(MultiModalModel):
    """Segway whose motor constant K_m follows a Gaussian mixture.

    f and g are affine in K_m, so each mode's moments are exact. The
    shared K_m makes f and g correlated within a mode; that correlation
    is dropped and the two are treated as independent.
    """

    kind = "segway_multiplicative"

    def __init__(self, params: SegwayParams, km_modes, lower=DEFAULT_BOUNDS[0], upper=DEFAULT_BOUNDS[1]):
        super().__init__(4, 1, lower, upper)
        self.params = params
        w, mu, sd = [], [], []
        for weight, mu_k, sigma_k in km_modes:
            if sigma_k < 0:
                raise ValueError("sigma_k must be nonnegative")
            w.append(float(weight))
            mu.append(float(mu_k))
            sd.append(float(sigma_k))
        _check_weights(w)
        self._w = np.array(w)
        self.mu_k = np.array(mu)
        self.sigma_k = np.array(sd)

    @property
    def weights(self):
        return self._w

    def modes(self, x):
        f0, f1, g1 = segway_terms(np.asarray(x, dtype=float), self.params)
        f0, f1, g1 = f0[0], f1[0], g1[0]
        out = []
        for w, mk, sk in zip(self._w, self.mu_k, self.sigma_k):
            out.append(ModeParams(w, f0 + mk * f1, sk ** 2 * np.outer(f1, f1),
                                  (mk * g1)[:, None], sk ** 2 * np.outer(g1, g1)))
        return out

    def project(self, X, G):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        G = np.atleast_2d(np.asarray(G, dtype=float))
        f0, f1, g1 = segway_terms(X, self.params)
        gf0 = np.einsum("sj,sj->s", G, f0)[:, None]
        gf1 = np.einsum("sj,sj->s", G, f1)[:, None]
        gg1 = np.einsum("sj,sj->s", G, g1)[:, None]
        drift = gf0 + gf1 * self.mu_k
        rho = np.abs(gf1) * self.sigma_k
        a = (gg1 * self.mu_k)[:, :, None]
        q = ((gg1 * self.sigma_k) ** 2)[:, :, None, None]
        return Projection(self._w, drift, rho, a, q)

    def sample_km(self, rng, size=None):
        idx = rng.choice(len(self._w), size=size, p=self._w)
        return self.mu_k[idx] + self.sigma_k[idx] * rng.standard_normal(size), idx

    noise_dim = 1

    def truth_from(self, x, u, z):
        i = pick_mode(self._w, u)
        k = float(self.mu_k[i] + self.sigma_k[i] * z[0])
        params = self.params

        def fields(xs):
            f, g = segway_nominal_batch(xs, params, K_m=k)
            return f[0], g[0][:, None]

        return fields

    def unimodal(self):
        mean = self._w @ self.mu_k
        var = self._w @ (self.sigma_k ** 2 + (self.mu_k - mean) ** 2)
        return SegwayMultiplicativeModel(self.params, [(1.0, mean, math.sqrt(var))],
                                         self.lower, self.upper)


# Reference mode configurations from the Segway experiments.
SEGWAY_ADDITIVE_MODES = (
    (0.8, (0.1, -0.1, 0.1, -0.1),
     ((0.18, 0, 0, 0), (0, 0.18, 0, 0.1), (0, 0, 0.18, 0), (0, 0.1, 0, 0.18))),
    (0.2, (0.1, -0.1, 0.2, -7.0),
     ((0.1, 0, 0, 0), (0, 0.1, 0, -0.05), (0, 0, 0.1, 0), (0, -0.05, 0, 0.1))),
)
SEGWAY_KM_MODES = ((0.8, 2.4, 0.05), (0.2, 4.2, 0.2))


def segway_additive_model(params: SegwayParams = SegwayParams(), modes=SEGWAY_ADDITIVE_MODES,
                          lower=DEFAULT_BOUNDS[0], upper=DEFAULT_BOUNDS[1]) -> SegwayAdditiveModel:
    return SegwayAdditiveModel(params, modes, lower, upper)


def segway_multiplicative_model(params: SegwayParams = SegwayParams(), km_modes=SEGWAY_KM_MODES,
                                lower=DEFAULT_BOUNDS[0], upper=DEFAULT_BOUNDS[1]) -> SegwayMultiplicativeModel:
    return SegwayMultiplicativeModel(params, km_modes, lower, upper)
