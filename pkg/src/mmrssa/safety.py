"""Tilt safety specification, the parameterized safety index and gamma.

All functions accept a single state (4,) or a batch (N, 4).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TILT_LIMIT = 0.1


@dataclass(frozen=True)
class SafetyIndexParams:
    alpha: float
    k_v: float
    beta: float

    def __post_init__(self):
        if not (self.alpha > 0 and self.k_v > 0 and self.beta >= 0):
            raise ValueError(f"invalid safety-index parameters {self}")

    def as_dict(self):
        return {"alpha": self.alpha, "k_v": self.k_v, "beta": self.beta}


# hand-designed and reported learned parameterizations
HAND_PARAMS = SafetyIndexParams(alpha=1.0, k_v=1.0, beta=0.001)
REFERENCE_LEARNED_PARAMS = SafetyIndexParams(alpha=0.15, k_v=4.17, beta=0.55)


@dataclass(frozen=True)
class GammaSpec:
    """Linear extended class-K margin gamma(v) = slope * v."""

    slope: float = 1.0

    def __post_init__(self):
        if not self.slope > 0:
            raise ValueError("gamma slope must be positive")


def gamma_eval(v, spec: GammaSpec = GammaSpec()):
    return spec.slope * v


def _split(x):
    x = np.asarray(x, dtype=float)
    return x, x[..., 1], x[..., 3]


def phi0(x):
    """User safety specification |tilt| - 0.1."""
    _, ang, _ = _split(x)
    return np.abs(ang) - TILT_LIMIT


def _designed_branch(ang, rate, params):
    return (-(TILT_LIMIT ** params.alpha) + np.abs(ang) ** params.alpha
            + params.k_v * np.sign(ang) * rate + params.beta)


def phi(x, params: SafetyIndexParams | None):
    """max(phi0, -0.1^alpha + |tilt|^alpha + k_v sign(tilt) tilt_rate + beta)."""
    if params is None:
        return phi0(x)
    _, ang, rate = _split(x)
    return np.maximum(phi0(x), _designed_branch(ang, rate, params))


def grad_phi(x, params: SafetyIndexParams | None):
    """Gradient of the active branch; ties pick the designed branch."""
    x, ang, rate = _split(x)
    g = np.zeros(x.shape)
    sgn = np.sign(ang)
    if params is None:
        g[..., 1] = sgn
        return g
    second = _designed_branch(ang, rate, params) >= phi0(x)
    mag = np.abs(ang)
    with np.errstate(divide="ignore", invalid="ignore"):
        dpow = np.where(mag > 0, params.alpha * mag ** (params.alpha - 1.0), 0.0) * sgn
    g[..., 1] = np.where(second, dpow, sgn)
    g[..., 3] = np.where(second, params.k_v * sgn, 0.0)
    return g


class TiltIndex:
    """Safety index over Segway states; ``params=None`` gives phi0 itself."""

    def __init__(self, params: SafetyIndexParams | None = None):
        self.params = params

    def value(self, x):
        return phi(x, self.params)

    def grad(self, x):
        return grad_phi(x, self.params)

    def __repr__(self):
        return f"TiltIndex({self.params!r})"
