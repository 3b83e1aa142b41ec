"""Stationary covariance kernels and their spectral densities.

Two families are provided, both positive definite and decaying:

* ``gaussian``:    Gamma(r) = v * exp(-r**2 / (2 l**2))
* ``exponential``: Gamma(r) = v * exp(-|r| / l)

The spectral density uses the convention ``S(k) = (1/2pi) int Gamma(r) e^{-ikr} dr``
so that ``int S(k) dk = Gamma(0)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np


class Family(str, Enum):
    GAUSSIAN = "gaussian"
    EXPONENTIAL = "exponential"


class Temporal(str, Enum):
    STATIC = "static"
    WHITE = "white"


@dataclass(frozen=True)
class CovarianceSpec:
    """Parametric stationary covariance.

    ``temporal="white"`` means Gamma(t, r) = delta(t) Gamma_0(r), with ``variance``
    and ``corr_length`` describing the spatial factor Gamma_0.
    """

    family: Family = Family.GAUSSIAN
    variance: float = 1.0
    corr_length: float = 1.0
    temporal: Temporal = Temporal.STATIC

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        object.__setattr__(self, "temporal", Temporal(self.temporal))
        if not (self.variance > 0 and math.isfinite(self.variance)):
            raise ValueError(f"variance must be positive, got {self.variance}")
        if not (self.corr_length > 0 and math.isfinite(self.corr_length)):
            raise ValueError(f"corr_length must be positive, got {self.corr_length}")

    def with_temporal(self, temporal):
        return CovarianceSpec(self.family, self.variance, self.corr_length, temporal)

    def to_dict(self):
        d = asdict(self)
        d["family"] = self.family.value
        d["temporal"] = self.temporal.value
        return d


def evaluate(spec: CovarianceSpec, r):
    """Covariance at distance ``r`` (scalar or array); even in ``r``."""
    r = np.abs(np.asarray(r, dtype=float))
    if spec.family is Family.GAUSSIAN:
        out = spec.variance * np.exp(-0.5 * (r / spec.corr_length) ** 2)
    else:
        out = spec.variance * np.exp(-r / spec.corr_length)
    return out if out.ndim else float(out)


def spectral_density(spec: CovarianceSpec, k):
    """One-dimensional Fourier transform of :func:`evaluate`."""
    k = np.asarray(k, dtype=float)
    v, ell = spec.variance, spec.corr_length
    if spec.family is Family.GAUSSIAN:
        out = v * ell / math.sqrt(2 * math.pi) * np.exp(-0.5 * (k * ell) ** 2)
    else:
        out = v * ell / (math.pi * (1.0 + (k * ell) ** 2))
    return out if out.ndim else float(out)


def covariance_matrix(spec: CovarianceSpec, x):
    x = np.asarray(x, dtype=float)
    return evaluate(spec, x[:, None] - x[None, :])


def integral_scale(spec: CovarianceSpec) -> float:
    """``int Gamma(r) dr`` over the real line (equals 2*pi*S(0))."""
    if spec.family is Family.GAUSSIAN:
        return spec.variance * spec.corr_length * math.sqrt(2 * math.pi)
    return 2.0 * spec.variance * spec.corr_length
