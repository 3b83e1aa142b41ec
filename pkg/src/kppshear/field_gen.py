"""Stationary Gaussian shear fields on uniform 1-D grids.

Sampling uses circulant embedding.  On a periodic grid (the default, used by
all solvers) the first row of the circulant matrix is ``Gamma(min(j, N-j) dx)``,
so the samples are exactly Gaussian with the wrapped covariance.  With
``periodic=False`` the grid is embedded in a circle of at least ``2(N-1)``
points and the first ``N`` values are returned; their covariance is then
``Gamma(|x_i - x_j|)`` itself.

Randomness comes from Philox streams keyed by ``(seed, purpose tag, index)``,
so every white-in-time increment is reproducible on its own.
"""
from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .covariance import CovarianceSpec, Temporal, evaluate
from .errors import EmbeddingNotPSD, MismatchedGrids

CLAMP_TOLERANCE = 1e-6
# white-in-time increments are drawn in blocks of this many time indices
BLOCK = 64
MIN_DOMAIN_CORRELATIONS = 8.0


def stream(seed: int, tag: str, index: int = 0) -> np.random.Generator:
    """Independent generator for ``(seed, tag, index)``."""
    key = zlib.crc32(tag.encode("utf8"))
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(key, int(index)))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True, eq=False)
class FieldRealization:
    grid_spacing: float
    num_points: int
    values: np.ndarray
    seed: int
    spec: CovarianceSpec
    periodic: bool = True
    dt: float | None = None
    time_index: int | None = None

    def __post_init__(self):
        if self.values.shape != (self.num_points,):
            raise ValueError("values must have length num_points")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")

    @property
    def coords(self):
        return self.grid_spacing * np.arange(self.num_points)

    @property
    def length(self):
        return self.grid_spacing * self.num_points

    def scaled(self, factor):
        return FieldRealization(self.grid_spacing, self.num_points, factor * self.values,
                                self.seed, self.spec, self.periodic, self.dt, self.time_index)


def _is_power_of_two(n):
    return n > 0 and (n & (n - 1)) == 0


def _check_grid(spec, grid_spacing, num_points, periodic):
    if grid_spacing <= 0:
        raise ValueError("grid_spacing must be positive")
    if periodic:
        if not _is_power_of_two(num_points):
            raise ValueError(f"num_points must be a power of two, got {num_points}")
        if grid_spacing * num_points < MIN_DOMAIN_CORRELATIONS * spec.corr_length * (1 - 1e-12):
            raise ValueError("periodic domain must span at least 8 correlation lengths")
    elif num_points < 1:
        raise ValueError("num_points must be positive")


@lru_cache(maxsize=64)
def _embedding(spec, grid_spacing, num_points, periodic):
    if periodic:
        m = num_points
    else:
        m = 1
        while m < 2 * max(num_points - 1, 1):
            m *= 2
        m = max(m, 2)
    while True:
        j = np.arange(m)
        row = evaluate(spec, np.minimum(j, m - j) * grid_spacing)
        eig = np.fft.fft(row).real
        neg = -eig[eig < 0].sum()
        total = eig[eig > 0].sum()
        frac = neg / total
        if frac < CLAMP_TOLERANCE or periodic or m >= 64 * max(num_points, 2):
            break
        m *= 2
    if frac >= CLAMP_TOLERANCE:
        raise EmbeddingNotPSD(
            f"clamped spectral mass {frac:.2e} exceeds {CLAMP_TOLERANCE:.0e}; "
            f"domain of {m * grid_spacing:g} is too short for corr_length {spec.corr_length:g}")
    eig = np.clip(eig, 0.0, None)
    amp = np.sqrt(eig / m)
    amp.setflags(write=False)
    return amp, frac


def embedding_amplitudes(spec, grid_spacing, num_points, periodic=True):
    """Square-root eigenvalues (scaled by ``1/sqrt(M)``) and clamped mass fraction."""
    _check_grid(spec, grid_spacing, num_points, periodic)
    return _embedding(spec, float(grid_spacing), int(num_points), bool(periodic))


def implied_covariance(spec, grid_spacing, num_points, periodic=True):
    """Exact covariance matrix of the sampler's output (for verification)."""
    amp, _ = embedding_amplitudes(spec, grid_spacing, num_points, periodic)
    m = amp.size
    row = np.fft.ifft(amp ** 2 * m).real
    j = np.arange(num_points)
    return row[(j[None, :] - j[:, None]) % m]


def _draw(amp, num_points, gen, count):
    """``2*ceil(count/2)`` independent unit-variance rows trimmed to ``count``."""
    pairs = (count + 1) // 2
    z = gen.standard_normal((pairs, amp.size)) + 1j * gen.standard_normal((pairs, amp.size))
    y = np.fft.fft(amp * z, axis=-1)[:, :num_points]
    out = np.empty((2 * pairs, num_points))
    out[0::2] = y.real
    out[1::2] = y.imag
    return out[:count]


def sample_static(spec: CovarianceSpec, grid_spacing: float, num_points: int, seed: int,
                  periodic: bool = True) -> FieldRealization:
    """Frozen-in-time realization of the field on ``num_points`` grid points."""
    if spec.temporal is not Temporal.STATIC:
        raise ValueError("sample_static requires a static spec")
    amp, _ = embedding_amplitudes(spec, grid_spacing, num_points, periodic)
    values = _draw(amp, num_points, stream(seed, "static"), 1)[0]
    return FieldRealization(float(grid_spacing), int(num_points), values, int(seed), spec, periodic)


def white_increment_block(spec, grid_spacing, num_points, dt, seed, block, tag="white"):
    """Rows for time indices ``block*BLOCK ... block*BLOCK + BLOCK - 1``.

    Each row has covariance ``dt * Gamma_0(|y_i - y_j|)`` (wrapped on the torus).
    """
    if dt < 0:
        raise ValueError("dt must be non-negative")
    amp, _ = embedding_amplitudes(spec, grid_spacing, num_points, True)
    rows = _draw(amp, num_points, stream(seed, tag, block), BLOCK)
    return np.sqrt(dt) * rows


def sample_white_increment(spec: CovarianceSpec, grid_spacing: float, num_points: int,
                           dt: float, seed: int, time_index: int = 0,
                           tag: str = "white") -> FieldRealization:
    """Spatially correlated increment over one time step of length ``dt``.

    Identical to row ``time_index`` of the block stream used by the solvers.
    """
    if spec.temporal is not Temporal.WHITE:
        raise ValueError("sample_white_increment requires a white-in-time spec")
    block, row = divmod(int(time_index), BLOCK)
    values = white_increment_block(spec, grid_spacing, num_points, dt, seed, block, tag)[row]
    return FieldRealization(float(grid_spacing), int(num_points), values, int(seed), spec,
                            True, float(dt), int(time_index))


class WhiteNoiseStream:
    """Sequential access to white-in-time increments, one block in memory.

    ``seeds`` may be a single seed or a sequence; :meth:`increment` then returns
    an array of shape ``(len(seeds), num_points)``.
    """

    def __init__(self, spec, grid_spacing, num_points, dt, seeds, tag="white"):
        self.spec = spec
        self.grid_spacing = grid_spacing
        self.num_points = num_points
        self.dt = dt
        self.tag = tag
        self.scalar = np.ndim(seeds) == 0
        self.seeds = [int(s) for s in np.atleast_1d(seeds)]
        self._block = None
        self._data = None
        embedding_amplitudes(spec, grid_spacing, num_points, True)

    def increment(self, time_index):
        block, row = divmod(int(time_index), BLOCK)
        if block != self._block:
            self._data = np.stack([
                white_increment_block(self.spec, self.grid_spacing, self.num_points, self.dt,
                                      s, block, self.tag) for s in self.seeds], axis=0)
            self._block = block
        out = self._data[:, row, :]
        return out[0] if self.scalar else out


@dataclass(frozen=True)
class CovarianceEstimate:
    lags: np.ndarray        # in grid units
    distance: np.ndarray    # lags * grid_spacing
    values: np.ndarray
    std_errors: np.ndarray
    n_realizations: int


def empirical_covariance(realizations, max_lag=None, window=None) -> CovarianceEstimate:
    """Ensemble + spatial covariance estimate at each grid lag.

    The field mean is known to be zero, so the plain average of ``x_i x_{i+h}``
    is unbiased.  Standard errors come from the spread of per-realization
    spatial averages.  ``window=(start, stop)`` restricts to a sub-interval
    (pairs never cross the window boundary).
    """
    reals = list(realizations)
    if not reals:
        raise ValueError("need at least one realization")
    first = reals[0]
    for r in reals[1:]:
        if (r.num_points != first.num_points or r.grid_spacing != first.grid_spacing
                or r.spec != first.spec or r.periodic != first.periodic):
            raise MismatchedGrids("realizations differ in grid or spec")
    x = np.stack([r.values for r in reals])
    periodic = first.periodic and window is None
    if window is not None:
        x = x[:, window[0]:window[1]]
    n = x.shape[1]
    if max_lag is None:
        max_lag = n // 2 if periodic else n - 1
    lags = np.arange(max_lag + 1)
    per = np.empty((x.shape[0], lags.size))
    for h in lags:
        if periodic:
            per[:, h] = np.mean(x * np.roll(x, -h, axis=1), axis=1)
        else:
            per[:, h] = np.mean(x[:, : n - h] * x[:, h:], axis=1)
    values = per.mean(axis=0)
    if per.shape[0] > 1:
        se = per.std(axis=0, ddof=1) / np.sqrt(per.shape[0])
    else:
        se = np.full(lags.size, np.nan)
    return CovarianceEstimate(lags, lags * first.grid_spacing, values, se, per.shape[0])


def write_csv(realization: FieldRealization, path):
    with open(path, "w", newline="") as fh:
        fh.write("# schema: kppshear.field/v1\n")
        w = csv.writer(fh)
        w.writerow(["index", "y1", "value"])
        for i, (y, v) in enumerate(zip(realization.coords, realization.values)):
            w.writerow([i, repr(float(y)), repr(float(v))])
