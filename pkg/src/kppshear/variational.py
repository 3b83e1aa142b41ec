"""Front speed from the variational formula ``c* = inf_{l>0} H0(l) / l``.

``H0(l) = f'(0) + l^2/2 + gamma*(sigma l)`` where ``gamma*`` is tabulated from
Anderson-model runs.  Also holds the small-sigma reference curve and the
large-sigma upper and lower bounds built from a fitted Lyapunov envelope.
"""
from __future__ import annotations

import copy
import csv
import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.optimize import brentq, minimize_scalar

from .errors import InconsistentBounds, InsufficientData, NoInteriorMinimum, OutOfTableRange

GRID_POINTS = 241
GOLDEN_RTOL = 1e-8
MONOTONE_SLACK = 2.0


@dataclass(frozen=True)
class ReactionSpec:
    f_prime_0: float = 1.0

    def __post_init__(self):
        if not self.f_prime_0 > 0:
            raise ValueError("f_prime_0 must be positive")

    @property
    def c0(self):
        return math.sqrt(2.0 * self.f_prime_0)

    @property
    def lambda0(self):
        """Decay rate of the unperturbed pulled front, equal to ``c0``."""
        return math.sqrt(2.0 * self.f_prime_0)


class Method(str, enum.Enum):
    VARIATIONAL = "variational"
    DIRECT = "direct"
    SMALL_SIGMA_CURVE = "small_sigma_curve"
    BOUNDS = "bounds"


@dataclass(frozen=True)
class SpeedEstimate:
    c_star: float
    lambda2_star: float
    uncertainty: float
    method: Method

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if self.uncertainty < 0:
            raise ValueError("uncertainty must be non-negative")


class GammaStarTable:
    """Tabulated ``gamma*(x)`` with standard errors on ``0 = x_0 < x_1 < ...``.

    Interpolation is monotone cubic (PCHIP) in log-log coordinates over the
    positive nodes, which reproduces power laws exactly, and ``gamma*(x) =
    gamma*(x_1) (x/x_1)^2`` on ``(0, x_1)`` (the small-argument law).  Tables
    with non-positive values fall back to PCHIP in linear coordinates.
    """

    def __init__(self, nodes):
        nodes = sorted((float(x), float(g), float(s)) for x, g, s in nodes)
        x = np.array([n[0] for n in nodes])
        g = np.array([n[1] for n in nodes])
        se = np.array([n[2] for n in nodes])
        if x.size < 3:
            raise InsufficientData("table needs at least 3 nodes")
        if x[0] != 0.0 or g[0] != 0.0:
            raise ValueError("table must start with the node (0, 0)")
        if np.any(np.diff(x) <= 0):
            raise ValueError("sigma_lambda nodes must be strictly increasing")
        if np.any(se < 0):
            raise ValueError("standard errors must be non-negative")
        drop = np.diff(g)
        slack = MONOTONE_SLACK * (se[1:] + se[:-1])
        if np.any(drop < -slack - 1e-15):
            raise ValueError("gamma* values must be non-decreasing within 2 SE")
        self.x, self.g, self.se = x, g, se
        self._offset = 0.0
        self._loglog = bool(np.all(g[1:] > 0))
        if self._loglog:
            self._interp = PchipInterpolator(np.log(x[1:]), np.log(g[1:]))
        else:
            self._interp = PchipInterpolator(x, g)

    @classmethod
    def from_function(cls, fn, x_nodes, se=0.0):
        xs = np.unique(np.concatenate([[0.0], np.asarray(x_nodes, float)]))
        return cls([(x, 0.0 if x == 0 else fn(x), 0.0 if x == 0 else se) for x in xs])

    @classmethod
    def zero(cls, x_max=1e4, n=9):
        return cls.from_function(lambda x: 0.0, np.geomspace(x_max / 10 ** (n - 2), x_max, n - 1))

    @classmethod
    def quadratic(cls, gamma0=1.0, x_max=1e4, n=41):
        return cls.from_function(lambda x: 0.5 * gamma0 * x ** 2,
                                 np.geomspace(x_max * 1e-8, x_max, n - 1))

    @property
    def nodes(self):
        g = np.where(self.x > 0, self.g + self._offset, 0.0)
        return list(zip(self.x.tolist(), g.tolist(), self.se.tolist()))

    @property
    def x_max(self):
        return float(self.x[-1])

    def __call__(self, xq):
        xq = np.asarray(xq, dtype=float)
        if np.any(xq < 0) or np.any(xq > self.x_max * (1 + 1e-12)):
            raise OutOfTableRange(f"argument outside table range [0, {self.x_max:g}]")
        xq = np.minimum(xq, self.x_max)
        if not self._loglog:
            out = np.asarray(self._interp(xq), dtype=float)
        else:
            x1, g1 = self.x[1], self.g[1]
            out = np.empty_like(xq)
            low = xq < x1
            out[low] = g1 * (xq[low] / x1) ** 2
            hi = ~low
            out[hi] = np.exp(self._interp(np.log(xq[hi])))
        if self._offset:
            out = out + np.where(xq > 0, self._offset, 0.0)
        return out if out.ndim else float(out)

    def std_error(self, xq):
        return np.interp(xq, self.x, self.se)

    def shifted(self, eps):
        """The function ``gamma*(x) + eps`` for ``x > 0`` (sensitivity checks)."""
        out = copy.copy(self)
        out._offset = self._offset + eps
        return out

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write("# schema: kppshear.gamma_star/v1\n")
            w = csv.writer(fh)
            w.writerow(["sigma_lambda", "gamma_star", "std_error"])
            for x, g, s in self.nodes:
                w.writerow([repr(x), repr(g), repr(s)])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = [r for r in csv.DictReader(line for line in fh if not line.startswith("#"))]
        return cls([(float(r["sigma_lambda"]), float(r["gamma_star"]), float(r["std_error"]))
                    for r in rows])


def H0(lambda2, table: GammaStarTable, reaction: ReactionSpec, sigma):
    """``f'(0) + lambda2^2/2 + gamma*(sigma * lambda2)``."""
    lam = np.asarray(lambda2, dtype=float)
    if np.any(lam <= 0):
        raise ValueError("lambda2 must be positive")
    base = reaction.f_prime_0 + 0.5 * lam ** 2
    if sigma == 0:
        return base if base.ndim else float(base)
    return base + table(sigma * lam)


def _objective(table, reaction, sigma):
    return lambda lam: H0(lam, table, reaction, sigma) / lam


def minimize_speed(table: GammaStarTable, reaction: ReactionSpec, sigma) -> SpeedEstimate:
    """Minimize ``H0(l)/l`` over ``l > 0``.

    A geometric grid on ``[1e-3, 1e3] * c0`` (cut at the table edge
    ``x_max / sigma``) brackets the minimum, then golden-section search refines
    it.  The uncertainty is ``SE(gamma*)(sigma l*) / l*``, the first-order effect
    of the table error at the optimum.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    c0 = reaction.c0
    lo, hi = 1e-3 * c0, 1e3 * c0
    if sigma > 0:
        hi = min(hi, table.x_max / sigma)
    if hi <= lo:
        raise NoInteriorMinimum("table range too narrow for this sigma")
    grid = np.geomspace(lo, hi, GRID_POINTS)
    obj = _objective(table, reaction, sigma)
    vals = obj(grid)
    i = int(np.argmin(vals))
    if i == 0 or i == grid.size - 1:
        raise NoInteriorMinimum(f"objective minimum at bracket edge lambda2={grid[i]:g}")
    slope_sign = np.sign(np.diff(vals))
    slope_sign = slope_sign[slope_sign != 0]
    if np.count_nonzero(np.diff(slope_sign)) != 1:
        raise NoInteriorMinimum("objective is not unimodal on the bracketing grid")
    res = minimize_scalar(obj, bracket=(grid[i - 1], grid[i], grid[i + 1]), method="golden",
                          tol=GOLDEN_RTOL)
    lam = float(res.x)
    c = float(obj(lam))
    unc = float(table.std_error(sigma * lam) / lam) if sigma > 0 else 0.0
    return SpeedEstimate(c, lam, unc, Method.VARIATIONAL)


def small_sigma_curve(sigma, Gamma0, reaction: ReactionSpec):
    """``c0 (1 + Gamma(0) sigma^2 / 2)``."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    return reaction.c0 * (1.0 + 0.5 * Gamma0 * sigma ** 2)


@dataclass(frozen=True)
class BoundConstants:
    """Envelope of ``gamma(kappa)`` used for the large-sigma bounds.

    ``c1_low kappa^p <= gamma(kappa)`` for ``kappa < kappa0``,
    ``gamma(kappa) >= gamma0`` for ``kappa >= kappa0``, and
    ``gamma(kappa) <= min(c1_up kappa^p, saturation_cap)`` everywhere.
    """

    c1: float
    p: float
    gamma0: float
    kappa0: float
    c1_low: float = None
    c1_up: float = None
    saturation_cap: float = None
    kappa_diffusion: float = 0.5

    def __post_init__(self):
        if self.c1_low is None:
            object.__setattr__(self, "c1_low", self.c1)
        if self.c1_up is None:
            object.__setattr__(self, "c1_up", self.c1)


def extract_bound_constants(samples, fit, saturation_cap, tolerance=0.10) -> BoundConstants:
    """``kappa0`` is the smallest sampled kappa whose relative residual from the
    power law exceeds ``tolerance``; ``gamma0`` is the smallest measured gamma at
    or above it.  ``c1_low``/``c1_up`` are the extreme ratios ``gamma/kappa^p``
    below ``kappa0`` and over all samples, so the envelope covers the data.
    """
    pts = sorted((float(k), float(e.value)) for k, e in samples)
    ks = np.array([k for k, _ in pts])
    gs = np.array([g for _, g in pts])
    pred = fit.c1 * ks ** fit.p
    bad = np.nonzero(np.abs(gs - pred) > tolerance * np.abs(gs))[0]
    bad = bad[ks[bad] > ks.min()] if bad.size > 1 else bad
    i0 = int(bad[0]) if bad.size else ks.size - 1
    kappa0 = float(ks[i0])
    gamma0 = float(gs[i0:].min())
    ratio = gs / ks ** fit.p
    c1_low = float(ratio[:max(i0, 1)].min())
    c1_up = float(ratio.max())
    return BoundConstants(fit.c1, fit.p, gamma0, kappa0, c1_low, c1_up, float(saturation_cap))


def speed_bounds_large_sigma(sigma, constants: BoundConstants, reaction: ReactionSpec):
    """Lower and upper bounds on ``c*`` from the Lyapunov envelope.

    With ``x = sigma l`` and ``kappa = kappa_diffusion / x^2`` one has
    ``gamma*(x) = x^2 gamma(kappa)``.  Lower bound: ``H0/l >= min(F, G)`` with
    ``F(l) = f'/l + l/2 + gamma0 sigma^2 l`` (valid where ``kappa >= kappa0``) and
    ``G(l) = f'/l + l/2 + c1_low kappa_d^p sigma^(2-2p) l^(1-2p)`` (elsewhere),
    so ``c* >= min(min F, min G)``.  Upper bound: the infimum of ``H0/l`` with
    ``gamma`` replaced by its majorant.
    """
    if sigma < 1:
        raise ValueError("large-sigma bounds need sigma >= 1")
    fp = reaction.f_prime_0
    k = constants
    p = k.p
    if not 0 < p < 1:
        raise ValueError("envelope exponent p must lie in (0, 1)")
    a = k.kappa_diffusion ** p * k.c1_low * sigma ** (2 - 2 * p)
    # F is minimized in closed form
    f_min = math.sqrt(2 * fp * (1 + 2 * max(k.gamma0, 0.0) * sigma ** 2))

    def G(lam):
        return fp / lam + lam / 2 + a * lam ** (1 - 2 * p)

    def dG(lam):
        return -fp / lam ** 2 + 0.5 + a * (1 - 2 * p) * lam ** (-2 * p)

    if p < 0.5:
        lam_g = brentq(dG, 1e-12, math.sqrt(2 * fp) * 2)
        g_min = G(lam_g)
    else:
        res = minimize_scalar(G, bounds=(1e-12, 1e6), method="bounded")
        g_min = float(res.fun)
    lower = min(f_min, g_min)

    cap = k.saturation_cap if k.saturation_cap is not None else math.inf

    def majorant(lam):
        x2 = (sigma * lam) ** 2
        kap = k.kappa_diffusion / x2
        gam = min(k.c1_up * kap ** p, cap)
        return fp / lam + lam / 2 + x2 * gam / lam

    grid = np.geomspace(1e-6, 1e3, 2001)
    vals = np.array([majorant(l) for l in grid])
    i = int(np.clip(np.argmin(vals), 1, grid.size - 2))
    res = minimize_scalar(majorant, bounds=(grid[i - 1], grid[i + 1]), method="bounded",
                          options={"xatol": 1e-12})
    upper = float(min(res.fun, vals.min()))
    if lower > upper * (1 + 1e-12):
        raise InconsistentBounds(f"lower bound {lower:g} exceeds upper bound {upper:g}")
    return float(lower), upper


def f_branch_minimizer(sigma, gamma0, reaction: ReactionSpec):
    """Absolute minimizer ``sqrt(2 f'/(1 + 2 gamma0 sigma^2))`` of F."""
    return math.sqrt(2 * reaction.f_prime_0 / (1 + 2 * gamma0 * sigma ** 2))


def write_speeds_csv(rows, path):
    """``rows``: iterable of (sigma, SpeedEstimate)."""
    with open(path, "w", newline="") as fh:
        fh.write("# schema: kppshear.speed/v1\n")
        w = csv.writer(fh)
        w.writerow(["sigma", "c_star", "lambda2_star", "uncertainty", "method"])
        for s, e in rows:
            w.writerow([repr(float(s)), repr(e.c_star), repr(e.lambda2_star), repr(e.uncertainty),
                        e.method.value])
