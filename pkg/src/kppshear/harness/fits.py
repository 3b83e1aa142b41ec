"""Sweep-level fits: quadratic small-sigma enhancement and large-sigma growth."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from ..errors import InsufficientData
from ..variational import ReactionSpec

SMALL_SIGMA_MAX = 0.3
LARGE_SIGMA_RANGE = (4.0, 32.0)


@dataclass(frozen=True)
class SlopeFit:
    value: float
    std_error: float
    ci: tuple
    n_points: int


def _wls_through_origin(x, y, se):
    if np.all(se > 0):
        w = 1.0 / se ** 2
        weighted = True
    else:
        w = np.ones_like(x)
        weighted = False
    sxx = float((w * x * x).sum())
    slope = float((w * x * y).sum()) / sxx
    resid = y - slope * x
    dof = x.size - 1
    s2 = float((w * resid ** 2).sum()) / dof
    if weighted:
        s2 = max(s2, 1.0)
    return slope, math.sqrt(s2 / sxx), dof


def _wls_line(x, y, se):
    if np.all(se > 0):
        w = 1.0 / se ** 2
        weighted = True
    else:
        w = np.ones_like(x)
        weighted = False
    A = np.vstack([np.ones_like(x), x]).T
    Aw = A * np.sqrt(w)[:, None]
    coef, *_ = np.linalg.lstsq(Aw, y * np.sqrt(w), rcond=None)
    resid = y - A @ coef
    dof = x.size - 2
    s2 = float((w * resid ** 2).sum()) / dof
    if weighted:
        s2 = max(s2, 1.0)
    cov = s2 * np.linalg.inv(A.T @ (A * w[:, None]))
    return coef, cov, dof


def _ci(value, se, dof, level=0.95):
    q = stats.t.ppf(0.5 + level / 2, dof)
    return (value - q * se, value + q * se)


def fit_quadratic_enhancement(speeds, Gamma0=1.0, reaction: ReactionSpec = ReactionSpec()):
    """Slope ``alpha`` of ``c*/c0 - 1 = alpha sigma^2`` from points with
    ``sigma sqrt(Gamma0) <= 0.3``.

    Weighted least squares through the origin (``c*(0) = c0``), weights from the
    speed standard errors when all are positive.  The 95% CI uses the t law
    with the residual scale, floored at the nominal SEs.
    """
    rows = [(float(s), float(c), float(e)) for s, c, e in speeds
            if s * math.sqrt(Gamma0) <= SMALL_SIGMA_MAX * (1 + 1e-12) and s > 0]
    if len(rows) < 4:
        raise InsufficientData("need >= 4 speeds with sigma sqrt(Gamma0) <= 0.3")
    s, c, e = (np.array(v) for v in zip(*rows))
    c0 = reaction.c0
    alpha, se, dof = _wls_through_origin(s ** 2, c / c0 - 1.0, e / c0)
    return SlopeFit(alpha, se, _ci(alpha, se, dof), len(rows))


def fit_linear_growth(speeds):
    """Log-log slope of ``c*`` against ``sigma`` over ``sigma in [4, 32]``."""
    lo, hi = LARGE_SIGMA_RANGE
    rows = [(float(s), float(c), float(e)) for s, c, e in speeds
            if lo * (1 - 1e-12) <= s <= hi * (1 + 1e-12)]
    if len(rows) < 4:
        raise InsufficientData("need >= 4 speeds with sigma in [4, 32]")
    s, c, e = (np.array(v) for v in zip(*rows))
    if s.max() / s.min() < 4 * (1 - 1e-12):
        raise InsufficientData("sigma points must span a factor of 4")
    coef, cov, dof = _wls_line(np.log(s), np.log(c), e / c)
    slope, se = float(coef[1]), float(math.sqrt(cov[1, 1]))
    return SlopeFit(slope, se, _ci(slope, se, dof), len(rows))
