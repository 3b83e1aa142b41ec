"""Direct solution of ``u_t = 1/2 Lap u + sigma xi(y1, t) d_{y2} u + f'(0) u (1 - u)``.

The domain is periodic in ``y1`` and a moving window in ``y2`` follows the
front, which invades ``u = 0`` in the ``+y2`` direction.  A step is Strang split:

* half-step diffusion in ``y1``: exact semigroup of the central-difference
  Laplacian, by FFT;
* half-step diffusion in ``y2`` combined with the shear transport: each column
  is convolved with a normalized sampled Gaussian of variance ``dt/2`` centred
  on the column's displacement, with ``u = 1`` behind and ``u = 0`` ahead of the
  window.  The kernel is positive with unit mass, so the update is
  conservative and keeps ``u`` in ``[0, 1]``;
* exact logistic reaction over ``dt``;
* half-step diffusion in ``y1``, then half-step diffusion in ``y2``.

The transport term ``sigma xi d_{y2} u`` shifts a column by ``-sigma xi dt``, so
``xi > 0`` opposes the front.  For a white-in-time shear the displacement over
a step is ``sigma`` times the field increment (Stratonovich transport).

At the leading edge, where ``u ~ exp(-l y2) phi(y1)``, one step acts on ``phi``
exactly as one Anderson-model step with ``kappa = 1/2``, coupling ``sigma l`` and
the same splitting, which makes the variational comparison like for like.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numba
import numpy as np
from scipy.integrate import quad

from .covariance import CovarianceSpec, Temporal
from .errors import (CFLViolation, InsufficientSamples, InsufficientTimeSpan, NoCrossing,
                     WindowOverrun)
from .field_gen import FieldRealization, WhiteNoiseStream, sample_static
from .variational import Method, ReactionSpec, SpeedEstimate

# (dt/2)/dy2^2 below this lets the sampled Gaussian alias noticeably
KERNEL_RESOLUTION = 1.0
CLIP_TOLERANCE = 1e-12
EXCURSION_LIMIT = 1e-10
# kernel half-width in standard deviations; the dropped tail is ~1e-10 of
# the mass and the kernel is renormalized
_TAIL = 6.5


def bramson_correction(reaction: ReactionSpec):
    """Coefficient ``3/(2 l0)`` of the logarithmic lag of a pulled front."""
    return 1.5 / reaction.lambda0


@dataclass(frozen=True, eq=False)
class Field2D:
    u: np.ndarray          # (n1, n2); axis 0 is y1 (periodic), axis 1 is y2
    dy1: float
    dy2: float
    window_offset: float   # y2 coordinate of row 0
    time: float
    step: int = 0
    fill_behind: float = 1.0   # value of u beyond the trailing edge

    @property
    def y2(self):
        return self.window_offset + self.dy2 * np.arange(self.u.shape[1])

    def replace(self, **kw):
        return replace(self, **kw)


@dataclass
class ClipLog:
    """Pre-clip excursions outside ``[0, 1]`` (for the maximum principle)."""

    max_excursion: float = 0.0
    n_clipped: int = 0

    def update(self, u):
        lo, hi = float(u.min()), float(u.max())
        exc = max(-lo, hi - 1.0, 0.0)
        if exc > 0:
            self.n_clipped += int(np.count_nonzero((u < 0) | (u > 1)))
            self.max_excursion = max(self.max_excursion, exc)


@dataclass(frozen=True)
class FrontTrajectory:
    times: np.ndarray
    positions: np.ndarray
    widths: np.ndarray
    offsets: np.ndarray

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions must be finite")

    @classmethod
    def from_samples(cls, samples):
        a = np.asarray(samples, dtype=float).reshape(-1, len(samples[0]) if samples else 3)
        widths = a[:, 2] if a.shape[1] > 2 else np.zeros(len(a))
        offsets = a[:, 3] if a.shape[1] > 3 else np.zeros(len(a))
        return cls(a[:, 0], a[:, 1], widths, offsets)

    @property
    def samples(self):
        return list(zip(self.times.tolist(), self.positions.tolist(), self.widths.tolist()))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write("# schema: kppshear.front/v1\n")
            w = csv.writer(fh)
            w.writerow(["time", "position", "width", "window_offset"])
            for row in zip(self.times, self.positions, self.widths, self.offsets):
                w.writerow([repr(float(v)) for v in row])


def y1_heat_multiplier(n1, dy1, tau):
    k = 2 * np.pi * np.fft.rfftfreq(n1)
    return np.exp(-0.5 * tau * (4.0 / dy1 ** 2) * np.sin(k / 2) ** 2)[:, None]


def _settled_rows(u, fill):
    """Number of leading rows equal to ``fill`` in every column."""
    same = np.all(u == fill, axis=0)
    return int(np.argmin(same)) if not same.all() else u.shape[1]


def _heat_y1(u, mult, fill=1.0):
    if u.shape[0] == 1:
        return u
    j0 = _settled_rows(u, fill)
    out = u.copy()
    out[:, j0:] = np.fft.irfft(mult * np.fft.rfft(u[:, j0:], axis=0), u.shape[0], axis=0)
    return out


@numba.njit(cache=True)
def _convolve_columns(u, K, h, fill, j0):
    n1, n2 = u.shape
    out = u.copy()
    w = 2 * h + 1
    for c in range(n1):
        for j in range(j0, n2):
            acc = 0.0
            lo = j - h
            if lo >= 0 and lo + w <= n2:
                for i in range(w):
                    acc += K[c, i] * u[c, lo + i]
            else:
                for i in range(w):
                    jj = lo + i
                    if jj < 0:
                        acc += K[c, i] * fill
                    elif jj < n2:
                        acc += K[c, i] * u[c, jj]
            out[c, j] = acc
    return out


def transport_y2(u, shift, tau, dy2, fill_behind=1.0):
    """Column-wise ``u(y2) -> (G_tau * u)(y2 + shift)`` on the grid.

    ``shift`` has one entry per column.  Values beyond the window are
    ``fill_behind`` behind and 0 ahead.  Rows whose whole stencil equals
    ``fill_behind`` are left unchanged.
    """
    shift = np.broadcast_to(np.asarray(shift, dtype=float), (u.shape[0],))
    h = int(math.ceil((float(np.abs(shift).max()) + _TAIL * math.sqrt(tau)) / dy2))
    m = np.arange(-h, h + 1)
    K = np.exp(-(m[None, :] * dy2 - shift[:, None]) ** 2 / (2 * tau))
    K /= K.sum(axis=1, keepdims=True)
    j0 = max(_settled_rows(u, fill_behind) - h, 0)
    return _convolve_columns(np.ascontiguousarray(u, dtype=float), K, h, float(fill_behind), j0)


def logistic_flow(u, rate, dt):
    """Exact solution of ``u' = rate u (1 - u)`` over ``dt``."""
    return u / (u + (1.0 - u) * math.exp(-rate * dt))


def _displacement(shear, dt, sigma, dy1, n1):
    if shear.num_points != n1 or not math.isclose(shear.grid_spacing, dy1):
        raise ValueError("shear grid does not match the y1 grid")
    if shear.dt is not None:
        if not math.isclose(shear.dt, dt):
            raise ValueError("white increment dt does not match step dt")
        return sigma * shear.values
    return sigma * dt * shear.values


def check_cfl(shear, dt, sigma, dy2):
    """Static: ``dt sigma max|xi| / dy2 <= 1``.  White: rms displacement
    ``sigma sqrt(Gamma(0) dt) / dy2 <= 1``."""
    if shear.dt is not None:
        number = sigma * math.sqrt(shear.spec.variance * dt) / dy2
    else:
        number = dt * sigma * float(np.abs(shear.values).max()) / dy2
    if number > 1.0:
        raise CFLViolation(f"advection Courant number {number:.3g} > 1")
    return number


@dataclass(frozen=True)
class Window:
    """Moving-window geometry: keep the leading crossing ``ahead`` from the
    front edge; fail if the trailing crossing comes within ``buffer`` of row 0."""

    ahead: float = 40.0
    buffer: float = 8.0


def recenter(fld: Field2D, window: Window) -> Field2D:
    u = fld.u
    below = u < 0.5
    first = np.where(below.any(axis=1), np.argmax(below, axis=1), u.shape[1])
    target = u.shape[1] - int(round(window.ahead / fld.dy2))
    sh = int(first.max()) - target
    if sh > 0:
        u = np.concatenate([u[:, sh:], np.zeros((u.shape[0], sh))], axis=1)
        fld = replace(fld, u=u, window_offset=fld.window_offset + sh * fld.dy2)
    else:
        sh = 0
    if int(first.min()) - sh < window.buffer / fld.dy2:
        raise WindowOverrun(
            f"front spread exceeds the window at t={fld.time:g}; enlarge 'behind'")
    return fld


def step_rd(fld: Field2D, shear: FieldRealization, dt: float, sigma: float = 1.0,
            reaction: ReactionSpec = ReactionSpec(), window: Window | None = None,
            log: ClipLog | None = None, _mult=None) -> Field2D:
    """Advance ``fld`` by one Strang step (see module docstring).

    ``reaction=None`` switches the reaction off (pure transport and diffusion).
    """
    n1 = fld.u.shape[0]
    check_cfl(shear, dt, sigma, fld.dy2)
    tau = dt / 2
    mult = _mult if _mult is not None else y1_heat_multiplier(n1, fld.dy1, tau)
    shift = _displacement(shear, dt, sigma, fld.dy1, n1)
    u = _heat_y1(fld.u, mult, fld.fill_behind)
    u = transport_y2(u, shift, tau, fld.dy2, fld.fill_behind)
    if reaction is not None:
        u = logistic_flow(u, reaction.f_prime_0, dt)
    u = _heat_y1(u, mult, fld.fill_behind)
    u = transport_y2(u, 0.0, tau, fld.dy2, fld.fill_behind)
    if log is not None:
        log.update(u)
    np.clip(u, 0.0, 1.0, out=u)
    out = replace(fld, u=u, time=fld.time + dt, step=fld.step + 1)
    if window is not None:
        out = recenter(out, window)
    return out


def _crossing(y, p, level):
    idx = np.nonzero(p <= level)[0]
    if idx.size == 0 or idx[0] == 0:
        raise NoCrossing(f"profile does not cross {level:g} inside the window")
    i = int(idx[0])
    return y[i - 1] + (y[i] - y[i - 1]) * (p[i - 1] - level) / (p[i - 1] - p[i])


def track_front(fld: Field2D, level: float = 0.5):
    """Level crossing of the ``y1``-averaged profile and its 10-90 width."""
    p = fld.u.mean(axis=0)
    y = fld.y2
    pos = _crossing(y, p, level)
    width = _crossing(y, p, 0.1) - _crossing(y, p, 0.9)
    return float(pos), float(width)


def leading_position(fld: Field2D, level: float = 0.5):
    """Largest single-column crossing (finger diagnostic)."""
    y = fld.y2
    return max(_crossing(y, col, level) for col in fld.u)


def initial_step(n1, dy1, dy2, behind, ahead):
    """``y1``-uniform step at ``y2 = 0``, linear over two cells."""
    n2 = int(round((behind + ahead) / dy2))
    offset = -dy2 * int(round(behind / dy2))
    y = offset + dy2 * np.arange(n2)
    prof = np.clip(0.5 - y / (2 * dy2), 0.0, 1.0)
    return Field2D(np.repeat(prof[None, :], n1, axis=0), dy1, dy2, offset, 0.0)


@dataclass(frozen=True)
class DirectConfig:
    """One direct simulation.  ``spec.temporal`` selects frozen or white shear;
    ``constant_shear`` replaces the random field by a uniform value."""

    sigma: float
    dt: float
    dy1: float
    n1: int
    dy2: float
    horizon: float
    spec: CovarianceSpec = field(default_factory=lambda: CovarianceSpec(temporal="white"))
    reaction: ReactionSpec = ReactionSpec()
    behind: float = 20.0
    ahead: float = 40.0
    buffer: float = 8.0
    record_every: int = 1
    constant_shear: float | None = None
    tag: str = "shear"

    def validate(self):
        if not (self.dt > 0 and self.dy1 > 0 and self.dy2 > 0 and self.horizon > 0):
            raise ValueError("dt, dy1, dy2 and horizon must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if (self.dt / 2) / self.dy2 ** 2 < KERNEL_RESOLUTION:
            raise ValueError(f"(dt/2)/dy2^2 = {(self.dt / 2) / self.dy2 ** 2:.3g} is below "
                             f"{KERNEL_RESOLUTION}; refine dy2 or enlarge dt")
        if self.constant_shear is None and self.sigma > 0:
            if self.spec.temporal is Temporal.WHITE:
                number = self.sigma * math.sqrt(self.spec.variance * self.dt) / self.dy2
            else:
                zmax = math.sqrt(2 * math.log(max(self.n1, 2)))
                number = self.dt * self.sigma * math.sqrt(self.spec.variance) * zmax / self.dy2
            if number > 1:
                raise CFLViolation(f"advection Courant number {number:.3g} > 1")
        if self.behind <= self.buffer or self.ahead <= 0:
            raise ValueError("window must extend beyond the buffer")

    @property
    def n_steps(self):
        return int(round(self.horizon / self.dt))


@dataclass(frozen=True, eq=False)
class DirectRun:
    trajectory: FrontTrajectory
    leading: np.ndarray
    clip: ClipLog
    final: Field2D
    seed: int


class _Shear:
    def __init__(self, cfg: DirectConfig, seed):
        self.cfg = cfg
        self.static = None
        self.stream = None
        n1, dy1 = cfg.n1, cfg.dy1
        if cfg.constant_shear is not None:
            vals = np.full(n1, float(cfg.constant_shear))
            spec = CovarianceSpec(cfg.spec.family, cfg.spec.variance, cfg.spec.corr_length,
                                  Temporal.STATIC)
            self.static = FieldRealization(dy1, n1, vals, int(seed), spec)
        elif cfg.sigma == 0 or cfg.spec.temporal is Temporal.STATIC:
            spec = CovarianceSpec(cfg.spec.family, cfg.spec.variance, cfg.spec.corr_length,
                                  Temporal.STATIC)
            if cfg.sigma == 0:
                self.static = FieldRealization(dy1, n1, np.zeros(n1), int(seed), spec)
            else:
                self.static = sample_static(spec, dy1, n1, seed)
        else:
            self.stream = WhiteNoiseStream(cfg.spec, dy1, n1, cfg.dt, int(seed), cfg.tag)

    def at(self, k):
        if self.static is not None:
            return self.static
        return FieldRealization(self.cfg.dy1, self.cfg.n1, self.stream.increment(k),
                                self.stream.seeds[0], self.cfg.spec, True, self.cfg.dt, k)


def simulate(cfg: DirectConfig, seed: int) -> DirectRun:
    """Evolve the initial step to ``cfg.horizon`` and record the front."""
    cfg.validate()
    shear = _Shear(cfg, seed)
    if cfg.constant_shear is not None or cfg.spec.temporal is Temporal.STATIC:
        check_cfl(shear.at(0), cfg.dt, cfg.sigma, cfg.dy2)
    fld = initial_step(cfg.n1, cfg.dy1, cfg.dy2, cfg.behind, cfg.ahead)
    window = Window(cfg.ahead, cfg.buffer)
    mult = y1_heat_multiplier(cfg.n1, cfg.dy1, cfg.dt / 2)
    log = ClipLog()
    rows, lead = [], []
    for k in range(cfg.n_steps):
        fld = step_rd(fld, shear.at(k), cfg.dt, cfg.sigma, cfg.reaction, window, log, mult)
        if (k + 1) % cfg.record_every == 0:
            pos, width = track_front(fld)
            rows.append((fld.time, pos, width, fld.window_offset))
            lead.append(leading_position(fld))
    traj = FrontTrajectory.from_samples(rows)
    if log.max_excursion > EXCURSION_LIMIT:
        raise RuntimeError(f"pre-clip excursion {log.max_excursion:.2e} exceeds {EXCURSION_LIMIT}")
    return DirectRun(traj, np.array(lead), log, fld, int(seed))


def measure_speed(traj: FrontTrajectory, window, log_correction: float = 0.0) -> SpeedEstimate:
    """Least-squares slope of ``position + log_correction * log t`` on ``window``.

    Pass :func:`bramson_correction` to remove the logarithmic lag of pulled
    fronts.  The standard error is the ordinary least-squares one.
    """
    t_lo, t_hi = window
    m = (traj.times >= t_lo) & (traj.times <= t_hi)
    if np.count_nonzero(m) < 20:
        raise InsufficientSamples(f"{np.count_nonzero(m)} samples in window, need 20")
    t = traj.times[m]
    x = traj.positions[m] + (log_correction * np.log(t) if log_correction else 0.0)
    A = np.vstack([np.ones_like(t), t]).T
    coef, *_ = np.linalg.lstsq(A, x, rcond=None)
    resid = x - A @ coef
    s2 = float(resid @ resid) / (t.size - 2)
    se = math.sqrt(s2 / float(((t - t.mean()) ** 2).sum()))
    return SpeedEstimate(float(coef[1]), math.nan, se, Method.DIRECT)


@dataclass(frozen=True)
class EnsembleSpeed:
    estimate: SpeedEstimate
    per_seed: np.ndarray

    @property
    def coefficient_of_variation(self):
        return float(self.per_seed.std(ddof=1) / abs(self.per_seed.mean()))


def ensemble_speed(trajectories, window, log_correction=0.0) -> EnsembleSpeed:
    """Seed-mean of per-trajectory slopes; SE from their spread."""
    slopes = np.array([measure_speed(tr, window, log_correction).c_star for tr in trajectories])
    if slopes.size < 2:
        raise InsufficientSamples("ensemble needs at least 2 trajectories")
    se = float(slopes.std(ddof=1) / math.sqrt(slopes.size))
    return EnsembleSpeed(SpeedEstimate(float(slopes.mean()), math.nan, se, Method.DIRECT), slopes)


@dataclass(frozen=True)
class DivergenceFit:
    c0_fit: float
    amplitude_fit: float
    r2: float
    c0_se: float
    amplitude_se: float
    window_starts: np.ndarray
    speeds: np.ndarray


def _window_regressor(t):
    """Average of ``sqrt(log s)`` over ``[t, 2t]``."""
    val, _ = quad(lambda s: math.sqrt(math.log(s)), t, 2 * t)
    return val / t


def divergence_fit(traj: FrontTrajectory, sigma, Gamma0, reaction: ReactionSpec,
                   t_min: float = 1.0, log_correction: float | None = None) -> DivergenceFit:
    """Fit dyadic-window speeds to ``a + b sqrt(log t)``.

    Window ``[t, 2t]`` gives the speed ``(X(2t) - X(t))/t`` and the regressor is the
    matching window average of ``sqrt(log s)``, so positions integrated from
    ``a + b sqrt(log t)`` are fitted exactly.  ``X`` includes the pulled-front
    log correction (default :func:`bramson_correction`).  The prediction is
    ``a ~ c0``, ``b ~ sigma sqrt(2 Gamma(0))``.
    """
    if log_correction is None:
        log_correction = bramson_correction(reaction)
    t = traj.times
    if t_min < 1.0:
        raise ValueError("t_min must be >= 1")
    if t[-1] / max(t_min, t[0]) < 100 * (1 - 1e-9):
        raise InsufficientTimeSpan("need at least two decades of time after t_min")
    x = traj.positions + log_correction * np.log(t)
    starts, speeds, regs = [], [], []
    s = t_min
    while 2 * s <= t[-1] * (1 + 1e-12):
        a, b = np.interp([s, 2 * s], t, x)
        starts.append(s)
        speeds.append((b - a) / s)
        regs.append(_window_regressor(s))
        s *= 2
    if len(speeds) < 4:
        raise InsufficientTimeSpan("fewer than 4 dyadic windows")
    c = np.array(speeds)
    A = np.vstack([np.ones(len(regs)), regs]).T
    coef, *_ = np.linalg.lstsq(A, c, rcond=None)
    resid = c - A @ coef
    ss_tot = float(((c - c.mean()) ** 2).sum())
    r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else 1.0
    dof = len(c) - 2
    s2 = float(resid @ resid) / dof
    cov = s2 * np.linalg.inv(A.T @ A)
    return DivergenceFit(float(coef[0]), float(coef[1]), r2, float(math.sqrt(cov[0, 0])),
                         float(math.sqrt(cov[1, 1])), np.array(starts), c)


def mean_trajectory(trajectories) -> FrontTrajectory:
    """Ensemble-mean positions on a common time grid."""
    t = trajectories[0].times
    for tr in trajectories[1:]:
        if tr.times.shape != t.shape or not np.allclose(tr.times, t):
            raise ValueError("trajectories must share their time grid")
    pos = np.mean([tr.positions for tr in trajectories], axis=0)
    wid = np.mean([tr.widths for tr in trajectories], axis=0)
    return FrontTrajectory(t, pos, wid, np.zeros_like(t))


def write_snapshot(fld: Field2D, path):
    with open(path, "w", newline="") as fh:
        fh.write("# schema: kppshear.snapshot/v1\n")
        fh.write(f"# n1={fld.u.shape[0]} n2={fld.u.shape[1]} dy1={fld.dy1!r} dy2={fld.dy2!r} "
                 f"window_offset={fld.window_offset!r} time={fld.time!r}\n")
        w = csv.writer(fh)
        for row in fld.u:
            w.writerow([repr(float(v)) for v in row])
