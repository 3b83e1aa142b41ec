"""Parabolic Anderson model in log-amplitude form.

Solves ``u_t = kappa * Lap_h u + coupling * xi(t, x) u`` on a periodic grid, with
``Lap_h`` the central-difference Laplacian and ``xi`` white in time (Stratonovich
product).  The state is ``w = log u``.  Each step is Strang split: exact heat
semigroup for half a step, multiplicative kick ``w += coupling * dB``, heat
semigroup for half a step.  The exponential kick needs no Ito drift correction.

The heat semigroup of ``Lap_h`` has a strictly positive kernel
``K(n) = exp(-2s) I_n(2s)`` with ``s = kappa * tau / dx**2``.  When ``w`` spans a
modest range it is applied by FFT to ``exp(w - max w)``; otherwise by a
log-sum-exp convolution over the part of the kernel that can matter, which keeps
sites far below the maximum accurate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats
from scipy.special import ive, logsumexp

from .covariance import CovarianceSpec, Temporal
from .errors import DegenerateESS, FitOutOfRange, InsufficientData, NonFiniteState, PoorFit
from .field_gen import FieldRealization, WhiteNoiseStream, white_increment_block, BLOCK

# The diffusion half-step is the exact semigroup, so dt*kappa/dx**2 is unrestricted.
DIFFUSION_STABILITY_BOUND = math.inf
MIN_R2 = 0.95
# FFT round-off is ~1e-16 of the row maximum; beyond this log-range switch to the
# log-domain convolution.
_FFT_RANGE = 10.0
_KERNEL_MARGIN = 40.0


def _white(spec):
    return CovarianceSpec(spec.family, spec.variance, spec.corr_length, Temporal.WHITE)


@dataclass(frozen=True)
class PamConfig:
    """Parameters of one Anderson-model run.

    ``coupling`` multiplies the noise; for the front-speed problem it is
    ``sigma * lambda_2``.  ``record_every`` is the number of steps between
    observations of the growth observables.

    ``zero_mode_control`` subtracts the running sum of ``coupling * mean(dB)``
    from every observable.  On a finite torus that sum is a mean-zero random
    walk, so the growth rate stays unbiased while the dominant variance at
    large kappa is removed.
    """

    kappa: float
    coupling: float
    dt: float
    grid_spacing: float
    num_points: int
    horizon: float
    burn_in_fraction: float = 0.2
    spec: CovarianceSpec = field(default_factory=lambda: CovarianceSpec(temporal="white"))
    record_every: int = 1
    tag: str = "pam"
    zero_mode_control: bool = False

    def __post_init__(self):
        object.__setattr__(self, "spec", _white(self.spec))
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if not (self.dt > 0 and self.grid_spacing > 0 and self.horizon > 0):
            raise ValueError("dt, grid_spacing and horizon must be positive")
        if not 0 < self.burn_in_fraction < 1:
            raise ValueError("burn_in_fraction must lie in (0, 1)")
        if self.dt * self.kappa / self.grid_spacing ** 2 > DIFFUSION_STABILITY_BOUND:
            raise ValueError("diffusion step exceeds stability bound")
        if self.horizon * (1 - self.burn_in_fraction) < 10 * self.correlation_time:
            raise ValueError(
                f"post burn-in horizon {self.horizon * (1 - self.burn_in_fraction):g} is shorter "
                f"than 10 correlation times ({self.correlation_time:g})")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")

    @classmethod
    def lattice(cls, kappa, coupling=1.0, *, num_points=256, variance=1.0, corr_length=1.0,
                family="gaussian", **kw):
        """Pure lattice model: unit spacing, nearest-neighbour Laplacian."""
        spec = CovarianceSpec(family, variance, corr_length, Temporal.WHITE)
        return cls(kappa=kappa, coupling=coupling, grid_spacing=1.0, num_points=num_points,
                   spec=spec, **kw)

    @classmethod
    def continuum(cls, kappa, coupling=1.0, *, points_per_corr=8, num_points=512, variance=1.0,
                  corr_length=1.0, family="gaussian", **kw):
        """Central-difference discretization resolving ``corr_length`` by ``points_per_corr``."""
        spec = CovarianceSpec(family, variance, corr_length, Temporal.WHITE)
        return cls(kappa=kappa, coupling=coupling, grid_spacing=corr_length / points_per_corr,
                   num_points=num_points, spec=spec, **kw)

    @property
    def correlation_time(self):
        """Time for the noise to change ``log u`` by O(1): ``1/(coupling^2 Gamma_0(0))``."""
        rate = self.coupling ** 2 * self.spec.variance
        return 1.0 / rate if rate > 0 else 0.0

    @property
    def n_steps(self):
        return int(round(self.horizon / self.dt))

    def to_dict(self):
        d = {k: getattr(self, k) for k in
             ("kappa", "coupling", "dt", "grid_spacing", "num_points", "horizon",
              "burn_in_fraction", "record_every", "tag", "zero_mode_control")}
        d["spec"] = self.spec.to_dict()
        return d


@dataclass(frozen=True, eq=False)
class LatticeState:
    log_values: np.ndarray
    grid_spacing: float
    time: float
    kappa: float
    step: int = 0

    @classmethod
    def flat(cls, config: PamConfig, level=0.0):
        return cls(np.full(config.num_points, float(level)), config.grid_spacing, 0.0, config.kappa)


@dataclass(frozen=True)
class LyapunovEstimate:
    """Growth-rate estimate.  ``fit_r2`` is NaN when no regression is involved."""

    value: float
    std_error: float
    fit_r2: float
    horizon_used: float
    n_seeds: int

    def scaled(self, factor, horizon_factor=1.0):
        return replace(self, value=self.value * factor, std_error=self.std_error * abs(factor),
                       horizon_used=self.horizon_used * horizon_factor)


class LogHeat:
    """Exact heat semigroup ``exp(tau * kappa * Lap_h)`` acting on ``log u``."""

    def __init__(self, kappa, tau, grid_spacing, num_points):
        self.n = n = int(num_points)
        self.s = s = kappa * tau / grid_spacing ** 2
        omega = 2 * np.pi * np.fft.rfftfreq(n)
        self.mult = np.exp(-4.0 * s * np.sin(omega / 2) ** 2)
        self.log_kernel = self._periodic_log_kernel(s, n)
        self._offsets = self._signed_offsets()

    def _signed_offsets(self):
        n = self.n
        return np.arange(-((n - 1) // 2), n // 2 + 1)

    @staticmethod
    def _periodic_log_kernel(s, n):
        spread = 2 * s + 12 * math.sqrt(s + 1) + 60
        images = int(math.ceil(spread / n)) + 1
        d = np.arange(n)
        orders = np.abs(d[None, :] + n * np.arange(-images, images + 1)[:, None])
        with np.errstate(divide="ignore"):
            logs = np.log(ive(orders, 2 * s))
        return logsumexp(logs, axis=0)

    def half_width(self, log_range):
        """Smallest ``h`` such that kernel entries beyond ``h`` cannot matter."""
        thr = -(log_range + _KERNEL_MARGIN)
        offs = self._offsets
        keep = self.log_kernel[offs % self.n] >= thr
        return int(np.abs(offs[keep]).max())

    def __call__(self, w):
        w = np.asarray(w, dtype=float)
        if self.s == 0 or self.n == 1:
            return w.copy()
        top = w.max(axis=-1, keepdims=True)
        rng = float((top - w.min(axis=-1, keepdims=True)).max())
        if rng <= _FFT_RANGE:
            out = np.fft.irfft(self.mult * np.fft.rfft(np.exp(w - top), axis=-1), self.n, axis=-1)
            return top + np.log(out)
        h = self.half_width(rng)
        offs = self._offsets if 2 * h + 1 >= self.n else np.arange(-h, h + 1)
        terms = np.stack([np.roll(w, d, axis=-1) + self.log_kernel[d % self.n] for d in offs])
        return logsumexp(terms, axis=0)


def step_pam(state: LatticeState, config: PamConfig, noise: FieldRealization,
             _heat: LogHeat | None = None) -> LatticeState:
    """One Strang step: half diffusion, kick ``coupling * noise``, half diffusion."""
    if noise.num_points != config.num_points or noise.grid_spacing != config.grid_spacing:
        raise ValueError("noise grid does not match config")
    if noise.dt is not None and not math.isclose(noise.dt, config.dt):
        raise ValueError("noise dt does not match config")
    heat = _heat or LogHeat(config.kappa, config.dt / 2, config.grid_spacing, config.num_points)
    w = heat(state.log_values)
    w = w + config.coupling * noise.values
    w = heat(w)
    if not np.all(np.isfinite(w)):
        raise NonFiniteState(f"non-finite log-amplitude at t={state.time + config.dt:g}")
    return LatticeState(w, state.grid_spacing, state.time + config.dt, state.kappa, state.step + 1)


@dataclass(frozen=True, eq=False)
class PamRun:
    """Recorded observables, each of shape ``(n_records, n_seeds)``."""

    times: np.ndarray
    mean_log: np.ndarray
    log_mean: np.ndarray
    point: np.ndarray
    left_mean_log: np.ndarray
    right_mean_log: np.ndarray
    final_log_values: np.ndarray
    seeds: tuple

    def observable(self, name):
        return {"mean_log": self.mean_log, "log_mean": self.log_mean, "point": self.point,
                "left": self.left_mean_log, "right": self.right_mean_log}[name]


def evolve(config: PamConfig, seeds, initial=None) -> PamRun:
    """Evolve from ``w = initial`` (default 0, i.e. ``u = 1``) for every seed.

    Seeds are propagated together as rows of one array; each row uses its own
    noise stream, so results per seed do not depend on which other seeds run
    alongside it.
    """
    seeds = tuple(int(s) for s in np.atleast_1d(seeds))
    n = config.num_points
    heat = LogHeat(config.kappa, config.dt / 2, config.grid_spacing, n)
    noise = WhiteNoiseStream(config.spec, config.grid_spacing, n, config.dt, seeds, config.tag)
    w = np.zeros((len(seeds), n)) if initial is None else np.array(
        np.broadcast_to(initial, (len(seeds), n)), dtype=float)
    n_steps = config.n_steps
    rec = config.record_every
    n_rec = n_steps // rec + 1
    out = {k: np.empty((n_rec, len(seeds))) for k in ("mean", "lme", "pt", "left", "right")}
    half = n // 2
    control = np.zeros(len(seeds))

    def record(i):
        out["mean"][i] = w.mean(axis=1) - control
        out["lme"][i] = logsumexp(w, axis=1) - math.log(n) - control
        out["pt"][i] = w[:, 0] - control
        out["left"][i] = w[:, :max(half, 1)].mean(axis=1) - control
        out["right"][i] = w[:, half:].mean(axis=1) - control

    record(0)
    coupling = config.coupling
    for k in range(n_steps):
        w = heat(w)
        if coupling != 0.0:
            kick = coupling * noise.increment(k)
            w += kick
            if config.zero_mode_control:
                control += kick.mean(axis=1)
        w = heat(w)
        if (k + 1) % rec == 0:
            if not np.all(np.isfinite(w)):
                raise NonFiniteState(f"non-finite log-amplitude at step {k + 1}")
            record((k + 1) // rec)
    times = config.dt * rec * np.arange(n_rec)
    return PamRun(times, out["mean"], out["lme"], out["pt"], out["left"], out["right"], w, seeds)


def _slopes(times, series):
    """Per-column OLS slope and R^2 (R^2 = 1 for exactly constant data)."""
    t = times - times.mean()
    y = series - series.mean(axis=0)
    stt = np.dot(t, t)
    slope = t @ y / stt
    resid = y - np.outer(t, slope)
    ss_tot = (y ** 2).sum(axis=0)
    ss_res = (resid ** 2).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        r2 = np.where(ss_tot > 0, 1.0 - ss_res / ss_tot, 1.0)
    return slope, np.clip(r2, 0.0, 1.0)


def estimate_from_run(run: PamRun, config: PamConfig, observable="mean_log",
                      strict=True) -> LyapunovEstimate:
    keep = run.times >= config.burn_in_fraction * config.horizon - 1e-12
    slope, r2 = _slopes(run.times[keep], run.observable(observable)[keep])
    n = slope.size
    se = float(slope.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan
    est = LyapunovEstimate(float(slope.mean()), se, float(r2.min()),
                           float(run.times[keep][-1] - run.times[keep][0]), n)
    if strict and est.fit_r2 < MIN_R2:
        raise PoorFit(f"min per-seed R^2 {est.fit_r2:.3f} < {MIN_R2} (kappa={config.kappa:g}); "
                      "increase the horizon")
    return est


def lyapunov_exponent(config: PamConfig, seeds, observable="mean_log",
                      strict=True) -> LyapunovEstimate:
    """Almost-sure growth rate of ``u`` from ``u = 1``, averaged over seeds.

    The slope of the observable against time is fitted per seed after the
    burn-in; the estimate is the seed mean with the across-seed standard error.
    ``strict=False`` returns poor fits instead of raising :class:`PoorFit`.
    """
    if len(seeds) < 4:
        raise InsufficientData("lyapunov_exponent needs at least 4 seeds")
    run = evolve(config, seeds)
    return estimate_from_run(run, config, observable, strict)


def single_site_growth_rate(config: PamConfig, seeds) -> LyapunovEstimate:
    """Moment growth rate ``t^-1 log E[u]`` on a one-site lattice.

    ``w(T)`` is Gaussian there, so ``log E[u] = E[w] + Var[w]/2`` and both moments
    are estimated across seeds; the standard error follows by the delta method.
    """
    if config.num_points != 1:
        raise ValueError("single-site estimate needs num_points == 1")
    seeds = list(seeds)
    if len(seeds) < 4:
        raise InsufficientData("need at least 4 seeds")
    run = evolve(replace(config, record_every=config.n_steps), seeds)
    wt = run.final_log_values[:, 0]
    horizon = run.times[-1]
    n = wt.size
    m, v = wt.mean(), wt.var(ddof=1)
    rate = (m + 0.5 * v) / horizon
    se = math.sqrt(v / n + 0.25 * v ** 2 * 2.0 / (n - 1)) / horizon
    return LyapunovEstimate(float(rate), float(se), math.nan, float(horizon), n)


def gamma_star(sigma_lambda: float, base: PamConfig, seeds, match_dt=None,
               strict=True) -> LyapunovEstimate:
    """Growth rate of ``u_t = kappa0 u_xx + sigma_lambda * xi u`` (``kappa0 = base.kappa``).

    Solved in rescaled time ``t' = a t`` with ``a = sigma_lambda**2``: the rescaled
    problem has diffusion ``kappa0 / a`` and unit coupling; its rate is multiplied
    by ``a``.  ``base.horizon`` and ``base.dt`` are in rescaled units unless
    ``match_dt`` is given, in which case the rescaled step is ``a * match_dt`` so the
    discretization equals an unscaled run with step ``match_dt``.
    """
    if sigma_lambda < 0:
        raise ValueError("sigma_lambda must be non-negative")
    seeds = list(seeds)
    if sigma_lambda == 0:
        return LyapunovEstimate(0.0, 0.0, 1.0, 0.0, len(seeds))
    a = sigma_lambda ** 2
    dt = base.dt if match_dt is None else a * match_dt
    n_rec = max(1, int(round(base.horizon / dt)) // 2000)
    cfg = replace(base, kappa=base.kappa / a, coupling=1.0, dt=dt, record_every=n_rec)
    est = lyapunov_exponent(cfg, seeds, strict=strict)
    return est.scaled(a, horizon_factor=1.0 / a)


@dataclass(frozen=True)
class LyapunovAsymptotics:
    c1: float
    p: float
    saturation: float
    c1_se: float
    p_se: float
    p_ci: tuple
    flagged: bool


def fit_lyapunov_asymptotics(samples, small_kappa_max=0.2, large_kappa_min=4.0,
                             strict=True) -> LyapunovAsymptotics:
    """Power law ``gamma = c1 kappa^p`` on small kappa, mean level on large kappa.

    The power law is fitted by weighted least squares in log-log coordinates
    (weights from the relative standard errors); ``p_ci`` is a 95% interval.
    """
    small = [(k, e) for k, e in samples if k <= small_kappa_max]
    large = [(k, e) for k, e in samples if k >= large_kappa_min]
    if len(small) < 4 or len(large) < 2:
        raise InsufficientData("need >= 4 small-kappa and >= 2 large-kappa samples")
    ks = np.array([k for k, _ in small])
    if ks.max() / ks.min() < 10 * (1 - 1e-9):
        raise InsufficientData("small-kappa samples must span a decade")
    g = np.array([e.value for _, e in small])
    if np.any(g <= 0):
        raise FitOutOfRange("non-positive Lyapunov estimate in the power-law range")
    rel = np.array([e.std_error / e.value if e.std_error > 0 else 0.0 for _, e in small])
    x, y = np.log(ks), np.log(g)
    A = np.vstack([np.ones_like(x), x]).T
    if np.all(rel > 0):
        wts = 1.0 / rel ** 2
    else:
        wts = np.ones_like(x)
    W = np.sqrt(wts)
    coef, *_ = np.linalg.lstsq(A * W[:, None], y * W, rcond=None)
    resid = y - A @ coef
    dof = len(x) - 2
    if dof > 0:
        s2 = float((wts * resid ** 2).sum() / dof)
        if np.all(rel > 0):
            s2 = max(s2, 1.0)
    else:
        s2 = 0.0
    cov = s2 * np.linalg.inv(A.T @ (A * wts[:, None]))
    tq = stats.t.ppf(0.975, dof) if dof > 0 else math.inf
    p, logc = float(coef[1]), float(coef[0])
    p_se = float(math.sqrt(cov[1, 1]))
    c1 = math.exp(logc)
    out = LyapunovAsymptotics(
        c1=c1, p=p, saturation=float(np.mean([e.value for _, e in large])),
        c1_se=c1 * float(math.sqrt(cov[0, 0])), p_se=p_se,
        p_ci=(p - tq * p_se, p + tq * p_se), flagged=not 0 < p < 1)
    if out.flagged and strict:
        raise FitOutOfRange(f"power-law exponent p={p:.3f} outside (0, 1)")
    return out


@dataclass(frozen=True)
class HEstimate:
    value: float
    std_error: float
    ess: float
    n_paths: int


def _noise_rows(spec, grid_spacing, num_points, dt, seed, n_steps, tag):
    blocks = [white_increment_block(spec, grid_spacing, num_points, dt, seed, b, tag)
              for b in range(n_steps // BLOCK + 1)]
    return np.concatenate(blocks)[:n_steps]


def default_mc_grid(spec, t, points_per_corr=8):
    """Periodic grid wide enough that few Brownian paths wrap around."""
    dx = spec.corr_length / points_per_corr
    need = 2 * (8 * math.sqrt(t) + 8 * spec.corr_length)
    n = 1
    while n * dx < need:
        n *= 2
    return dx, n


def estimate_H_mc(lambda1: float, lambda2: float, sigma: float, t: float, n_paths: int,
                  spec: CovarianceSpec, seed: int, f_prime_0=1.0, dt=0.01, grid_spacing=None,
                  num_points=None) -> HEstimate:
    """Monte Carlo estimate of ``H(lambda)`` at finite time ``t``.

    Simulates ``Y_1 = W_1`` exactly and the exponent
    ``lambda1 W_1(t) + lambda2 sigma int_0^t xi(W_1(s), t - s) ds`` for one quenched
    noise realization (the same stream a PAM run with ``tag="pam"`` and this seed
    sees).  The ``lambda2 W_2`` factor is ``exp(lambda2^2 t / 2)`` exactly.
    """
    if n_paths < 10_000:
        raise ValueError("n_paths must be at least 1e4")
    spec = _white(spec)
    if grid_spacing is None or num_points is None:
        grid_spacing, num_points = default_mc_grid(spec, t)
    n_steps = int(round(t / dt))
    length = grid_spacing * num_points
    rows = _noise_rows(spec, grid_spacing, num_points, dt, seed, n_steps, "pam")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 7919])))
    pos = np.zeros(n_paths)
    expo = np.zeros(n_paths)
    coupling = lambda2 * sigma
    sq = math.sqrt(dt)
    for n in range(n_steps):
        if coupling != 0.0:
            row = rows[n_steps - 1 - n]
            g = (pos % length) / grid_spacing
            i0 = np.floor(g).astype(np.int64)
            frac = g - i0
            i0 %= num_points
            i1 = (i0 + 1) % num_points
            expo += coupling * ((1 - frac) * row[i0] + frac * row[i1])
        pos += sq * rng.standard_normal(n_paths)
    expo += lambda1 * pos
    top = expo.max()
    wts = np.exp(expo - top)
    mean_w = wts.mean()
    log_mean = top + math.log(mean_w)
    ess = float(wts.sum() ** 2 / (wts ** 2).sum())
    if ess < 100:
        raise DegenerateESS(f"effective sample size {ess:.1f} < 100; shorten t")
    se = float(wts.std(ddof=1) / (math.sqrt(n_paths) * mean_w) / t)
    value = f_prime_0 + 0.5 * lambda2 ** 2 + log_mean / t
    return HEstimate(float(value), se, ess, n_paths)


def estimate_H_ensemble(lambda1: float, lambda2: float, sigma: float, t: float, n_paths: int,
                        spec: CovarianceSpec, seeds, **kw) -> HEstimate:
    """Disorder average of :func:`estimate_H_mc` over independent noise seeds.

    A single-seed estimate carries only the path-sampling error; at finite
    ``t`` the quenched value also fluctuates with the noise realization.  The
    standard error here is the across-seed spread, which covers both.
    """
    seeds = list(seeds)
    if len(seeds) < 4:
        raise InsufficientData("need at least 4 disorder seeds")
    ests = [estimate_H_mc(lambda1, lambda2, sigma, t, n_paths, spec, s, **kw) for s in seeds]
    v = np.array([e.value for e in ests])
    return HEstimate(float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size)),
                     min(e.ess for e in ests), n_paths * len(seeds))


def write_series_csv(run: PamRun, path, observable="mean_log"):
    import csv
    data = run.observable(observable)
    with open(path, "w", newline="") as fh:
        fh.write("# schema: kppshear.pam_series/v1\n")
        w = csv.writer(fh)
        w.writerow(["seed", "t", observable])
        for j, s in enumerate(run.seeds):
            for t, v in zip(run.times, data[:, j]):
                w.writerow([s, repr(float(t)), repr(float(v))])
