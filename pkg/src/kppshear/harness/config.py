"""Experiment configuration: one TOML file per experiment, explicit grids only.

Example::

    experiment = "lyapunov_sweep"
    output_dir = "runs/lyap"

    [covariance]
    family = "gaussian"
    variance = 1.0
    corr_length = 1.0
    temporal = "white"

    [seeds]
    base = 0
    count = 8

    [numerics]
    kappa_grid = [0.05, 0.2, 1.0, 8.0]
    dt = 0.05
    grid_spacing = 1.0
    num_points = 256
    horizon = 200.0
"""
from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from ..anderson import PamConfig
from ..covariance import CovarianceSpec, Family, Temporal
from ..direct_sim import DirectConfig
from ..errors import CFLViolation, ConfigInvalid
from ..field_gen import MIN_DOMAIN_CORRELATIONS, embedding_amplitudes
from ..errors import EmbeddingNotPSD

EXPERIMENTS = ("covariance_check", "lyapunov_sweep", "gamma_star_table", "speed_sweep",
               "direct_run", "frozen_divergence", "extremes_check")

# per experiment: key -> (type, default or REQUIRED)
REQUIRED = object()
_NUMERIC_KEYS = {
    "covariance_check": {
        "grid_spacing": (float, 0.125), "num_points": (int, 256),
        "n_realizations": (int, 10_000), "max_lag": (float, 4.0), "white_dt": (float, 0.01),
        "n_draws": (int, 10_000),
    },
    "lyapunov_sweep": {
        "kappa_grid": (list, REQUIRED), "coupling": (float, 1.0), "dt": (float, REQUIRED),
        "grid_spacing": (float, REQUIRED), "num_points": (int, REQUIRED),
        "horizon": (float, REQUIRED), "burn_in_fraction": (float, 0.2),
        "record_every": (int, 10), "small_kappa_max": (float, 0.2),
        "large_kappa_min": (float, 4.0), "zero_mode_control": (bool, False),
    },
    "gamma_star_table": {
        "sigma_lambda_grid": (list, REQUIRED), "kappa": (float, 0.5),
        "dt": (float, REQUIRED), "match_dt": (bool, False), "grid_spacing": (float, REQUIRED),
        "num_points": (int, REQUIRED), "horizon": (float, REQUIRED),
        "burn_in_fraction": (float, 0.2), "zero_mode_control": (bool, True),
    },
    "speed_sweep": {
        "gamma_star_table": (str, REQUIRED), "f_prime_0": (float, 1.0),
    },
    "direct_run": {
        "dt": (float, REQUIRED), "dy1": (float, REQUIRED), "num_points": (int, REQUIRED),
        "dy2": (float, REQUIRED), "horizon": (float, REQUIRED), "behind": (float, 20.0),
        "ahead": (float, 40.0), "record_every": (int, 1), "f_prime_0": (float, 1.0),
        "speed_window": (list, REQUIRED), "bramson_correction": (bool, True),
    },
    "frozen_divergence": {
        "dt": (float, REQUIRED), "dy1": (float, REQUIRED), "num_points": (int, REQUIRED),
        "dy2": (float, REQUIRED), "horizon": (float, REQUIRED), "behind": (float, 20.0),
        "ahead": (float, 40.0), "record_every": (int, 1), "f_prime_0": (float, 1.0),
        "t_min": (float, 1.0),
    },
    "extremes_check": {
        "t_values": (list, REQUIRED), "points_per_corr": (int, 8),
    },
}


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    covariance: CovarianceSpec
    sigma_grid: tuple
    seeds: tuple
    numerics: dict = field(default_factory=dict)
    output_dir: str = "."
    workers: int = 1

    # -- serialization -------------------------------------------------
    def to_dict(self):
        return {
            "experiment": self.experiment,
            "output_dir": self.output_dir,
            "workers": self.workers,
            "sigma_grid": list(self.sigma_grid),
            "covariance": self.covariance.to_dict(),
            "seeds": {"list": list(self.seeds)},
            "numerics": dict(self.numerics),
        }

    def to_toml(self):
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d):
        return parse_config(d)

    @classmethod
    def from_toml(cls, text):
        return parse_config(tomllib.loads(text))

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return parse_config(tomllib.load(fh))

    def with_overrides(self, seed=None, workers=None, output_dir=None):
        d = self.to_dict()
        if seed is not None:
            d["seeds"] = {"base": int(seed), "count": len(self.seeds)}
        if workers is not None:
            d["workers"] = int(workers)
        if output_dir is not None:
            d["output_dir"] = str(output_dir)
        return parse_config(d)

    # -- module configs ------------------------------------------------
    def pam_config(self, kappa, coupling=None, dt=None):
        n = self.numerics
        return PamConfig(kappa=kappa, coupling=n.get("coupling", 1.0) if coupling is None else coupling,
                         dt=n["dt"] if dt is None else dt, grid_spacing=n["grid_spacing"],
                         num_points=n["num_points"], horizon=n["horizon"],
                         burn_in_fraction=n["burn_in_fraction"],
                         spec=self.covariance.with_temporal(Temporal.WHITE),
                         record_every=n.get("record_every", 1),
                         zero_mode_control=n.get("zero_mode_control", False))

    def direct_config(self, sigma):
        from ..variational import ReactionSpec
        n = self.numerics
        return DirectConfig(sigma=sigma, dt=n["dt"], dy1=n["dy1"], n1=n["num_points"],
                            dy2=n["dy2"], horizon=n["horizon"], spec=self.covariance,
                            reaction=ReactionSpec(n["f_prime_0"]), behind=n["behind"],
                            ahead=n["ahead"], record_every=n["record_every"])


def _seeds(raw):
    if raw is None:
        raise ConfigInvalid("seeds", "missing")
    if isinstance(raw, list):
        seeds = raw
    elif isinstance(raw, dict):
        if "list" in raw:
            seeds = raw["list"]
        elif "base" in raw and "count" in raw:
            base, count = raw["base"], raw["count"]
            if not (isinstance(base, int) and isinstance(count, int)) or count < 1:
                raise ConfigInvalid("seeds", "base and count must be integers, count >= 1")
            seeds = list(range(base, base + count))
        else:
            raise ConfigInvalid("seeds", "give either list = [...] or base/count")
    else:
        raise ConfigInvalid("seeds", "must be a list or a table")
    if not seeds or any(not isinstance(s, int) or isinstance(s, bool) or s < 0 or s >= 2 ** 64
                        for s in seeds):
        raise ConfigInvalid("seeds", "seeds must be non-negative 64-bit integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigInvalid("seeds", "seeds must be distinct")
    return tuple(seeds)


def _coerce(name, kind, value):
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigInvalid(f"numerics.{name}", "must be a number")
        value = float(value)
        if not math.isfinite(value):
            raise ConfigInvalid(f"numerics.{name}", "must be finite")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigInvalid(f"numerics.{name}", "must be an integer")
        return value
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigInvalid(f"numerics.{name}", "must be true or false")
        return value
    if kind is list:
        if not isinstance(value, list) or not value:
            raise ConfigInvalid(f"numerics.{name}", "must be a non-empty list")
        return [float(v) for v in value]
    if kind is str:
        if not isinstance(value, str):
            raise ConfigInvalid(f"numerics.{name}", "must be a string")
        return value
    raise AssertionError(kind)


def parse_config(d) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigInvalid("config", "must be a table")
    exp = d.get("experiment")
    if exp not in EXPERIMENTS:
        raise ConfigInvalid("experiment", f"must be one of {', '.join(EXPERIMENTS)}")
    allowed_top = {"experiment", "covariance", "sigma_grid", "seeds", "numerics", "output_dir",
                   "workers"}
    extra = set(d) - allowed_top
    if extra:
        raise ConfigInvalid(sorted(extra)[0], "unknown key")
    cov = d.get("covariance", {})
    if not isinstance(cov, dict):
        raise ConfigInvalid("covariance", "must be a table")
    unknown = set(cov) - {"family", "variance", "corr_length", "temporal"}
    if unknown:
        raise ConfigInvalid(f"covariance.{sorted(unknown)[0]}", "unknown key")
    try:
        fam = cov.get("family", "gaussian")
        if fam not in {f.value for f in Family}:
            raise ConfigInvalid("covariance.family", "must be gaussian or exponential")
        tmp = cov.get("temporal", "static")
        if tmp not in {t.value for t in Temporal}:
            raise ConfigInvalid("covariance.temporal", "must be static or white")
        for k in ("variance", "corr_length"):
            v = cov.get(k, 1.0)
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not v > 0 \
                    or not math.isfinite(v):
                raise ConfigInvalid(f"covariance.{k}", "must be a positive number")
        spec = CovarianceSpec(fam, float(cov.get("variance", 1.0)),
                              float(cov.get("corr_length", 1.0)), tmp)
    except ValueError as exc:
        raise ConfigInvalid("covariance", str(exc)) from None
    sigma = d.get("sigma_grid", [])
    if not isinstance(sigma, list) or any(isinstance(s, bool) or not isinstance(s, (int, float))
                                          for s in sigma):
        raise ConfigInvalid("sigma_grid", "must be a list of numbers")
    sigma = tuple(float(s) for s in sigma)
    if any(not (s >= 0 and math.isfinite(s)) for s in sigma):
        raise ConfigInvalid("sigma_grid", "values must be finite and non-negative")
    seeds = _seeds(d.get("seeds"))
    raw = d.get("numerics", {})
    if not isinstance(raw, dict):
        raise ConfigInvalid("numerics", "must be a table")
    keys = _NUMERIC_KEYS[exp]
    unknown = set(raw) - set(keys)
    if unknown:
        raise ConfigInvalid(f"numerics.{sorted(unknown)[0]}", f"not used by {exp}")
    numerics = {}
    for name, (kind, default) in keys.items():
        if name in raw:
            numerics[name] = _coerce(name, kind, raw[name])
        elif default is REQUIRED:
            raise ConfigInvalid(f"numerics.{name}", "required")
        else:
            numerics[name] = default
    out = d.get("output_dir", ".")
    if not isinstance(out, str):
        raise ConfigInvalid("output_dir", "must be a string")
    workers = d.get("workers", 1)
    if isinstance(workers, bool) or not isinstance(workers, int) or workers < 1:
        raise ConfigInvalid("workers", "must be a positive integer")
    cfg = ExperimentConfig(exp, spec, sigma, seeds, numerics, out, workers)
    validate(cfg)
    return cfg


def _positive(cfg, *names):
    for n in names:
        if not cfg.numerics[n] > 0:
            raise ConfigInvalid(f"numerics.{n}", "must be positive")


def _check_embedding(spec, dx, n, field_name):
    try:
        embedding_amplitudes(spec, dx, n, True)
    except (ValueError, EmbeddingNotPSD) as exc:
        raise ConfigInvalid(field_name, str(exc)) from None


def validate(cfg: ExperimentConfig):
    """Reject parameter combinations the target module would refuse."""
    n = cfg.numerics
    exp = cfg.experiment
    if exp == "covariance_check":
        _positive(cfg, "grid_spacing", "num_points", "n_realizations", "max_lag", "white_dt",
                  "n_draws")
        _check_embedding(cfg.covariance, n["grid_spacing"], n["num_points"], "numerics.num_points")
    elif exp == "lyapunov_sweep":
        if len(cfg.seeds) < 4:
            raise ConfigInvalid("seeds", "lyapunov sweeps need at least 4 seeds")
        if any(k <= 0 for k in n["kappa_grid"]):
            raise ConfigInvalid("numerics.kappa_grid", "kappa must be positive")
        _check_embedding(cfg.covariance, n["grid_spacing"], n["num_points"], "numerics.num_points")
        for k in n["kappa_grid"]:
            try:
                cfg.pam_config(k)
            except ValueError as exc:
                raise ConfigInvalid("numerics", f"kappa={k:g}: {exc}") from None
    elif exp == "gamma_star_table":
        if len(cfg.seeds) < 4:
            raise ConfigInvalid("seeds", "gamma* nodes need at least 4 seeds")
        if any(x < 0 for x in n["sigma_lambda_grid"]):
            raise ConfigInvalid("numerics.sigma_lambda_grid", "values must be non-negative")
        if n["kappa"] <= 0:
            raise ConfigInvalid("numerics.kappa", "must be positive")
        _check_embedding(cfg.covariance, n["grid_spacing"], n["num_points"], "numerics.num_points")
        try:
            PamConfig(kappa=n["kappa"], coupling=1.0, dt=n["dt"], grid_spacing=n["grid_spacing"],
                      num_points=n["num_points"], horizon=n["horizon"],
                      burn_in_fraction=n["burn_in_fraction"],
                      spec=cfg.covariance.with_temporal(Temporal.WHITE))
        except ValueError as exc:
            raise ConfigInvalid("numerics", str(exc)) from None
    elif exp == "speed_sweep":
        if not cfg.sigma_grid:
            raise ConfigInvalid("sigma_grid", "required")
        if n["f_prime_0"] <= 0:
            raise ConfigInvalid("numerics.f_prime_0", "must be positive")
    elif exp in ("direct_run", "frozen_divergence"):
        if not cfg.sigma_grid:
            raise ConfigInvalid("sigma_grid", "required")
        if exp == "direct_run" and cfg.covariance.temporal is not Temporal.WHITE:
            raise ConfigInvalid("covariance.temporal", "direct_run uses a white-in-time shear")
        if exp == "frozen_divergence" and cfg.covariance.temporal is not Temporal.STATIC:
            raise ConfigInvalid("covariance.temporal", "frozen_divergence uses a static shear")
        if n["f_prime_0"] <= 0:
            raise ConfigInvalid("numerics.f_prime_0", "must be positive")
        if n["num_points"] & (n["num_points"] - 1) or n["num_points"] < 1:
            raise ConfigInvalid("numerics.num_points", "must be a power of two")
        if exp == "direct_run":
            w = n["speed_window"]
            if len(w) != 2 or not 0 <= w[0] < w[1] <= n["horizon"]:
                raise ConfigInvalid("numerics.speed_window", "must be [t_lo, t_hi] inside the horizon")
        for s in cfg.sigma_grid:
            try:
                cfg.direct_config(s).validate()
            except CFLViolation as exc:
                raise ConfigInvalid("numerics.dt", f"sigma={s:g}: {exc}") from None
            except ValueError as exc:
                raise ConfigInvalid("numerics", f"sigma={s:g}: {exc}") from None
        if any(s > 0 for s in cfg.sigma_grid):
            _check_embedding(cfg.covariance, n["dy1"], n["num_points"], "numerics.num_points")
    elif exp == "extremes_check":
        t = n["t_values"]
        if any(b <= a for a, b in zip(t, t[1:])) or t[0] <= cfg.covariance.corr_length:
            raise ConfigInvalid("numerics.t_values",
                                "must be increasing and exceed the correlation length")
        if n["points_per_corr"] < 8:
            raise ConfigInvalid("numerics.points_per_corr", "must resolve corr_length by >= 8 points")
