"""Experiment pipelines behind the CLI.

Every pipeline splits its work into independent ``(parameter, seed)`` tasks,
runs them serially or in a process pool, sorts the results and writes CSVs.
Statistical-quality problems become manifest warnings, never aborts.
"""
from __future__ import annotations

import csv
import datetime as _dt
import math
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from scipy import stats

from .. import __version__
from ..anderson import (PamConfig, estimate_from_run, evolve, fit_lyapunov_asymptotics,
                        gamma_star, write_series_csv)
from ..covariance import Temporal, evaluate
from ..direct_sim import (bramson_correction, divergence_fit, mean_trajectory, measure_speed,
                          simulate)
from ..errors import ConfigInvalid, KppShearError
from ..extremes import running_max, write_csv as write_maxima_csv
from ..field_gen import BLOCK, empirical_covariance, sample_static, white_increment_block
from ..variational import (GammaStarTable, ReactionSpec, minimize_speed, small_sigma_curve)
from .config import ExperimentConfig
from .fits import fit_linear_growth, fit_quadratic_enhancement
from .manifest import RunManifest, digest_outputs

OUTPUT_ENV = "KPPSHEAR_OUT"
SCHEMA_PREFIX = "kppshear"


def derive_seed(master, index):
    """64-bit seed for the ``index``-th realization under ``master``."""
    state = np.random.SeedSequence(int(master), spawn_key=(int(index),)).generate_state(2, np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def write_table(path, name, header, rows):
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {SCHEMA_PREFIX}.{name}/v1\n")
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def read_table(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _map(fn, tasks, workers):
    tasks = list(tasks)
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as ex:
            return list(ex.map(fn, tasks))
    return [fn(t) for t in tasks]


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _tag(x):
    return f"{x:g}".replace(".", "p").replace("-", "m")


# --------------------------------------------------------------------- tasks
def _lyapunov_task(args):
    cfg_dict, kappa, seeds = args
    pam = PamConfig(**cfg_dict, kappa=kappa)
    run = evolve(pam, seeds)
    return kappa, run, estimate_from_run(run, pam, strict=False)


def _gamma_star_task(args):
    base_dict, x, seeds, match_dt = args
    base = PamConfig(**base_dict)
    return x, gamma_star(x, base, seeds, match_dt=match_dt, strict=False)


def _direct_task(args):
    dcfg, seed = args
    return dcfg.sigma, seed, simulate(dcfg, seed)


def _maxima_task(args):
    spec, t_values, seed, ppc = args
    return running_max(spec, t_values, seed, ppc)


# ------------------------------------------------------------------ pipelines
def _covariance_check(cfg, out, warnings):
    n = cfg.numerics
    spec = cfg.covariance.with_temporal(Temporal.STATIC)
    master = cfg.seeds[0]
    reals = [sample_static(spec, n["grid_spacing"], n["num_points"], derive_seed(master, i))
             for i in range(n["n_realizations"])]
    est = empirical_covariance(reals)
    lag_max = int(math.floor(n["max_lag"] * spec.corr_length / n["grid_spacing"] + 1e-9))
    rows, zs = [], []
    for lag, dist, val, se in zip(est.lags, est.distance, est.values, est.std_errors):
        if lag > lag_max:
            break
        target = evaluate(spec, dist)
        z = (val - target) / se if se > 0 else 0.0
        zs.append(abs(z))
        rows.append((int(lag), dist, val, target, se, z, abs(z) <= 4.0))
    write_table(out / "covariance.csv", "covariance_check",
                ["lag", "distance", "empirical", "target", "std_error", "z", "pass"], rows)
    # scaling in law of white increments and Gaussianity of point marginals
    wspec = cfg.covariance.with_temporal(Temporal.WHITE)
    dt0, a, m = n["white_dt"], 4.0, n["n_draws"]
    base = _white_points(wspec, n["grid_spacing"], n["num_points"], dt0, master, m, "check")
    scaled = _white_points(wspec, n["grid_spacing"], n["num_points"], a * dt0, master, m,
                           "check-scaled") / math.sqrt(a)
    ks = stats.ks_2samp(base, scaled)
    normal = stats.normaltest(np.array([r.values[0] for r in reals]))
    checks = [
        ("covariance_max_abs_z", max(zs), max(zs) <= 4.0),
        ("white_scaling_ks_pvalue", float(ks.pvalue), ks.pvalue > 0.01),
        ("marginal_normality_pvalue", float(normal.pvalue), normal.pvalue > 0.01),
        ("white_point_variance", float(base.var()), abs(base.var() - dt0 * wspec.variance)
         <= 4 * dt0 * wspec.variance * math.sqrt(2.0 / m)),
    ]
    write_table(out / "covariance_summary.csv", "covariance_summary",
                ["check", "value", "pass"], checks)
    for name, value, ok in checks:
        if not ok:
            warnings.append(f"{name} failed ({value:.4g})")
    return (["covariance.csv", "covariance_summary.csv"], {c[0]: bool(c[2]) for c in checks},
            {"realizations": [master, n["n_realizations"]]})


def _white_points(spec, dx, n, dt, seed, count, tag):
    """Value at site 0 of ``count`` consecutive white-noise increments."""
    blocks = -(-count // BLOCK)
    rows = [white_increment_block(spec, dx, n, dt, seed, b, tag)[:, 0] for b in range(blocks)]
    return np.concatenate(rows)[:count]


def _pam_dict(cfg, **over):
    n = cfg.numerics
    d = dict(coupling=n.get("coupling", 1.0), dt=n["dt"], grid_spacing=n["grid_spacing"],
             num_points=n["num_points"], horizon=n["horizon"],
             burn_in_fraction=n["burn_in_fraction"],
             spec=cfg.covariance.with_temporal(Temporal.WHITE),
             record_every=n.get("record_every", 1))
    d.update(over)
    return d


def _lyapunov_sweep(cfg, out, warnings):
    n = cfg.numerics
    base = _pam_dict(cfg, zero_mode_control=n["zero_mode_control"])
    tasks = [(base, k, list(cfg.seeds)) for k in sorted(n["kappa_grid"])]
    results = sorted(_map(_lyapunov_task, tasks, cfg.workers), key=lambda r: r[0])
    names, rows, samples = [], [], []
    for kappa, run, est in results:
        status = "ok" if est.fit_r2 >= 0.95 else "poor_fit"
        if status != "ok":
            warnings.append(f"kappa={kappa:g}: min R^2 {est.fit_r2:.3f} < 0.95")
        rows.append((kappa, base["coupling"], est.value, est.std_error, est.fit_r2,
                     est.n_seeds, est.horizon_used, status))
        samples.append((kappa, est))
        name = f"series_kappa_{_tag(kappa)}.csv"
        write_series_csv(run, out / name)
        names.append(name)
    write_table(out / "lyapunov.csv", "lyapunov",
                ["kappa", "coupling", "gamma", "std_error", "fit_r2", "n_seeds", "horizon_used",
                 "status"], rows)
    names.append("lyapunov.csv")
    summary = {}
    try:
        fit = fit_lyapunov_asymptotics(samples, n["small_kappa_max"], n["large_kappa_min"],
                                       strict=False)
        write_table(out / "asymptotics.csv", "lyapunov_asymptotics",
                    ["c1", "p", "saturation", "c1_se", "p_se", "p_ci_lo", "p_ci_hi", "flagged"],
                    [(fit.c1, fit.p, fit.saturation, fit.c1_se, fit.p_se, fit.p_ci[0],
                      fit.p_ci[1], fit.flagged)])
        names.append("asymptotics.csv")
        summary = {"p": fit.p, "c1": fit.c1, "saturation": fit.saturation}
        if fit.flagged:
            warnings.append(f"power-law exponent p={fit.p:.3f} outside (0, 1)")
    except KppShearError as exc:
        warnings.append(f"asymptotic fit skipped: {exc}")
    return names, summary, {"kappa_tasks": list(cfg.seeds)}


def _gamma_star_table(cfg, out, warnings):
    n = cfg.numerics
    base = _pam_dict(cfg, kappa=n["kappa"], coupling=1.0, record_every=1,
                     zero_mode_control=n["zero_mode_control"])
    match = n["dt"] if n["match_dt"] else None
    xs = sorted(set(n["sigma_lambda_grid"]) - {0.0})
    tasks = [(base, x, list(cfg.seeds), match) for x in xs]
    results = sorted(_map(_gamma_star_task, tasks, cfg.workers), key=lambda r: r[0])
    rows = [(0.0, 0.0, 0.0, 1.0, math.inf, 0.0)]
    for x, est in results:
        if est.fit_r2 < 0.95:
            warnings.append(f"sigma_lambda={x:g}: min R^2 {est.fit_r2:.3f} < 0.95")
        rows.append((x, est.value, est.std_error, est.fit_r2, n["kappa"] / x ** 2,
                     est.horizon_used))
    write_table(out / "gamma_star.csv", "gamma_star",
                ["sigma_lambda", "gamma_star", "std_error", "fit_r2", "kappa_eff", "horizon_used"],
                rows)
    try:
        GammaStarTable([(r[0], r[1], r[2]) for r in rows])
    except (ValueError, KppShearError) as exc:
        warnings.append(f"table not usable for minimization: {exc}")
    return ["gamma_star.csv"], {"nodes": len(rows)}, {"nodes": list(cfg.seeds)}


def _speed_sweep(cfg, out, warnings):
    n = cfg.numerics
    path = Path(n["gamma_star_table"])
    if not path.exists():
        raise ConfigInvalid("numerics.gamma_star_table", f"file not found: {path}")
    table = GammaStarTable.from_csv(path)
    reaction = ReactionSpec(n["f_prime_0"])
    rows, speeds = [], []
    for s in sorted(cfg.sigma_grid):
        est = minimize_speed(table, reaction, s)
        rows.append((s, est.c_star, small_sigma_curve(s, cfg.covariance.variance, reaction),
                     est.lambda2_star, est.uncertainty))
        speeds.append((s, est.c_star, est.uncertainty))
    write_table(out / "speeds.csv", "speed_sweep",
                ["sigma", "c_star_variational", "c_star_small_sigma_curve", "lambda2_star",
                 "uncertainty"], rows)
    names = ["speeds.csv"]
    summary = {}
    fit_rows = []
    for label, fn in (("alpha_hat", lambda: fit_quadratic_enhancement(
            speeds, cfg.covariance.variance, reaction)),
                      ("loglog_slope", lambda: fit_linear_growth(speeds))):
        try:
            f = fn()
            fit_rows.append((label, f.value, f.std_error, f.ci[0], f.ci[1], f.n_points))
            summary[label] = f.value
        except KppShearError:
            pass
    if fit_rows:
        write_table(out / "speed_fits.csv", "speed_fits",
                    ["quantity", "value", "std_error", "ci_lo", "ci_hi", "n_points"], fit_rows)
        names.append("speed_fits.csv")
    return names, summary, {}


def _direct_tasks(cfg):
    return [(cfg.direct_config(s), seed) for s in sorted(cfg.sigma_grid) for seed in cfg.seeds]


def _direct_run(cfg, out, warnings):
    n = cfg.numerics
    reaction = ReactionSpec(n["f_prime_0"])
    corr = bramson_correction(reaction) if n["bramson_correction"] else 0.0
    results = sorted(_map(_direct_task, _direct_tasks(cfg), cfg.workers),
                     key=lambda r: (r[0], r[1]))
    names, seed_rows, by_sigma = [], [], {}
    for sigma, seed, run in results:
        name = f"front_sigma_{_tag(sigma)}_seed_{seed}.csv"
        run.trajectory.to_csv(out / name)
        names.append(name)
        est = measure_speed(run.trajectory, tuple(n["speed_window"]), corr)
        seed_rows.append((sigma, seed, est.c_star, est.uncertainty, run.clip.max_excursion))
        by_sigma.setdefault(sigma, []).append(est.c_star)
    write_table(out / "direct_speeds.csv", "direct_speeds",
                ["sigma", "seed", "c_star", "std_error", "max_clip_excursion"], seed_rows)
    rows = []
    for sigma, v in sorted(by_sigma.items()):
        v = np.array(v)
        se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else math.nan
        cv = float(v.std(ddof=1) / abs(v.mean())) if v.size > 1 else math.nan
        if v.size > 1 and cv >= 0.05:
            warnings.append(f"sigma={sigma:g}: per-seed speed CV {cv:.3f} >= 5%")
        rows.append((sigma, float(v.mean()), se, cv, v.size))
    write_table(out / "direct_summary.csv", "direct_summary",
                ["sigma", "c_star", "std_error", "cv", "n_seeds"], rows)
    names += ["direct_speeds.csv", "direct_summary.csv"]
    return names, {f"c_star[{r[0]:g}]": r[1] for r in rows}, {}


def _frozen_divergence(cfg, out, warnings):
    n = cfg.numerics
    reaction = ReactionSpec(n["f_prime_0"])
    results = sorted(_map(_direct_task, _direct_tasks(cfg), cfg.workers),
                     key=lambda r: (r[0], r[1]))
    names, trajs = [], {}
    for sigma, seed, run in results:
        name = f"front_sigma_{_tag(sigma)}_seed_{seed}.csv"
        run.trajectory.to_csv(out / name)
        names.append(name)
        trajs.setdefault(sigma, []).append(run.trajectory)
    rows, summary = [], {}
    for sigma, tr in sorted(trajs.items()):
        fit = divergence_fit(mean_trajectory(tr), sigma, cfg.covariance.variance, reaction,
                             t_min=n["t_min"])
        predicted = sigma * math.sqrt(2 * cfg.covariance.variance)
        rows.append((sigma, fit.c0_fit, fit.c0_se, fit.amplitude_fit, fit.amplitude_se, fit.r2,
                     predicted, len(tr)))
        if fit.r2 < 0.9 and sigma > 0:
            warnings.append(f"sigma={sigma:g}: divergence fit R^2 {fit.r2:.3f} < 0.9")
        summary[f"amplitude[{sigma:g}]"] = fit.amplitude_fit
    write_table(out / "divergence.csv", "divergence",
                ["sigma", "c0_fit", "c0_se", "amplitude_fit", "amplitude_se", "r2",
                 "predicted_amplitude", "n_seeds"], rows)
    names.append("divergence.csv")
    return names, summary, {}


def _extremes_check(cfg, out, warnings):
    n = cfg.numerics
    spec = cfg.covariance.with_temporal(Temporal.STATIC)
    tasks = [(spec, n["t_values"], s, n["points_per_corr"]) for s in cfg.seeds]
    recs = sorted(_map(_maxima_task, tasks, cfg.workers), key=lambda r: r.seed)
    write_maxima_csv(recs, out / "maxima.csv")
    ratios = np.array([r.normalized() for r in recs])
    rows = [(t, float(ratios[:, j].mean()), float(ratios[:, j].std(ddof=1)) if len(recs) > 1
             else math.nan, len(recs)) for j, t in enumerate(n["t_values"])]
    write_table(out / "maxima_summary.csv", "maxima_summary",
                ["t", "mean_ratio", "std_ratio", "n_seeds"], rows)
    last = rows[-1][1]
    if not 0.85 <= last <= 1.1:
        warnings.append(f"mean normalized maximum {last:.3f} outside [0.85, 1.1]")
    return ["maxima.csv", "maxima_summary.csv"], {"mean_ratio_last": last}, {}


PIPELINES = {
    "covariance_check": _covariance_check,
    "lyapunov_sweep": _lyapunov_sweep,
    "gamma_star_table": _gamma_star_table,
    "speed_sweep": _speed_sweep,
    "direct_run": _direct_run,
    "frozen_divergence": _frozen_divergence,
    "extremes_check": _extremes_check,
}


def resolve_output_dir(cfg: ExperimentConfig):
    out = Path(cfg.output_dir)
    if not out.is_absolute():
        root = os.environ.get(OUTPUT_ENV)
        if root:
            out = Path(root) / out
    return out


def run(cfg: ExperimentConfig) -> RunManifest:
    """Run one experiment and write its CSVs plus ``manifest.json``."""
    out = resolve_output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    warnings = []
    start = _now()
    pipeline = PIPELINES[cfg.experiment]
    try:
        names, summary, seeds = pipeline(cfg, out, warnings)
    except ConfigInvalid:
        raise
    except KppShearError as exc:
        exc.args = (f"[{cfg.experiment}] {exc}",)
        raise
    seeds = {"seeds": list(cfg.seeds), **seeds}
    manifest = RunManifest(config=cfg.to_dict(), code_version=__version__, task_seeds=seeds,
                           start_time=start, end_time=_now(), outputs=digest_outputs(out, names),
                           warnings=warnings, summary=summary)
    manifest.write(out)
    return manifest


def rerun(manifest_path, output_dir=None, workers=None):
    """Re-execute a manifest's config; returns (new manifest, mismatched outputs)."""
    old = RunManifest.read(manifest_path)
    cfg = ExperimentConfig.from_dict(old.config)
    if output_dir is not None or workers is not None:
        cfg = cfg.with_overrides(output_dir=output_dir, workers=workers)
    new = run(cfg)
    mismatched = sorted(k for k in set(old.outputs) | set(new.outputs)
                        if old.outputs.get(k) != new.outputs.get(k))
    return new, mismatched


def report(directory):
    """Aggregate CSVs found in ``directory`` into ``report.csv``."""
    d = Path(directory)
    rows = []
    if (d / "lyapunov.csv").exists():
        from ..anderson import LyapunovEstimate
        samples = [(float(r["kappa"]), LyapunovEstimate(float(r["gamma"]), float(r["std_error"]),
                                                         float(r["fit_r2"]),
                                                         float(r["horizon_used"]),
                                                         int(r["n_seeds"])))
                   for r in read_table(d / "lyapunov.csv")]
        try:
            fit = fit_lyapunov_asymptotics(samples, strict=False)
            rows.append(("lyapunov_p", fit.p, fit.p_se, fit.p_ci[0], fit.p_ci[1], ""))
            rows.append(("lyapunov_c1", fit.c1, fit.c1_se, "", "", ""))
            rows.append(("lyapunov_saturation", fit.saturation, "", "", "", ""))
        except KppShearError as exc:
            rows.append(("lyapunov_fit", "", "", "", "", str(exc)))
    if (d / "speeds.csv").exists():
        sp = [(float(r["sigma"]), float(r["c_star_variational"]), float(r["uncertainty"]))
              for r in read_table(d / "speeds.csv")]
        for label, fn in (("alpha_hat", lambda: fit_quadratic_enhancement(sp)),
                          ("loglog_slope", lambda: fit_linear_growth(sp))):
            try:
                f = fn()
                rows.append((label, f.value, f.std_error, f.ci[0], f.ci[1], ""))
            except KppShearError as exc:
                rows.append((label, "", "", "", "", str(exc)))
    if (d / "direct_summary.csv").exists():
        for r in read_table(d / "direct_summary.csv"):
            rows.append((f"direct_c_star[{r['sigma']}]", float(r["c_star"]),
                         float(r["std_error"]), "", "", f"cv={r['cv']}"))
    if (d / "divergence.csv").exists():
        for r in read_table(d / "divergence.csv"):
            rows.append((f"divergence_amplitude[{r['sigma']}]", float(r["amplitude_fit"]),
                         float(r["amplitude_se"]), "", "", f"r2={r['r2']}"))
    if (d / "maxima_summary.csv").exists():
        for r in read_table(d / "maxima_summary.csv"):
            rows.append((f"maxima_ratio[{r['t']}]", float(r["mean_ratio"]),
                         float(r["std_ratio"]), "", "", ""))
    write_table(d / "report.csv", "report",
                ["quantity", "value", "std_error", "ci_lo", "ci_hi", "note"], rows)
    return rows
