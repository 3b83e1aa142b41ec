import json
import math
import os

import numpy as np
import pytest
from hypothesis import given, strategies as st

from kppshear.errors import ConfigInvalid, InsufficientData
from kppshear.harness import (ExperimentConfig, RunManifest, fit_linear_growth,
                              fit_quadratic_enhancement, parse_config, report, rerun, run)
from kppshear.harness.cli import main
from kppshear.harness.runner import read_table
from kppshear.variational import GammaStarTable

C0 = math.sqrt(2)


def direct_dict(sigma=0.2, dt=0.1, dy2=0.2, n1=64, temporal="white", **numerics):
    num = dict(dt=dt, dy1=0.5, num_points=n1, dy2=dy2, horizon=40.0, speed_window=[20.0, 40.0],
               record_every=5)
    num.update(numerics)
    return {"experiment": "direct_run", "sigma_grid": [sigma], "seeds": {"base": 0, "count": 2},
            "covariance": {"family": "gaussian", "variance": 1.0, "corr_length": 1.0,
                           "temporal": temporal},
            "numerics": num, "output_dir": "direct"}


def speed_dict(table_path, out="speed"):
    return {"experiment": "speed_sweep", "sigma_grid": [0.1, 0.2, 0.3], "seeds": [0],
            "covariance": {"temporal": "white"},
            "numerics": {"gamma_star_table": str(table_path)}, "output_dir": str(out)}


# ----------------------------------------------------------------------- fits
def test_quadratic_fit_exact():
    s = [0.05, 0.1, 0.2, 0.3]
    fit = fit_quadratic_enhancement([(x, C0 * (1 + 0.5 * x * x), 0.0) for x in s])
    assert fit.value == pytest.approx(0.5, abs=1e-6)


def test_quadratic_fit_noisy():
    rng = np.random.default_rng(2)
    s = np.array([0.05, 0.1, 0.15, 0.2, 0.25, 0.3])
    c = C0 * (1 + 0.5 * s ** 2)
    speeds = [(x, y * (1 + 0.01 * rng.standard_normal()), 0.01 * y) for x, y in zip(s, c)]
    fit = fit_quadratic_enhancement(speeds)
    half = (fit.ci[1] - fit.ci[0]) / 2
    assert abs(fit.value - 0.5) <= 3 * half


def test_quadratic_fit_needs_small_sigma_points():
    with pytest.raises(InsufficientData):
        fit_quadratic_enhancement([(x, 1.5, 0.0) for x in (0.1, 0.2, 0.3, 0.5)])


def test_linear_growth_exact():
    s = [4.0, 8.0, 16.0, 32.0]
    assert fit_linear_growth([(x, 3 * x, 0.0) for x in s]).value == pytest.approx(1.0, abs=1e-12)
    assert fit_linear_growth([(x, x ** 0.8, 0.0) for x in s]).value == pytest.approx(0.8,
                                                                                    abs=1e-6)


def test_linear_growth_needs_span():
    with pytest.raises(InsufficientData):
        fit_linear_growth([(x, x, 0.0) for x in (4.0, 5.0, 6.0, 7.0)])


# --------------------------------------------------------------------- config
finite = st.floats(0.01, 10.0)


@given(st.sampled_from(["gaussian", "exponential"]), finite, st.floats(0.25, 2.0),
       st.lists(st.floats(0.0, 5.0), min_size=1, max_size=5), st.integers(0, 2 ** 63),
       st.integers(1, 20))
def test_config_round_trip(family, variance, ell, sigmas, base, count):
    d = {"experiment": "speed_sweep", "sigma_grid": sigmas, "seeds": {"base": base,
                                                                      "count": count},
         "covariance": {"family": family, "variance": variance, "corr_length": ell,
                        "temporal": "white"},
         "numerics": {"gamma_star_table": "t.csv", "f_prime_0": 1.5}, "output_dir": "x"}
    cfg = parse_config(d)
    assert ExperimentConfig.from_toml(cfg.to_toml()) == cfg
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg


def _stable(sigma, dt, dy2, temporal, n1):
    """Independent statement of the direct solver's preconditions."""
    if (dt / 2) / dy2 ** 2 < 1.0:
        return False
    if sigma == 0:
        return True
    if temporal == "white":
        return sigma * math.sqrt(dt) / dy2 <= 1.0
    return dt * sigma * math.sqrt(2 * math.log(n1)) / dy2 <= 1.0


@given(st.floats(0.0, 3.0), st.floats(0.005, 0.5), st.floats(0.05, 0.5),
       st.sampled_from(["white", "static"]))
def test_validation_rejects_unstable_direct_configs(sigma, dt, dy2, temporal):
    d = direct_dict(sigma=sigma, dt=dt, dy2=dy2, temporal=temporal, speed_window=[0.0, 40.0])
    if temporal == "static":
        d["experiment"] = "frozen_divergence"
        del d["numerics"]["speed_window"]
    if _stable(sigma, dt, dy2, temporal, 64):
        parse_config(d)
    else:
        with pytest.raises(ConfigInvalid):
            parse_config(d)


@given(st.floats(0.0, 0.3), st.floats(-1.0, 0.3))
def test_validation_rejects_short_pam_horizons(burn, horizon_shift):
    horizon = 10.0 / (1 - burn) + horizon_shift
    d = {"experiment": "lyapunov_sweep", "seeds": {"base": 0, "count": 4},
         "covariance": {"temporal": "white"},
         "numerics": {"kappa_grid": [1.0], "dt": 0.1, "grid_spacing": 0.125,
                      "num_points": 256, "horizon": horizon, "burn_in_fraction": max(burn, 0.01)}}
    ok = horizon * (1 - max(burn, 0.01)) >= 10.0
    if ok:
        parse_config(d)
    else:
        with pytest.raises(ConfigInvalid):
            parse_config(d)


@pytest.mark.parametrize("mutate,field", [
    (lambda d: d.update(experiment="nope"), "experiment"),
    (lambda d: d["numerics"].update(bogus=1), "numerics.bogus"),
    (lambda d: d["numerics"].pop("dt"), "numerics.dt"),
    (lambda d: d.update(seeds={"base": -1, "count": 2}), "seeds"),
    (lambda d: d["covariance"].update(variance=-1.0), "covariance.variance"),
    (lambda d: d.update(workers=0), "workers"),
    (lambda d: d["numerics"].update(num_points=48), "numerics.num_points"),
    (lambda d: d["numerics"].update(num_points=8), "numerics.num_points"),
    (lambda d: d["numerics"].update(speed_window=[30.0, 80.0]), "numerics.speed_window"),
])
def test_invalid_configs_name_the_field(mutate, field):
    d = direct_dict()
    mutate(d)
    with pytest.raises(ConfigInvalid) as exc:
        parse_config(d)
    assert exc.value.field == field


# ------------------------------------------------------------------- pipelines
@pytest.fixture()
def out_root(tmp_path, monkeypatch):
    monkeypatch.setenv("KPPSHEAR_OUT", str(tmp_path))
    return tmp_path


@pytest.fixture()
def quad_table(tmp_path):
    path = tmp_path / "quad.csv"
    GammaStarTable.quadratic(1.0).to_csv(path)
    return path


def test_speed_sweep_csv(out_root, quad_table):
    manifest = run(parse_config(speed_dict(quad_table)))
    rows = read_table(out_root / "speed" / "speeds.csv")
    assert [float(r["sigma"]) for r in rows] == [0.1, 0.2, 0.3]
    for r in rows:
        s = float(r["sigma"])
        assert float(r["c_star_variational"]) == pytest.approx(C0 * math.sqrt(1 + s * s),
                                                               rel=1e-6)
        assert float(r["c_star_small_sigma_curve"]) == pytest.approx(C0 * (1 + s * s / 2))
    assert set(manifest.outputs) == {"speeds.csv"}
    text = (out_root / "speed" / "speeds.csv").read_text()
    assert text.startswith("# schema: kppshear.speed_sweep/v1\n")


def test_covariance_check_outputs(out_root):
    d = {"experiment": "covariance_check", "seeds": [7], "covariance": {"family": "exponential"},
         "numerics": {"n_realizations": 2000, "n_draws": 2000, "num_points": 128},
         "output_dir": "fc"}
    manifest = run(parse_config(d))
    rows = read_table(out_root / "fc" / "covariance.csv")
    assert len(rows) == int(4 / 0.125) + 1
    assert {"lag", "empirical", "target", "std_error", "pass"} <= set(rows[0])
    summary = {r["check"]: r["pass"] for r in read_table(out_root / "fc" / "covariance_summary.csv")}
    assert summary["covariance_max_abs_z"] == "true"
    assert sorted(manifest.outputs) == ["covariance.csv", "covariance_summary.csv"]


def test_rerun_reproduces_digests(out_root):
    d = {"experiment": "extremes_check", "seeds": {"base": 0, "count": 3},
         "covariance": {"family": "gaussian"}, "numerics": {"t_values": [5.0, 50.0]},
         "output_dir": "ex"}
    first = run(parse_config(d))
    again, mismatched = rerun(out_root / "ex" / "manifest.json", output_dir=str(out_root / "ex2"))
    assert mismatched == []
    assert again.outputs == first.outputs


def test_workers_do_not_change_outputs(out_root):
    one = run(parse_config(direct_dict()))
    d = direct_dict()
    d["workers"] = 2
    d["output_dir"] = "direct2"
    two = run(parse_config(d))
    assert one.outputs == two.outputs
    assert len([k for k in one.outputs if k.startswith("front_")]) == 2


def test_manifest_contents(out_root):
    d = direct_dict()
    manifest = run(parse_config(d))
    back = RunManifest.read(out_root / "direct")
    assert back.outputs == manifest.outputs
    assert back.task_seeds["seeds"] == [0, 1]
    assert back.config == parse_config(d).to_dict()
    assert back.start_time <= back.end_time
    for name, digest in back.outputs.items():
        assert len(digest) == 64 and (out_root / "direct" / name).exists()


def test_fit_quality_problems_are_warnings(out_root):
    d = {"experiment": "lyapunov_sweep", "seeds": {"base": 0, "count": 4},
         "covariance": {"temporal": "white"},
         "numerics": {"kappa_grid": [0.05, 1.0], "dt": 0.1, "grid_spacing": 1.0,
                      "num_points": 64, "horizon": 12.5},
         "output_dir": "lyap"}
    manifest = run(parse_config(d))
    # too few kappa values for the asymptotic fit: recorded, not fatal
    assert any("asymptotic fit skipped" in w for w in manifest.warnings)
    rows = read_table(out_root / "lyap" / "lyapunov.csv")
    assert [float(r["kappa"]) for r in rows] == [0.05, 1.0]
    assert (out_root / "lyap" / "series_kappa_1.csv").exists()


def test_report_aggregates(out_root, quad_table):
    run(parse_config(speed_dict(quad_table)))
    rows = report(out_root / "speed")
    assert rows == [] or all(len(r) == 6 for r in rows)
    assert (out_root / "speed" / "report.csv").exists()


# ------------------------------------------------------------------------- cli
def _write_toml(path, d):
    path.write_text(ExperimentConfig.from_dict(d).to_toml())
    return path


def test_cli_runs_and_reruns(out_root, quad_table, tmp_path, capsys):
    cfg = _write_toml(tmp_path / "speed.toml", speed_dict(quad_table.name, out="cli_speed"))
    assert main(["speed", "--config", str(cfg)]) == 0
    assert (out_root / "cli_speed" / "manifest.json").exists()
    assert main(["rerun", "--config", str(out_root / "cli_speed")]) == 0
    assert main(["report", "--out", str(out_root / "cli_speed")]) == 0


def test_cli_overrides(out_root, tmp_path):
    d = {"experiment": "extremes_check", "seeds": {"base": 0, "count": 2},
         "numerics": {"t_values": [5.0, 50.0]}, "output_dir": "ex"}
    cfg = _write_toml(tmp_path / "ex.toml", d)
    out = tmp_path / "override"
    assert main(["extremes", "--config", str(cfg), "--seed", "40", "--workers", "2",
                 "--out", str(out)]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["task_seeds"]["seeds"] == [40, 41] and man["config"]["workers"] == 2


def test_cli_exit_codes(out_root, tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text('experiment = "direct_run"\nsigma_grid = [0.1]\nseeds = [0]\n')
    assert main(["direct", "--config", str(bad)]) == 2
    assert "numerics.dt" in capsys.readouterr().err
    d = speed_dict("missing.csv")
    cfg = _write_toml(tmp_path / "s.toml", d)
    assert main(["speed", "--config", str(cfg)]) == 2
    assert main(["direct", "--config", str(cfg)]) == 2
    d = speed_dict(tmp_path / "short.csv")
    GammaStarTable.from_function(lambda x: 0.5 * x * x, [1e-3, 2e-3]).to_csv(tmp_path / "short.csv")
    cfg = _write_toml(tmp_path / "s2.toml", d)
    assert main(["speed", "--config", str(cfg)]) == 1
