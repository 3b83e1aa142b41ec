import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from kppshear.covariance import CovarianceSpec
from kppshear.direct_sim import (ClipLog, DirectConfig, Field2D, FrontTrajectory, Window,
                                 bramson_correction, check_cfl, divergence_fit, ensemble_speed,
                                 initial_step, leading_position, measure_speed, mean_trajectory,
                                 recenter, simulate, step_rd, track_front, transport_y2)
from kppshear.errors import (CFLViolation, InsufficientSamples, InsufficientTimeSpan, NoCrossing,
                             WindowOverrun)
from kppshear.field_gen import FieldRealization
from kppshear.variational import ReactionSpec

R1 = ReactionSpec(1.0)
C0 = math.sqrt(2)
STATIC = CovarianceSpec("gaussian", 1.0, 1.0, "static")
WHITE = CovarianceSpec("gaussian", 1.0, 1.0, "white")
BRAMSON = bramson_correction(R1)


def plain_config(**kw):
    base = dict(sigma=0.0, dt=0.05, dy1=0.5, n1=1, dy2=0.125, horizon=200.0, spec=STATIC,
                record_every=4)
    base.update(kw)
    return DirectConfig(**base)


def zero_shear(n1, dy1=0.5):
    return FieldRealization(dy1, n1, np.zeros(n1), 0, STATIC)


@pytest.fixture(scope="module")
def plain_run():
    return simulate(plain_config(), 0)


def test_unperturbed_speed(plain_run):
    est = measure_speed(plain_run.trajectory, (100, 200), BRAMSON)
    assert est.c_star == pytest.approx(C0, rel=0.02)


def test_speed_converges_under_refinement(plain_run):
    coarse = simulate(plain_config(dt=0.125, dy2=0.25, dy1=1.0), 0)
    a = measure_speed(coarse.trajectory, (100, 200), BRAMSON).c_star
    b = measure_speed(plain_run.trajectory, (100, 200), BRAMSON).c_star
    fine = simulate(plain_config(dt=0.0625, dy2=0.125, dy1=0.5), 0)
    c = measure_speed(fine.trajectory, (100, 200), BRAMSON).c_star
    assert abs(c - a) / c < 0.01
    assert abs(c - b) / c < 0.01


def test_unperturbed_run_shows_no_divergence():
    run = simulate(plain_config(horizon=128.0, dt=0.03125), 0)
    fit = divergence_fit(run.trajectory, 0.0, 1.0, R1, t_min=1.0)
    assert abs(fit.amplitude_fit) < 3 * fit.amplitude_se


@pytest.mark.parametrize("xi,expected", [(-1.0, C0 + 0.5), (1.0, C0 - 0.5)])
def test_constant_shear_is_a_frame_shift(xi, expected):
    cfg = plain_config(sigma=0.5, constant_shear=xi, n1=4, horizon=150.0)
    run = simulate(cfg, 0)
    est = measure_speed(run.trajectory, (75, 150), BRAMSON)
    assert est.c_star == pytest.approx(expected, rel=0.02)


def test_mass_conserved_without_reaction():
    n1, n2, dy1, dy2 = 16, 256, 0.5, 0.125
    y1 = dy1 * np.arange(n1)
    y2 = dy2 * np.arange(n2) - 16.0
    u = 0.5 * np.exp(-(y2[None, :] ** 2) / 4 - ((y1[:, None] - 4) ** 2) / 2)
    fld = Field2D(u, dy1, dy2, float(y2[0]), 0.0, fill_behind=0.0)
    rng = np.random.default_rng(0)
    shear = FieldRealization(dy1, n1, rng.normal(size=n1), 0, STATIC)
    m0 = fld.u.sum()
    for _ in range(50):
        new = step_rd(fld, shear, 0.05, sigma=0.5, reaction=None)
        assert abs(new.u.sum() - fld.u.sum()) * dy1 * dy2 <= 1e-8
        fld = new
    assert fld.u.sum() == pytest.approx(m0, rel=1e-9)


@pytest.mark.parametrize("spec,sigma,dt,dy2", [(STATIC, 1.0, 0.03125, 0.125),
                                               (WHITE, 0.5, 0.05, 0.15)])
def test_maximum_principle(spec, sigma, dt, dy2):
    cfg = plain_config(sigma=sigma, spec=spec, n1=32, horizon=20.0, dt=dt, dy2=dy2, behind=40.0,
                       record_every=8)
    run = simulate(cfg, 3)
    assert run.clip.max_excursion < 1e-10
    assert run.final.u.min() >= 0 and run.final.u.max() <= 1


def test_white_shear_seeds_are_reproducible():
    cfg = plain_config(sigma=0.3, spec=WHITE, n1=32, horizon=10.0, dt=0.05, record_every=10)
    a, b = simulate(cfg, 5), simulate(cfg, 5)
    assert np.array_equal(a.trajectory.positions, b.trajectory.positions)
    c = simulate(cfg, 6)
    assert not np.array_equal(a.trajectory.positions, c.trajectory.positions)


def test_white_shear_speeds_concentrate():
    cfg = plain_config(sigma=0.3, spec=WHITE, n1=64, horizon=100.0, dt=0.1, dy2=0.2,
                       record_every=5)
    trajs = [simulate(cfg, s).trajectory for s in range(4)]
    ens = ensemble_speed(trajs, (50, 100), BRAMSON)
    assert ens.coefficient_of_variation < 0.05
    assert ens.estimate.c_star > C0


def test_transport_kernel_shift_and_mass():
    u = np.zeros((2, 200))
    u[:, 100] = 1.0
    out = transport_y2(u, np.array([0.5, -0.5]), 0.05, 0.05, fill_behind=0.0)
    y = 0.05 * np.arange(200)
    assert np.allclose(out.sum(axis=1), 1.0, atol=1e-12)
    means = (out * y).sum(axis=1)
    # u(y) -> (G * u)(y + shift): a positive shift moves mass towards -y2
    assert means == pytest.approx([5.0 - 0.5, 5.0 + 0.5], abs=1e-9)
    var = (out * (y - means[:, None]) ** 2).sum(axis=1)
    assert var == pytest.approx([0.05, 0.05], rel=1e-6)


def test_cfl_checks():
    shear = FieldRealization(0.5, 8, np.full(8, 10.0), 0, STATIC)
    with pytest.raises(CFLViolation):
        check_cfl(shear, 0.1, 1.0, 0.125)
    assert check_cfl(shear, 0.01, 1.0, 0.125) == pytest.approx(0.8)
    with pytest.raises(CFLViolation):
        plain_config(sigma=5.0, spec=WHITE, n1=16, dt=0.05).validate()
    with pytest.raises(ValueError):
        plain_config(dt=0.01).validate()


def _step_field(pos, dy2=0.25, n2=80, offset=-5.0, n1=3):
    y = offset + dy2 * np.arange(n2)
    p = np.where(y < pos, 1.0, 0.0)
    p[np.isclose(y, pos)] = 0.5
    return Field2D(np.repeat(p[None, :], n1, axis=0), 0.5, dy2, offset, 0.0)


def test_exact_step_position():
    assert track_front(_step_field(3.0))[0] == pytest.approx(3.0, abs=1e-12)


@given(st.integers(-10, 20))
def test_translation_shifts_position_exactly(k):
    dy2 = 0.25
    a = track_front(_step_field(3.0))[0]
    b = track_front(_step_field(3.0 + k * dy2))[0]
    assert b - a == pytest.approx(k * dy2, abs=1e-12)


@given(st.floats(-2.0, 8.0))
def test_tanh_profile_center(center):
    dy2 = 0.1
    y = -5.0 + dy2 * np.arange(200)
    p = 0.5 * (1 - np.tanh((y - center) / 1.3))
    fld = Field2D(np.repeat(p[None, :], 2, axis=0), 0.5, dy2, -5.0, 0.0)
    pos, width = track_front(fld)
    assert abs(pos - center) <= dy2 / 2
    assert leading_position(fld) == pytest.approx(pos)
    assert width > 0


def test_no_crossing():
    fld = Field2D(np.ones((2, 20)), 0.5, 0.1, 0.0, 0.0)
    with pytest.raises(NoCrossing):
        track_front(fld)


def test_window_overrun():
    fld = initial_step(4, 0.5, 0.125, 20.0, 40.0)
    u = fld.u.copy()
    u[0, :] = 0.0
    u[0, :10] = 1.0
    with pytest.raises(WindowOverrun):
        recenter(fld.replace(u=u), Window(40.0, 8.0))


def test_recenter_keeps_leading_edge_distance():
    fld = initial_step(2, 0.5, 0.125, 20.0, 40.0)
    u = np.roll(fld.u, 100, axis=1)
    u[:, :100] = 1.0
    out = recenter(fld.replace(u=u), Window(40.0, 8.0))
    assert out.window_offset > fld.window_offset
    ahead = out.y2[-1] + out.dy2 - track_front(out)[0]
    assert ahead == pytest.approx(40.0, abs=2 * out.dy2)
    assert track_front(out)[0] == pytest.approx(track_front(fld.replace(u=u))[0])


def test_linear_trajectory_slope():
    t = np.linspace(0, 50, 201)
    traj = FrontTrajectory(t, 1.7 * t + 3.0, np.zeros_like(t), np.zeros_like(t))
    assert measure_speed(traj, (10, 50)).c_star == pytest.approx(1.7, abs=1e-12)


def test_noisy_trajectory_slope():
    rng = np.random.default_rng(1)
    t = np.linspace(0, 50, 201)
    traj = FrontTrajectory(t, 1.7 * t + 0.01 * rng.standard_normal(t.size), np.zeros_like(t),
                           np.zeros_like(t))
    est = measure_speed(traj, (10, 50))
    assert abs(est.c_star - 1.7) <= 3 * est.uncertainty


def test_speed_window_needs_samples():
    t = np.linspace(0, 10, 11)
    traj = FrontTrajectory(t, t, np.zeros_like(t), np.zeros_like(t))
    with pytest.raises(InsufficientSamples):
        measure_speed(traj, (0, 10))


def test_divergence_fit_on_integrated_speed():
    from scipy.integrate import cumulative_trapezoid
    t = np.geomspace(1.0, 1024.0, 40001)
    c = C0 + 0.5 * np.sqrt(2 * np.log(t))
    x = cumulative_trapezoid(c, t, initial=0.0)
    traj = FrontTrajectory(t, x, np.zeros_like(t), np.zeros_like(t))
    fit = divergence_fit(traj, 0.5, 1.0, R1, log_correction=0.0)
    assert fit.c0_fit == pytest.approx(C0, rel=0.02)
    assert fit.amplitude_fit == pytest.approx(0.5 * math.sqrt(2), rel=0.02)
    assert fit.r2 > 0.999


def test_divergence_fit_needs_two_decades():
    t = np.linspace(1, 50, 100)
    traj = FrontTrajectory(t, t, np.zeros_like(t), np.zeros_like(t))
    with pytest.raises(InsufficientTimeSpan):
        divergence_fit(traj, 1.0, 1.0, R1)


def test_mean_trajectory():
    t = np.arange(1.0, 5.0)
    a = FrontTrajectory(t, t, t, t)
    b = FrontTrajectory(t, 3 * t, t, t)
    assert np.array_equal(mean_trajectory([a, b]).positions, 2 * t)


def test_trajectory_csv(tmp_path, plain_run):
    path = tmp_path / "front.csv"
    plain_run.trajectory.to_csv(path)
    assert path.read_text().startswith("# schema: kppshear.front/v1\n")


def test_clip_log():
    log = ClipLog()
    log.update(np.array([0.5, 1.0 + 1e-13, -2e-13]))
    assert log.max_excursion == pytest.approx(2e-13) and log.n_clipped == 2
