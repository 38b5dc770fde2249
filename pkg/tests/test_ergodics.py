import numpy as np
import pytest

from twoscale.rng import RngStream
from twoscale.sde import ConfigurationError, ModelSpec
from twoscale.ergodics import (
    FitWindowError,
    batch_means_se,
    bounded_dictionary,
    estimate_invariant,
    estimate_relaxation,
    fit_ergodic_rate,
    probe_invariant_continuity,
)


def test_batch_means_se_close_to_iid_se():
    x = RngStream(1).normal(10_000)
    se = batch_means_se(x)
    assert 0.5 * 0.01 < se < 2.0 * 0.01


def test_invariant_sincos_moments(sincos):
    meas = estimate_invariant(sincos, 1.0, n_samples=4000, dt=0.02, rng=RngStream(42))
    mean, mean_se = meas.mean()
    var, var_se = meas.var()
    assert abs(mean[0] - np.sin(1.0)) < 3 * mean_se[0]
    assert abs(var[0] - 0.5) < 3 * var_se[0] + 0.01


def test_invariant_lingauss_any_z(lingauss):
    meas = estimate_invariant(lingauss, 4.0, n_samples=3000, rng=RngStream(9))
    mean, mean_se = meas.mean()
    var, var_se = meas.var()
    assert abs(mean[0]) < 3 * mean_se[0]
    assert abs(var[0] - 0.5) < 3 * var_se[0] + 0.01


def test_invariant_scaled_noise_variance():
    # h = -y, eta = sqrt(2): stationary variance eta^2 / 2 = 1
    model = ModelSpec(
        1, 1,
        b=lambda x, y: np.zeros_like(x),
        sigma=lambda x: np.eye(1),
        h=lambda x, y: -y,
        eta=lambda x, y: np.sqrt(2.0) * np.eye(1),
        x0=[0.0], y0=[0.0], stability_cap=0.1,
    )
    with pytest.warns(UserWarning):  # no certificate on the raw spec
        meas = estimate_invariant(model, 0.0, n_samples=4000, dt=0.01, rng=RngStream(3))
    var, var_se = meas.var()
    assert abs(var[0] - 1.0) < 3 * var_se[0] + 0.02


def test_invariant_moment_bound(sincos):
    meas = estimate_invariant(sincos, 0.5, n_samples=3000, rng=RngStream(12))
    vhat, vse = meas.expectation(lambda y: y[:, 0] ** 2)
    beta0, beta1 = sincos.moment_constants(1)
    assert vhat < beta0 / beta1 + 3 * vse


def test_invariant_requires_enough_samples(sincos):
    with pytest.raises(ConfigurationError):
        estimate_invariant(sincos, 0.0, n_samples=50)


def test_invariant_stationarity_under_restart(sincos):
    # restarting from the chain's own output leaves dictionary moments alone
    rng = RngStream(77)
    m1 = estimate_invariant(sincos, 0.8, n_samples=4000, rng=rng.substream(0))
    init = m1.samples[-16:]
    m2 = estimate_invariant(
        sincos, 0.8, n_samples=4000, burn_in=2.0, init=init, rng=rng.substream(1)
    )
    for fid, f in bounded_dictionary(1)[:5]:
        e1, s1 = m1.expectation(f)
        e2, s2 = m2.expectation(f)
        assert abs(e1 - e2) < 3 * np.hypot(s1, s2), fid


def test_invariant_csv(sincos, tmp_path):
    meas = estimate_invariant(sincos, 0.0, n_samples=200, rng=RngStream(4))
    f = tmp_path / "m.csv"
    meas.to_csv(f)
    lines = f.read_text().splitlines()
    assert lines[0] == "y_1,weight" and len(lines) == meas.n + 1


def test_relaxation_t0_is_exact(lingauss):
    tab = estimate_relaxation(
        lingauss, 0.0, lambda y: y[..., 0], [[1.7]], [0.0, 0.5], 200,
        RngStream(5), invariant=lingauss.invariant,
    )
    assert tab.values[0, 0] == pytest.approx(1.7)  # f(y) - pi[f] with pi[f] = 0
    assert tab.se[0, 0] == 0.0


def test_relaxation_matches_ou_closed_form(lingauss):
    # E[Y_t | Y_0 = y] = y e^{-t} for the unit OU frozen chain
    t_grid = [0.0, 0.5, 1.0, 2.0]
    tab = estimate_relaxation(
        lingauss, 0.0, lambda y: y[..., 0], [[2.0]], t_grid, 20_000,
        RngStream(6), invariant=lingauss.invariant, dt=0.01,
    )
    for j, t in enumerate(tab.times):
        tol = 3 * tab.se[0, j] + 2e-2 * np.exp(-t)  # Euler rate bias ~ dt/2
        assert abs(tab.values[0, j] - 2.0 * np.exp(-t)) < tol


def test_relaxation_decays_from_start(sincos):
    tab = estimate_relaxation(
        sincos, 0.0, lambda y: y[..., 0], [[2.0]], [0.0, 1.0, 2.0, 3.0], 4000,
        RngStream(7), invariant=sincos.invariant,
    )
    h0 = abs(tab.values[0, 0])
    for j in range(1, len(tab.times)):
        assert abs(tab.values[0, j]) <= h0 + 3 * tab.se[0, j]
    assert abs(tab.values[0, -1]) < 0.1


def test_fit_rate_ou_first_and_second_moments(lingauss):
    tab = estimate_relaxation(
        lingauss, 0.0, lambda y: y[..., 0], [[2.0]], np.linspace(0, 3, 13), 10_000,
        RngStream(8), invariant=lingauss.invariant, dt=0.01, f_id="y",
    )
    fit = fit_ergodic_rate(tab)
    assert abs(fit.xi - 1.0) < 0.1
    assert fit.C == pytest.approx(2.0, rel=0.1)
    assert fit.r2 > 0.98

    tab2 = estimate_relaxation(
        lingauss, 0.0, lambda y: y[..., 0] ** 2, [[2.0]], np.linspace(0, 2.5, 11), 10_000,
        RngStream(9), invariant=lingauss.invariant, dt=0.01, f_id="y^2",
    )
    fit2 = fit_ergodic_rate(tab2)
    assert abs(fit2.xi - 2.0) < 0.2


def test_fit_rate_refuses_constant_function(lingauss):
    tab = estimate_relaxation(
        lingauss, 0.0, lambda y: np.ones(y.shape[:-1]), [[2.0]], [0, 1, 2], 200,
        RngStream(10), invariant=lingauss.invariant,
    )
    with pytest.raises(FitWindowError):
        fit_ergodic_rate(tab)


def test_fit_serializes(lingauss):
    tab = estimate_relaxation(
        lingauss, 0.0, lambda y: y[..., 0], [[2.0]], np.linspace(0, 3, 13), 5000,
        RngStream(11), invariant=lingauss.invariant, dt=0.01, f_id="y",
    )
    d = fit_ergodic_rate(tab).as_dict()
    assert set(d) >= {"C", "xi", "r2", "window"}


def test_continuity_probe_lingauss_is_zero(lingauss):
    probe = probe_invariant_continuity(
        lingauss, 0.0, 1.0, measures=(lingauss.invariant, lingauss.invariant)
    )
    assert probe.ratio == 0.0


def test_continuity_probe_sincos_finite_and_stable(sincos):
    p1 = probe_invariant_continuity(sincos, 0.0, 0.1, n_samples=2000, rng=RngStream(21))
    p2 = probe_invariant_continuity(sincos, 0.0, 0.1, n_samples=8000, rng=RngStream(22))
    assert 0 < p1.ratio < 10.0
    assert abs(p1.ratio - p2.ratio) < 3 * np.hypot(p1.ratio_se, p2.ratio_se) + 0.15


def test_continuity_probe_rejects_equal_points(sincos):
    with pytest.raises(ConfigurationError):
        probe_invariant_continuity(sincos, 0.7, 0.7)


def test_positive_mixing_rate_for_every_builtin(sincos, lingauss, ou2d):
    # fitted exponential rate xi > 0 for each certified model
    for i, m in enumerate((sincos, lingauss, ou2d)):
        y0 = np.full(m.spec.q, 2.0)
        tab = estimate_relaxation(
            m, 0.0, lambda y: y[..., 0], [y0], np.linspace(0, 3, 13), 6000,
            RngStream(60 + i), invariant=m.invariant, f_id="y1",
        )
        fit = fit_ergodic_rate(tab)
        assert fit.xi > 0, m.name


def test_long_run_matches_declared_invariant_all_builtins(sincos, lingauss, ou2d):
    # oracle self-consistency: the frozen chain's long-run moments match the
    # declared closed-form law for every builtin model
    for i, m in enumerate((sincos, lingauss, ou2d)):
        z = 0.9
        meas = estimate_invariant(m, z, n_samples=3000, rng=RngStream(80 + i))
        mean, mean_se = meas.mean()
        var, var_se = meas.var()
        om = m.invariant.mean(z)
        ov = np.diag(m.invariant.cov)
        assert np.all(np.abs(mean - om) <= 3 * mean_se + 0.01), m.name
        assert np.all(np.abs(var - ov) <= 3 * var_se + 0.02), m.name
