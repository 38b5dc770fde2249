import numpy as np
import pytest
import scipy.stats as st

from twoscale.rng import RngStream
from twoscale.sde import (
    ConfigurationError,
    ModelSpec,
    SimConfig,
    reconstruct_slow_from_innovations,
    simulate_slow_fast,
    simulate_paths_batch,
)
from twoscale.models import KalmanParams
from twoscale.filtering import (
    FilterDegeneracyError,
    ParticleCloud,
    filter_expectation,
    kalman_bucy_oracle,
    riccati_stationary,
    run_filter_batch,
    run_particle_filter,
)


def _no_coupling_model():
    # b depends on x only: the slow increment carries no information about Y
    def b(x, y):
        return np.broadcast_to(np.cos(x), np.broadcast_shapes(np.shape(x), y[..., :1].shape)).copy()

    return ModelSpec(
        1, 1,
        b=b,
        sigma=lambda x: np.eye(1),
        h=lambda x, y: np.sin(x) - y,
        eta=lambda x, y: np.eye(1),
        x0=[0.0], y0=[0.5], stability_cap=0.2,
    )


def test_no_coupling_filter_is_exact():
    model = _no_coupling_model()
    cfg = SimConfig(n=8, T=0.5, dt_slow=2e-3, substeps=4, seed=7)
    path = simulate_slow_fast(model, cfg)
    trace, innov = run_particle_filter(model, path, 300, rng=RngStream(8))
    # likelihood constant across particles: weights never change
    assert np.all(trace.ess > 300 - 1e-6)
    # innovations recover the driving Brownian increments exactly
    assert np.allclose(innov.dI, path.dW, atol=1e-12)


def test_no_coupling_marginal_matches_prior():
    # with b independent of y the filter cloud at T must match the prior law
    # of Y_T given the same observed slow path (Y still feels X through h)
    from twoscale.sde import micro_advance

    model = _no_coupling_model()
    cfg = SimConfig(n=8, T=0.5, dt_slow=4e-3, substeps=2, seed=9)
    path = simulate_slow_fast(model, cfg)
    trace, _ = run_particle_filter(model, path, 4000, rng=RngStream(10))
    cloud = trace.clouds[-1]

    gen = RngStream(11).generator()
    Y = np.tile(model.y0, (4000, 1))
    for k in range(cfg.n_steps):
        Y = micro_advance(model, path.X[k], Y, cfg.n, cfg.dt_fast, cfg.substeps, gen)
    ks = st.ks_2samp(cloud.particles[:, 0], Y[:, 0])
    assert ks.pvalue > 0.01
    d = st.energy_distance(cloud.particles[:, 0], Y[:, 0])
    assert d < 0.05


def test_reconstruction_identity(sincos):
    cfg = SimConfig(n=16, T=0.5, dt_slow=2e-3, substeps=4, seed=12)
    path = simulate_slow_fast(sincos.spec, cfg)
    trace, innov = run_particle_filter(sincos, path, 500, rng=RngStream(13), store_clouds=False)
    rec = reconstruct_slow_from_innovations(sincos.spec, path, trace.drift_means, innov.dI)
    assert np.max(np.abs(rec - path.X)) < 1e-10


def test_reconstruction_identity_many_paths(sincos):
    cfg = SimConfig(n=8, T=0.1, dt_slow=2e-3, substeps=2, seed=14)
    worst = 0.0
    for r in range(100):
        path = simulate_slow_fast(sincos.spec, SimConfig(**{**cfg.__dict__, "replica_id": r}))
        trace, innov = run_particle_filter(
            sincos, path, 64, rng=RngStream(15).substream(r), store_clouds=False
        )
        rec = reconstruct_slow_from_innovations(sincos.spec, path, trace.drift_means, innov.dI)
        worst = max(worst, np.max(np.abs(rec - path.X)))
    assert worst < 1e-10


def test_reconstruction_perturbation_linearity(sincos):
    # constant sigma = 1: bumping one innovation increment by eps shifts the
    # reconstructed tail by exactly eps
    cfg = SimConfig(n=8, T=0.2, dt_slow=2e-3, substeps=2, seed=16)
    path = simulate_slow_fast(sincos.spec, cfg)
    trace, innov = run_particle_filter(sincos, path, 100, rng=RngStream(17), store_clouds=False)
    rec = reconstruct_slow_from_innovations(sincos.spec, path, trace.drift_means, innov.dI)
    dI = innov.dI.copy()
    eps = 0.37
    kbump = 40
    dI[kbump, 0] += eps
    rec2 = reconstruct_slow_from_innovations(sincos.spec, path, trace.drift_means, dI)
    assert np.allclose(rec2[: kbump + 1], rec[: kbump + 1])
    assert np.allclose(rec2[kbump + 1 :] - rec[kbump + 1 :], eps, atol=1e-12)


def test_filter_tracks_kalman_bucy(lingauss):
    # n = 16, 10^4 particles: mean RMSE < 0.05 and late-time variance within
    # 10% of the stationary Riccati solution
    cfg = SimConfig(n=16, T=1.0, dt_slow=2e-3, substeps=1, seed=18)
    path = simulate_slow_fast(lingauss.spec, cfg)
    trace, _ = run_particle_filter(lingauss, path, 10_000, rng=RngStream(19), store_clouds=False)
    kb = kalman_bucy_oracle(lingauss, path)
    rmse = np.sqrt(np.mean((trace.means[:, 0] - kb.mean) ** 2))
    assert rmse < 0.05
    late = slice(len(kb.grid) // 2, None)
    pstar = riccati_stationary(16, lingauss.kalman)
    assert abs(trace.variances[late, 0].mean() - pstar) / pstar < 0.10


def test_stationary_riccati_values(lingauss):
    for n in (16, 64, 256):
        pstar = riccati_stationary(n, lingauss.kalman)
        assert pstar == pytest.approx(np.sqrt(n**2 + n) - n, rel=1e-12)
        # the filter variance approaches the invariant variance 1/2 at rate
        # 1/(8n): the module-level shadow of the 1/n convergence
        assert abs((0.5 - pstar) - 1.0 / (8 * n)) < 0.2 / n**2 * 8


def test_kalman_prior_variance_closed_form(lingauss):
    cfg = SimConfig(n=16, T=0.5, dt_slow=2e-3, substeps=1, seed=20)
    path = simulate_slow_fast(lingauss.spec, cfg)
    kb = kalman_bucy_oracle(lingauss, path, params=KalmanParams(a=-1.0, c=0.0, sigma=1.0, eta=1.0))
    exact = 0.5 * (1 - np.exp(-2 * 16 * kb.grid))
    assert np.max(np.abs(kb.var - exact)) < 1e-10


def test_kalman_zero_gain_at_start(lingauss):
    # P_0 = 0: the first mean update is the pure prior drift step, ignoring
    # the observed increment entirely
    import dataclasses

    spec = dataclasses.replace(lingauss.spec, y0=np.array([1.5]))
    cfg = SimConfig(n=16, T=0.1, dt_slow=2e-3, substeps=1, seed=21)
    path = simulate_slow_fast(spec, cfg)
    doctored = np.array(path.X)
    doctored[1] += 50.0  # a huge first observation jump must be ignored
    from twoscale.sde import PathBundle

    pb = PathBundle(path.grid, doctored, path.Y, path.dW, path.dB, cfg=cfg)
    kb = kalman_bucy_oracle(spec, pb, params=lingauss.kalman)
    assert kb.mean[0] == 1.5
    assert kb.mean[1] == pytest.approx(1.5 * (1 - 16 * cfg.dt_slow), abs=1e-14)


def test_kalman_rejects_nonlinear(sincos):
    cfg = SimConfig(n=4, T=0.1, dt_slow=2e-3, substeps=2, seed=22)
    path = simulate_slow_fast(sincos.spec, cfg)
    with pytest.raises(ConfigurationError):
        kalman_bucy_oracle(sincos, path)


def test_filter_expectation_trivials():
    cloud = ParticleCloud(np.arange(10, dtype=float)[:, None], np.full(10, 0.1), 0.0)
    est, se = filter_expectation(cloud, lambda y: np.ones(y.shape[:-1]))
    assert est == pytest.approx(1.0) and se == pytest.approx(0.0, abs=1e-12)
    est, _ = filter_expectation(cloud, lambda y: (y[:, 0] < 5).astype(float))
    assert est == pytest.approx(0.5)


def test_filter_mean_converges_to_kalman_at_sqrtN_rate(lingauss):
    cfg = SimConfig(n=16, T=0.5, dt_slow=4e-3, substeps=1, seed=23)
    grid, Xp, _ = simulate_paths_batch(lingauss.spec, cfg, 6, RngStream(24))
    kbs = []
    from twoscale.sde import PathBundle

    for r in range(6):
        pb = PathBundle(grid, Xp[r], np.zeros_like(Xp[r]), np.zeros((len(grid) - 1, 1)),
                        np.zeros((len(grid) - 1, 1, 1)), cfg=cfg)
        kbs.append(kalman_bucy_oracle(lingauss, pb).mean)
    rmses = []
    particle_counts = [100, 1000, 10_000]
    for N in particle_counts:
        fb = run_filter_batch(lingauss, Xp, cfg, N, rng=RngStream(25).substream(N))
        err = np.array([fb.means[r, :, 0] - kbs[r] for r in range(6)])
        rmses.append(np.sqrt((err**2).mean()))
    slope = np.polyfit(np.log(particle_counts), np.log(rmses), 1)[0]
    assert -0.65 < slope < -0.35


def test_filter_degeneracy_detected(lingauss):
    cfg = SimConfig(n=4, T=0.02, dt_slow=2e-3, substeps=1, seed=26)
    X = np.zeros((1, cfg.n_steps + 1, 1))
    X[0, 5:, 0] = 1e9  # impossible jump: zero likelihood for every particle
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(FilterDegeneracyError):
        run_filter_batch(lingauss, X, cfg, 50, rng=RngStream(27))


def test_filter_requires_cfg(sincos):
    cfg = SimConfig(n=4, T=0.1, dt_slow=2e-3, substeps=2, seed=28)
    path = simulate_slow_fast(sincos.spec, cfg)
    stripped = path.with_innovations(np.zeros((cfg.n_steps, 1)))
    object.__setattr__(stripped, "cfg", None)
    with pytest.raises(ConfigurationError):
        run_particle_filter(sincos, stripped, 10)


def test_trace_csv(sincos, tmp_path):
    cfg = SimConfig(n=8, T=0.1, dt_slow=2e-3, substeps=2, seed=29)
    path = simulate_slow_fast(sincos.spec, cfg)
    trace, innov = run_particle_filter(sincos, path, 50, rng=RngStream(30), store_clouds=False)
    f = tmp_path / "trace.csv"
    trace.to_csv(f, innovations=innov)
    assert f.read_text().splitlines()[0] == "t,ess,mean_1,var_1,dI_1"


def test_resampling_keeps_filter_consistent(lingauss):
    # aggressive threshold forces resampling every step; the filter should
    # still track the Kalman mean
    cfg = SimConfig(n=16, T=0.5, dt_slow=2e-3, substeps=1, seed=31)
    path = simulate_slow_fast(lingauss.spec, cfg)
    trace, _ = run_particle_filter(
        lingauss, path, 3000, resample_threshold=1.01, rng=RngStream(32), store_clouds=False
    )
    kb = kalman_bucy_oracle(lingauss, path)
    rmse = np.sqrt(np.mean((trace.means[:, 0] - kb.mean) ** 2))
    assert rmse < 0.08
