import numpy as np
import pytest
import scipy.stats as st

from twoscale.rng import RngStream
from twoscale.sde import (
    ConfigurationError,
    DivergedTrajectoryError,
    ModelSpec,
    SimConfig,
    frozen_values_at_times,
    simulate_ensemble,
    simulate_frozen,
    simulate_slow_fast,
)


def _zero_model():
    return ModelSpec(
        1, 1,
        b=lambda x, y: np.zeros_like(x),
        sigma=lambda x: np.zeros((1, 1)),
        h=lambda x, y: np.zeros_like(y),
        eta=lambda x, y: np.zeros((1, 1)),
        x0=[1.5], y0=[-2.0],
    )


def _bm_model():
    # b = 0, sigma = 1: the slow component is a Brownian motion from x0
    return ModelSpec(
        1, 1,
        b=lambda x, y: np.zeros_like(x),
        sigma=lambda x: np.eye(1),
        h=lambda x, y: -y,
        eta=lambda x, y: np.eye(1),
        x0=[0.7], y0=[0.0],
    )


def test_zero_dynamics_constant_path():
    path = simulate_slow_fast(_zero_model(), SimConfig(n=3, T=0.5, dt_slow=0.01, seed=1))
    assert np.all(path.X == 1.5)
    assert np.all(path.Y == -2.0)


def test_determinism_bit_identical(sincos):
    cfg = SimConfig(n=8, T=0.25, dt_slow=2e-3, substeps=4, seed=42, replica_id=3)
    p1 = simulate_slow_fast(sincos.spec, cfg)
    p2 = simulate_slow_fast(sincos.spec, cfg)
    assert np.array_equal(p1.X, p2.X) and np.array_equal(p1.Y, p2.Y)
    assert np.array_equal(p1.dW, p2.dW) and np.array_equal(p1.dB, p2.dB)


def test_coupling_reuse_reproduces_path(sincos):
    cfg = SimConfig(n=8, T=0.25, dt_slow=2e-3, substeps=4, seed=5)
    p1 = simulate_slow_fast(sincos.spec, cfg)
    p2 = simulate_slow_fast(sincos.spec, cfg, increments=(p1.dW, p1.dB))
    assert np.array_equal(p1.X, p2.X) and np.array_equal(p1.Y, p2.Y)


def test_increment_variance_matches_dt(sincos):
    cfg = SimConfig(n=2, T=1.0, dt_slow=5e-3, substeps=2, seed=11)
    path = simulate_slow_fast(sincos.spec, cfg)
    var = path.dW.var()
    se = np.sqrt(2.0 / len(path.dW)) * cfg.dt_slow
    assert abs(var - cfg.dt_slow) < 4 * se
    assert abs(path.dB.var() - cfg.dt_fast) < 4 * np.sqrt(2.0 / path.dB.size) * cfg.dt_fast


def test_weak_self_consistency_brownian_terminal():
    # b = 0, sigma = 1: X_T ~ N(x0, T); KS at the 1% level over 10^4 replicas
    cfg = SimConfig(n=1, T=1.0, dt_slow=0.01, seed=17)
    res = simulate_ensemble(_bm_model(), cfg, 10_000, RngStream(99))
    ks = st.kstest(res.X[:, 0], "norm", args=(0.7, 1.0))
    assert ks.pvalue > 0.01


def test_ou_terminal_variance(lingauss):
    # fast OU at n = 64 over T = 2 reaches its stationary variance eta^2/2
    cfg = SimConfig(n=64, T=2.0, dt_slow=2e-3, substeps=2, seed=23)
    res = simulate_ensemble(lingauss.spec, cfg, 10_000, RngStream(7))
    v = res.Y[:, 0].var()
    se = 0.5 * np.sqrt(2.0 / 10_000)
    assert abs(v - 0.5) < 3 * se + 0.02  # 0.02 covers the Euler step bias


@pytest.mark.parametrize("k", [1, 2])
def test_lyapunov_moment_bound_along_path(sincos, k):
    # sup_t E[V_k(Y_t)] <= V_k(y0) + beta0(k) T + 4 SE over 10^3 replicas
    cfg = SimConfig(n=1, T=1.0, dt_slow=1e-3, substeps=1, seed=31)
    R = 1000
    sums = []

    def record(step, t, X, Y, Xa):
        vk = sincos.lyapunov_weight(Y) ** k
        sums.append((vk.mean(), vk.std(ddof=1) / np.sqrt(R)))

    simulate_ensemble(sincos.spec, cfg, R, RngStream(101), record=record)
    beta0, _ = sincos.moment_constants(k)
    vbar0 = float(sincos.lyapunov_weight(sincos.spec.y0) ** k)
    worst = max(m - 4 * se for m, se in sums)
    assert worst <= vbar0 + beta0 * cfg.T


def test_frozen_long_run_moments(sincos):
    # frozen chain at z = pi/2: mean -> sin z = 1, variance -> 1/2
    times, vals = frozen_values_at_times(
        sincos.spec, [np.pi / 2], [0.0], [12.0], 0.02, 4000, RngStream(3)
    )
    y = vals[:, 0, 0]
    se_m = y.std(ddof=1) / np.sqrt(len(y))
    assert abs(y.mean() - 1.0) < 3 * se_m
    assert abs(y.var() - 0.5) < 3 * 0.5 * np.sqrt(2 / len(y)) + 0.01


def test_frozen_symmetry_at_zero(sincos):
    times, vals = frozen_values_at_times(
        sincos.spec, [0.0], [0.0], [12.0], 0.02, 4000, RngStream(4)
    )
    y = vals[:, 0, 0]
    assert abs(y.mean()) < 3 * y.std(ddof=1) / np.sqrt(len(y))


def test_frozen_pure_diffusion_variance_grows_linearly():
    model = ModelSpec(
        1, 1,
        b=lambda x, y: np.zeros_like(x),
        sigma=lambda x: np.eye(1),
        h=lambda x, y: np.zeros_like(y),
        eta=lambda x, y: np.eye(1),
        x0=[0.0], y0=[0.4],
    )
    t_grid = [0.5, 1.0, 2.0]
    times, vals = frozen_values_at_times(model, [0.0], [0.4], t_grid, 0.01, 5000, RngStream(5))
    for j, t in enumerate(times):
        d = vals[:, j, 0] - 0.4
        se = t * np.sqrt(2.0 / len(d))
        assert abs(d.var() - t) < 3 * se


def test_frozen_path_shapes_and_determinism(sincos):
    fp1 = simulate_frozen(sincos.spec, [0.3], [1.0], horizon=2.0, dt=0.02, rng=RngStream(8))
    fp2 = simulate_frozen(sincos.spec, [0.3], [1.0], horizon=2.0, dt=0.02, rng=RngStream(8))
    assert fp1.Y.shape == (101, 1)
    assert np.array_equal(fp1.Y, fp2.Y)


def test_stability_cap_enforced(sincos):
    cfg = SimConfig(n=256, T=1.0, dt_slow=2e-3, substeps=1, seed=1)  # eff step 0.512
    with pytest.raises(ConfigurationError):
        simulate_slow_fast(sincos.spec, cfg)


def test_bad_time_config_rejected():
    with pytest.raises(ConfigurationError):
        SimConfig(n=1, T=1.0, dt_slow=0.3, seed=0)  # T not a multiple of dt
    with pytest.raises(ConfigurationError):
        SimConfig(n=0, T=1.0, dt_slow=0.1, seed=0)
    with pytest.raises(ConfigurationError):
        SimConfig(n=1, T=-1.0, dt_slow=0.1, seed=0)


def test_divergence_reports_first_bad_step():
    model = ModelSpec(
        1, 1,
        b=lambda x, y: np.zeros_like(x),
        sigma=lambda x: np.eye(1),
        h=lambda x, y: y**3,
        eta=lambda x, y: np.eye(1),
        x0=[0.0], y0=[4.0],
    )
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(
        DivergedTrajectoryError
    ) as exc:
        simulate_slow_fast(model, SimConfig(n=50, T=1.0, dt_slow=0.05, substeps=1, seed=2))
    assert exc.value.step >= 1


def test_path_csv_round(sincos, tmp_path):
    cfg = SimConfig(n=4, T=0.1, dt_slow=0.01, substeps=2, seed=6)
    path = simulate_slow_fast(sincos.spec, cfg)
    f = tmp_path / "path.csv"
    path.to_csv(f)
    lines = f.read_text().splitlines()
    assert lines[0] == "t,X_1,Y_1"
    assert len(lines) == cfg.n_steps + 2
    g = tmp_path / "inc.csv"
    path.increments_to_csv(g)
    assert g.read_text().splitlines()[0].startswith("t_left,dW_1,dB_s1_1")
    # byte-identical on re-write
    f2 = tmp_path / "path2.csv"
    simulate_slow_fast(sincos.spec, cfg).to_csv(f2)
    assert f.read_bytes() == f2.read_bytes()
