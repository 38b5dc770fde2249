import numpy as np
import pytest

from twoscale.rng import RngStream
from twoscale.sde import ConfigurationError
from twoscale.ergodics import estimate_invariant
from twoscale.poisson import (
    PoissonParams,
    WeightedFn,
    apply_generator_fast,
    apply_generator_slow,
    check_poisson_residual,
    contraction_factor,
    estimate_corrector,
)


def _coord_fn(A):
    return WeightedFn.build(
        lambda y: y[..., 0], lambda y: np.ones_like(y), A, f_id="y"
    )


def test_weighted_norms_of_coordinate_map(lingauss):
    f = _coord_fn(lingauss.A)
    # sup |y| / (1 + y^2) = 1/2 at y = 1; sup 1 / (1 + y^2) = 1 at y = 0
    assert f.norm_f == pytest.approx(0.5, abs=1e-4)
    assert f.norm_grad == pytest.approx(1.0, abs=1e-9)
    assert f.in_unit_class


def test_norm_scaling_exact(lingauss):
    f = _coord_fn(lingauss.A)
    g = f.scaled(-3.7)
    assert g.norm_f == abs(-3.7) * f.norm_f
    assert g.norm_grad == abs(-3.7) * f.norm_grad
    assert g.normalized().in_unit_class
    assert g.normalized().f_id == g.f_id  # normalization keeps the label


def test_generator_quadratic_drift_condition(sincos):
    # L[y^2] = 1 + 2y(sin z - y) <= beta0 - beta1 y^2 with (2, 1)
    g = lambda y: y[..., 0] ** 2
    gd = lambda y: 2.0 * y
    gh = lambda y: np.full(y.shape[:-1] + (1, 1), 2.0)
    gen = RngStream(3).generator()
    z = gen.uniform(-5, 5, 200)
    y = gen.uniform(-6, 6, 200)
    vals = np.array([
        apply_generator_fast(sincos, [zz], g, np.array([yy]), grad=gd, hess=gh)
        for zz, yy in zip(z, y)
    ]).ravel()
    exact = 1 + 2 * y * (np.sin(z) - y)
    assert np.allclose(vals, exact, atol=1e-12)
    assert np.all(vals <= 2.0 - y**2 + 1e-12)


def test_generator_linear_function_drops_trace_term(sincos):
    g = lambda y: 3.0 * y[..., 0]
    gd = lambda y: np.full_like(y, 3.0)
    gh = lambda y: np.zeros(y.shape[:-1] + (1, 1))
    got = apply_generator_fast(sincos, [0.4], g, np.array([1.2]), grad=gd, hess=gh)
    assert got == pytest.approx(3.0 * (np.sin(0.4) - 1.2))


def test_generator_slow_quadratic(sincos):
    got = apply_generator_slow(
        sincos, np.array([0.8]), np.array([0.5]),
        lambda x: x[..., 0] ** 2,
        grad=lambda x: 2.0 * x,
        hess=lambda x: np.full(x.shape[:-1] + (1, 1), 2.0),
    )
    assert got == pytest.approx(1.0 + 2 * 0.8 * np.cos(0.5))


def test_generator_fd_fallback_matches_analytic(sincos):
    g = lambda y: np.sin(y[..., 0]) + 0.3 * y[..., 0] ** 2
    gd = lambda y: (np.cos(y[..., 0]) + 0.6 * y[..., 0])[..., None]
    gh = lambda y: (-np.sin(y[..., 0]) + 0.6)[..., None, None]
    y = np.array([0.9])
    exact = apply_generator_fast(sincos, [0.2], g, y, grad=gd, hess=gh)
    fd = apply_generator_fast(sincos, [0.2], g, y)
    assert abs(fd - exact) < 1e-6


def test_invariant_kills_generator(sincos):
    # pi^{*,z}[L g] = 0 for smooth test functions
    meas = estimate_invariant(sincos, 0.7, n_samples=4000, dt=0.02, rng=RngStream(5))
    for g, gd, gh in [
        (lambda y: y[..., 0] ** 2, lambda y: 2.0 * y,
         lambda y: np.full(y.shape[:-1] + (1, 1), 2.0)),
        (lambda y: np.sin(y[..., 0]), lambda y: np.cos(y[..., 0])[..., None],
         lambda y: -np.sin(y[..., 0])[..., None, None]),
    ]:
        vals = apply_generator_fast(sincos, [0.7], g, meas.samples, grad=gd, hess=gh)
        est, se = meas.expectation(lambda s, v=vals: v)
        assert abs(est) < 3 * se + 0.02, (est, se)


def test_poisson_params_validation():
    with pytest.raises(ConfigurationError):
        PoissonParams(epsilon=0.0)
    with pytest.raises(ConfigurationError):
        PoissonParams(inner=5)


def test_contraction_factor_small_at_defaults():
    params = PoissonParams()
    assert contraction_factor(params, C=1.0, xi=1.0) < 1.0
    assert contraction_factor(params, C=2.0, xi=1.0) < 1.0


def test_corrector_requires_unit_class(lingauss):
    f = _coord_fn(lingauss.A).scaled(10.0)
    with pytest.raises(ConfigurationError):
        estimate_corrector(lingauss, f, [0.0], [1.0], PoissonParams(), lingauss.invariant, RngStream(1))


def test_corrector_constant_function_is_zero(lingauss):
    c = WeightedFn.build(
        lambda y: np.full(y.shape[:-1], 0.4),
        lambda y: np.zeros_like(y),
        lingauss.A, f_id="const",
    )
    params = PoissonParams(outer=200, inner=4)
    v, se = estimate_corrector(lingauss, c, [0.0], [1.0], params, lingauss.invariant, RngStream(2))
    assert v == pytest.approx(0.0, abs=1e-12)
    assert se == pytest.approx(0.0, abs=1e-12)


def test_corrector_matches_ou_closed_form(lingauss):
    f = _coord_fn(lingauss.A)
    params = PoissonParams(outer=4000, inner=16)
    for i, (z, y) in enumerate([(0.0, 1.0), (0.5, -1.5)]):
        v, se = estimate_corrector(
            lingauss, f, [z], [y], params, lingauss.invariant, RngStream(100 + i), dt=0.02
        )
        closed = -y / (params.lam + 1.0)
        assert abs(v - closed) < 3 * se + 0.02, (z, y, v, closed, se)


def test_corrector_discount_consistency(lingauss):
    # closed form -y/(lam+1): doubling lam scales |V| by (lam+1)/(2lam+1)
    f = _coord_fn(lingauss.A)
    y = 1.5
    v1, s1 = estimate_corrector(
        lingauss, f, [0.0], [y], PoissonParams(lam=0.1, outer=5000), lingauss.invariant,
        RngStream(201), dt=0.02,
    )
    v2, s2 = estimate_corrector(
        lingauss, f, [0.0], [y], PoissonParams(lam=0.2, outer=5000), lingauss.invariant,
        RngStream(202), dt=0.02,
    )
    ratio = v2 / v1
    want = 1.1 / 1.2
    se_ratio = abs(ratio) * np.hypot(s1 / abs(v1), s2 / abs(v2))
    assert abs(ratio - want) < 3 * se_ratio + 0.02


def test_corrector_odd_symmetry_sincos(sincos):
    f = _coord_fn(sincos.A)
    params = PoissonParams(outer=3000, inner=16)
    vp, sp = estimate_corrector(sincos, f, [0.0], [1.2], params, sincos.invariant, RngStream(301))
    vm, sm = estimate_corrector(sincos, f, [0.0], [-1.2], params, sincos.invariant, RngStream(302))
    assert abs(vp + vm) < 3 * np.hypot(sp, sm) + 0.02


def test_corrector_weighted_bound_shadow(sincos):
    # |V(z, y)| / (1 + V(y)) stays bounded over sampled points for unit-class f
    f = _coord_fn(sincos.A)
    params = PoissonParams(outer=1500, inner=8)
    pts = [(0.0, 0.0), (1.0, 2.0), (-2.0, -3.0), (0.5, 4.0)]
    ratios = []
    for i, (z, y) in enumerate(pts):
        v, se = estimate_corrector(sincos, f, [z], [y], params, sincos.invariant, RngStream(400 + i))
        ratios.append(abs(v) / (1.0 + y**2))
    assert max(ratios) < 2.0


def test_residual_exact_closed_form(lingauss):
    f = _coord_fn(lingauss.A)
    params = PoissonParams()
    exact = lambda z, y: (-y[0] / (params.lam + 1.0), 0.0)
    rep = check_poisson_residual(lingauss, f, [0.3], [1.0], params, exact, lingauss.invariant)
    assert rep.verdict == "pass"
    assert abs(rep.residual) < 1e-10
    d = rep.as_dict()
    assert set(d) >= {"residual", "uncertainty", "verdict", "epsilon", "lambda"}


def test_residual_constant_function_trivially_zero(lingauss):
    c = WeightedFn.build(
        lambda y: np.full(y.shape[:-1], 2.0), lambda y: np.zeros_like(y),
        lingauss.A, f_id="const",
    ).normalized()
    params = PoissonParams()
    rep = check_poisson_residual(
        lingauss, c, [0.0], [0.5], params, lambda z, y: (0.0, 0.0), lingauss.invariant
    )
    assert rep.verdict == "pass" and rep.residual == pytest.approx(0.0, abs=1e-12)


def test_residual_detects_wrong_solution(lingauss):
    f = _coord_fn(lingauss.A)
    params = PoissonParams()
    wrong = lambda z, y: (-2.5 * y[0] / (params.lam + 1.0), 1e-4)
    rep = check_poisson_residual(lingauss, f, [0.0], [1.0], params, wrong, lingauss.invariant)
    assert rep.verdict == "fail"


def test_residual_inconclusive_with_huge_noise(lingauss):
    f = _coord_fn(lingauss.A)
    params = PoissonParams()
    gen = RngStream(55).generator()
    noisy = lambda z, y: (-y[0] / 1.1 + gen.normal() * 5.0, 5.0)
    rep = check_poisson_residual(lingauss, f, [0.0], [1.0], params, noisy, lingauss.invariant)
    assert rep.verdict == "inconclusive"


def test_residual_monte_carlo_sincos(sincos):
    f = _coord_fn(sincos.A)
    params = PoissonParams(outer=2500, inner=16)
    counter = [0]

    def v_eval(z, y):
        counter[0] += 1
        return estimate_corrector(
            sincos, f, z, y, params, sincos.invariant, RngStream(600 + counter[0])
        )

    rep = check_poisson_residual(sincos, f, [0.0], [1.0], params, v_eval, sincos.invariant)
    assert rep.verdict == "pass", rep.as_dict()
