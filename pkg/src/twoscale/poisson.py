"""Weighted norms, the smoothed-discounted corrector, and generator checks.

For a test function f of the fast variable, the corrector V_f(z, y) solves
the perturbed Poisson equation

    eps * lap_z V + L^z[V(z, .)](y) - lam * V = f(y) - pi^{*,z}[f]

where L^z is the Ito generator of the frozen diffusion.  V_f has the
randomized Feynman-Kac representation

    V_f(z, y) = -E[ (1/lam) * H_t(zbar, y) ],   t ~ Exp(lam),
                zbar ~ N(z, 2 eps t I),
    H_t(zbar, y) = E[f(Y_t) | Y_0 = y, frozen at zbar] - pi^{*,zbar}[f],

which is estimated by outer sampling of (t, zbar) and inner Monte Carlo
over antithetic frozen paths.  Norms are weighted by 1 + <y, Ay> with A the
Lyapunov matrix of the stability certificate.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .rng import RngStream
from .sde import ConfigurationError, frozen_terminal_batch
from .models import as_spec

__all__ = [
    "WeightedFn",
    "PoissonParams",
    "ResidualReport",
    "apply_generator_fast",
    "apply_generator_slow",
    "estimate_corrector",
    "check_poisson_residual",
    "contraction_factor",
]


def _norm_sample(q: int, radius: float) -> np.ndarray:
    """Deterministic point set over which weighted sups are estimated."""
    if q == 1:
        return np.linspace(-radius, radius, 4001)[:, None]
    gen = RngStream(1234).generator()
    u = gen.standard_normal((8192, q))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    r = radius * gen.uniform(0, 1, 8192) ** (1.0 / q)
    pts = u * r[:, None]
    axes = np.concatenate([np.eye(q) * t for t in np.linspace(-radius, radius, 81)])
    return np.vstack([pts, axes, np.zeros((1, q))])


@dataclass(frozen=True)
class WeightedFn:
    """A differentiable test function with Lyapunov-weighted sup norms.

    ``norm_f`` and ``norm_grad`` are sups of |f| / (1 + V) and
    ||grad f|| / (1 + V) over the declared sample region (V(y) = <y, Ay>).
    Constants are the zero element of the function class: they carry zero
    deviation from any invariant average.
    """

    fn: Callable
    grad: Callable
    A: np.ndarray
    norm_f: float
    norm_grad: float
    region_radius: float
    f_id: str = "f"

    @classmethod
    def build(
        cls,
        fn: Callable,
        grad: Callable,
        A,
        region_radius: float = 12.0,
        f_id: str = "f",
    ) -> "WeightedFn":
        A = np.atleast_2d(np.asarray(A, float))
        pts = _norm_sample(A.shape[0], region_radius)
        w = 1.0 + np.einsum("ij,ij->i", pts @ A.T, pts)
        nf = float(np.max(np.abs(np.asarray(fn(pts), float)) / w))
        ng = float(np.max(np.linalg.norm(np.asarray(grad(pts), float), axis=-1) / w))
        return cls(fn, grad, A, nf, ng, region_radius, f_id)

    @property
    def in_unit_class(self) -> bool:
        return self.norm_f <= 1.0 + 1e-12 and self.norm_grad <= 1.0 + 1e-12

    def weight(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, float)
        return np.einsum("...i,...i->...", y @ self.A.T, y)

    def scaled(self, c: float) -> "WeightedFn":
        """Scalar multiple; weighted norms scale exactly by |c|."""
        fn, grad = self.fn, self.grad
        return replace(
            self,
            fn=lambda y: c * fn(y),
            grad=lambda y: c * grad(y),
            norm_f=abs(c) * self.norm_f,
            norm_grad=abs(c) * self.norm_grad,
            f_id=f"{c}*{self.f_id}",
        )

    def normalized(self) -> "WeightedFn":
        """Rescale into the unit class (both weighted norms <= 1)."""
        s = max(self.norm_f, self.norm_grad)
        if s == 0:
            return self
        return replace(self.scaled(1.0 / s), f_id=self.f_id)


@dataclass(frozen=True)
class PoissonParams:
    """Perturbation and Monte Carlo budget for the corrector estimator."""

    epsilon: float = 0.01
    lam: float = 0.1
    outer: int = 4000
    inner: int = 16

    def __post_init__(self):
        if self.epsilon <= 0 or self.lam <= 0:
            raise ConfigurationError("epsilon and lambda must be strictly positive")
        if self.inner % 2:
            raise ConfigurationError("inner replica count must be even (antithetic pairs)")


def contraction_factor(params: PoissonParams, C: float, xi: float) -> float:
    """Numerical check that (epsilon, lambda) sit in the contractive regime.

    Uses the fitted ergodic envelope constants (C, xi); values < 1 certify
    the perturbation terms are dominated.
    """
    lam, eps = params.lam, params.epsilon
    t1 = C * lam * max(
        1.0 / (lam + xi), (1 - np.exp(-lam)) / lam + np.exp(-(lam + xi)) / (lam + xi)
    )
    t2 = C * eps * (1.0 / np.sqrt(eps) + np.exp(-(lam + xi)) / (np.sqrt(eps) * (lam + xi)))
    return float(t1 + t2)


def _fd_grad(g: Callable, y: np.ndarray, step: float) -> np.ndarray:
    y = np.asarray(y, float)
    q = y.shape[-1]
    out = np.empty(y.shape)
    for j in range(q):
        e = np.zeros(q)
        e[j] = step
        out[..., j] = (np.asarray(g(y + e)) - np.asarray(g(y - e))) / (2 * step)
    return out


def _fd_hess(g: Callable, y: np.ndarray, step: float) -> np.ndarray:
    y = np.asarray(y, float)
    q = y.shape[-1]
    out = np.empty(y.shape + (q,))
    g0 = np.asarray(g(y), float)
    for j in range(q):
        ej = np.zeros(q)
        ej[j] = step
        out[..., j, j] = (np.asarray(g(y + ej)) - 2 * g0 + np.asarray(g(y - ej))) / step**2
        for i in range(j + 1, q):
            ei = np.zeros(q)
            ei[i] = step
            mixed = (
                np.asarray(g(y + ei + ej))
                - np.asarray(g(y + ei - ej))
                - np.asarray(g(y - ei + ej))
                + np.asarray(g(y - ei - ej))
            ) / (4 * step**2)
            out[..., i, j] = mixed
            out[..., j, i] = mixed
    return out


def apply_generator_fast(
    model,
    z,
    g: Callable,
    y,
    grad: Optional[Callable] = None,
    hess: Optional[Callable] = None,
    fd_step: float = 1e-4,
):
    """Ito generator of the frozen fast diffusion applied to g at y.

    Returns 0.5 Tr(eta eta^T(z, y) D^2 g(y)) + h(z, y) . grad g(y); finite
    differences with the declared step stand in for missing derivative
    evaluators.  Broadcasts over leading axes of y.
    """
    spec = as_spec(model)
    z = np.atleast_1d(np.asarray(z, float))
    y = np.asarray(y, float)
    gv = np.asarray(grad(y), float) if grad else _fd_grad(g, y, fd_step)
    hv = np.asarray(hess(y), float) if hess else _fd_hess(g, y, fd_step)
    eta = np.asarray(spec.eta(z, y), float)
    a = np.einsum("...ij,...kj->...ik", eta, eta)
    trace = np.einsum("...ij,...ji->...", a, hv)
    drift = np.einsum("...i,...i->...", np.asarray(spec.h(z, y), float), gv)
    return 0.5 * trace + drift


def apply_generator_slow(
    model,
    z,
    y,
    g: Callable,
    grad: Optional[Callable] = None,
    hess: Optional[Callable] = None,
    fd_step: float = 1e-4,
):
    """Generator of the slow equation (fast state held at y) applied to g at z."""
    spec = as_spec(model)
    z = np.asarray(z, float)
    y = np.atleast_1d(np.asarray(y, float))
    gv = np.asarray(grad(z), float) if grad else _fd_grad(g, z, fd_step)
    hv = np.asarray(hess(z), float) if hess else _fd_hess(g, z, fd_step)
    sig = np.asarray(spec.sigma(z), float)
    a = np.einsum("...ij,...kj->...ik", sig, sig)
    trace = np.einsum("...ij,...ji->...", a, hv)
    drift = np.einsum("...i,...i->...", np.asarray(spec.b(z, y), float), gv)
    return 0.5 * trace + drift


def estimate_corrector(
    model,
    f: WeightedFn,
    z,
    y,
    params: PoissonParams,
    invariant,
    rng: RngStream,
    dt: Optional[float] = None,
    se_tolerance: Optional[float] = None,
) -> tuple[float, float]:
    """Randomized Feynman-Kac estimate of the corrector V_f(z, y).

    Outer samples draw t ~ Exp(lam) and zbar ~ N(z, 2 eps t I); each outer
    sample runs ``params.inner`` antithetic frozen paths from y to time t at
    parameter zbar and averages f minus the invariant expectation at zbar.
    The estimate is -(1/lam) times the outer average.
    """
    spec = as_spec(model)
    if not f.in_unit_class:
        raise ConfigurationError(
            "test function lies outside the unit weighted class; call .normalized() first"
        )
    if invariant is None or not hasattr(invariant, "expectation_along"):
        raise ConfigurationError("corrector estimation needs an invariant-family oracle")
    cap = spec.stability_cap if spec.stability_cap is not None else 0.1
    dt = dt if dt is not None else cap / 5.0
    z = np.atleast_1d(np.asarray(z, float))
    y = np.atleast_1d(np.asarray(y, float))
    O, R = params.outer, params.inner

    gen = rng.substream(0).generator()
    t = gen.exponential(scale=1.0 / params.lam, size=O)
    zbar = z[None, :] + np.sqrt(2.0 * params.epsilon * t)[:, None] * gen.standard_normal(
        (O, spec.p)
    )
    steps = np.round(t / dt).astype(int)

    z_rows = np.repeat(zbar, R, axis=0)
    step_rows = np.repeat(steps, R)
    yT = frozen_terminal_batch(
        spec, z_rows, y, step_rows, dt, rng.substream(1), antithetic_pairs=True
    )
    fvals = np.asarray(f.fn(yT), float).reshape(O, R).mean(axis=1)
    pif = invariant.expectation_along(f.fn, zbar)
    H = fvals - pif
    v = -H.mean() / params.lam
    se = H.std(ddof=1) / np.sqrt(O) / params.lam
    if se_tolerance is not None and se > se_tolerance:
        warnings.warn(
            f"corrector SE {se:.3g} exceeds requested tolerance {se_tolerance:.3g}; "
            "increase the outer budget"
        )
    return float(v), float(se)


@dataclass(frozen=True)
class ResidualReport:
    """Finite-difference residual of the perturbed Poisson equation."""

    z: np.ndarray
    y: np.ndarray
    epsilon: float
    lam: float
    residual: float
    uncertainty: float
    verdict: str  # pass | fail | inconclusive
    v_center: float
    rhs: float

    def as_dict(self) -> dict:
        return {
            "z": np.asarray(self.z).tolist(),
            "y": np.asarray(self.y).tolist(),
            "epsilon": self.epsilon,
            "lambda": self.lam,
            "residual": self.residual,
            "uncertainty": self.uncertainty,
            "verdict": self.verdict,
            "v_center": self.v_center,
            "rhs": self.rhs,
        }


def check_poisson_residual(
    model,
    f: WeightedFn,
    z,
    y,
    params: PoissonParams,
    v_evaluator: Callable,
    invariant,
    dz: float = 0.4,
    dy: float = 0.4,
) -> ResidualReport:
    """Check eps lap_z V + L^z V - lam V = f - pi[f] by central differences.

    ``v_evaluator(z, y) -> (value, se)`` supplies corrector estimates at the
    stencil points (independent noise per point assumed; uncertainties are
    propagated linearly).  Passes when |residual| <= 3x its uncertainty,
    fails when larger, and is inconclusive when the uncertainty itself
    dwarfs the equation's right-hand side.

    The fast diffusion matrix eta eta^T must be diagonal at (z, y); the
    stencil omits mixed second differences.
    """
    spec = as_spec(model)
    z = np.atleast_1d(np.asarray(z, float))
    y = np.atleast_1d(np.asarray(y, float))
    p, q = spec.p, spec.q

    eta = np.asarray(spec.eta(z, y), float)
    a = eta @ eta.T
    if np.max(np.abs(a - np.diag(np.diag(a)))) > 1e-10:
        raise ConfigurationError("residual stencil requires diagonal eta eta^T")
    hvec = np.asarray(spec.h(z, y), float)

    # linear combination sum(coef * V(point)); uncertainties add in quadrature
    terms: list[tuple[np.ndarray, np.ndarray, float]] = []

    def add(zz, yy, coef):
        terms.append((np.asarray(zz, float), np.asarray(yy, float), float(coef)))

    add(z, y, -params.lam)
    for i in range(p):
        e = np.zeros(p)
        e[i] = dz
        add(z + e, y, params.epsilon / dz**2)
        add(z - e, y, params.epsilon / dz**2)
        add(z, y, -2.0 * params.epsilon / dz**2)
    for j in range(q):
        e = np.zeros(q)
        e[j] = dy
        diff_c = 0.5 * a[j, j] / dy**2
        add(z, y + e, diff_c)
        add(z, y - e, diff_c)
        add(z, y, -2.0 * diff_c)
        add(z, y + e, hvec[j] / (2 * dy))
        add(z, y - e, -hvec[j] / (2 * dy))

    # evaluate each distinct stencil point once
    cache: dict[tuple, tuple[float, float]] = {}
    total, var = 0.0, 0.0
    coefs: dict[tuple, float] = {}
    for zz, yy, coef in terms:
        key = (tuple(np.round(zz, 12)), tuple(np.round(yy, 12)))
        coefs[key] = coefs.get(key, 0.0) + coef
        if key not in cache:
            cache[key] = v_evaluator(zz, yy)
    for key, coef in coefs.items():
        val, se = cache[key]
        total += coef * val
        var += (coef * se) ** 2

    pif = float(invariant.expectation(f.fn, z))
    rhs = float(np.asarray(f.fn(y[None, :]), float)[0] - pif)
    residual = total - rhs
    uncertainty = float(np.sqrt(var))
    v_center = cache[(tuple(np.round(z, 12)), tuple(np.round(y, 12)))][0]

    if uncertainty > max(abs(rhs), abs(params.lam * v_center), 1e-9) and abs(rhs) > 0:
        verdict = "inconclusive"
    elif abs(residual) <= 3.0 * uncertainty + 1e-12:
        verdict = "pass"
    else:
        verdict = "fail"
    return ResidualReport(
        z=z, y=y, epsilon=params.epsilon, lam=params.lam,
        residual=float(residual), uncertainty=uncertainty, verdict=verdict,
        v_center=float(v_center), rhs=rhs,
    )
