"""Particle approximation of the conditional law of the fast state.

A bootstrap filter tracks the conditional distribution of Y given the
observed slow path: per slow step, particles are propagated through the
fast dynamics (micro-stepped Euler with the slow state frozen at the left
endpoint), reweighted by the Gaussian Euler transition likelihood of the
observed slow increment, and systematically resampled when the effective
sample size drops below a threshold.

Innovation increments

    dI_k = sigma(X_k)^{-1} (dX_k - pihat_k[b(X_k, .)] dt)

are computed from the time-t_k cloud, before that step's reweighting and
resampling, so resampling noise never enters the innovation process.

All filter state is batched over replicas: a single observed path is the
R = 1 case of the same lockstep kernel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .rng import RngStream
from .sde import ConfigurationError, PathBundle, SimConfig, broadcast_coeff, micro_advance
from .models import BuiltinModel, KalmanParams, as_spec

__all__ = [
    "ParticleCloud",
    "InnovationPath",
    "FilterTrace",
    "FilterBatchResult",
    "FilterDegeneracyError",
    "KalmanTrace",
    "run_particle_filter",
    "run_filter_batch",
    "kalman_bucy_oracle",
    "filter_expectation",
]


_LOG_WEIGHT_FLOOR = float(np.log(1e-300))


class FilterDegeneracyError(RuntimeError):
    """All particle weights collapsed (below 1e-300)."""

    def __init__(self, step: int, replicas=None):
        self.step = step
        self.replicas = replicas
        msg = f"particle weights collapsed at slow step {step}"
        if replicas is not None:
            msg += f" (replicas {np.asarray(replicas).ravel()[:8]})"
        super().__init__(msg)


@dataclass(frozen=True)
class ParticleCloud:
    """Weighted particle approximation of the conditional law at one time."""

    particles: np.ndarray
    weights: np.ndarray
    t: float

    def __post_init__(self):
        w = np.asarray(self.weights, float)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ConfigurationError("weights must be nonnegative and sum to 1")

    @property
    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights**2))


@dataclass(frozen=True)
class InnovationPath:
    """Grid-aligned innovation increments and their running sum."""

    grid: np.ndarray
    dI: np.ndarray

    @property
    def I(self) -> np.ndarray:
        out = np.zeros((len(self.grid), self.dI.shape[1]))
        np.cumsum(self.dI, axis=0, out=out[1:])
        return out

    def quadratic_variation(self) -> np.ndarray:
        """Per-coordinate quadratic variation over the full horizon."""
        return (self.dI**2).sum(axis=0)


@dataclass(frozen=True)
class FilterTrace:
    """Per-step filter summaries along one observed path."""

    grid: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    ess: np.ndarray
    drift_means: np.ndarray
    clouds: Optional[tuple] = None
    extras: dict = field(default_factory=dict)

    def to_csv(self, path, innovations: Optional[InnovationPath] = None) -> None:
        q = self.means.shape[1]
        header = (
            ["t", "ess"]
            + [f"mean_{j+1}" for j in range(q)]
            + [f"var_{j+1}" for j in range(q)]
        )
        cols = [self.grid, self.ess, self.means, self.variances]
        if innovations is not None:
            p = innovations.dI.shape[1]
            header += [f"dI_{i+1}" for i in range(p)]
            padded = np.vstack([innovations.dI, np.full((1, p), np.nan)])
            cols.append(padded)
        from .sde import _write_csv

        _write_csv(path, header, np.column_stack(cols))


@dataclass(frozen=True)
class FilterBatchResult:
    """Stacked filter output over a replica batch."""

    grid: np.ndarray
    dI: np.ndarray            # (R, M, p)
    drift_means: np.ndarray   # (R, M, p)
    means: np.ndarray         # (R, M+1, q)
    variances: np.ndarray     # (R, M+1, q)
    ess: np.ndarray           # (R, M+1)
    extras: dict              # fid -> (R, M+1)


def _systematic_resample_rows(weights: np.ndarray, gen: np.random.Generator) -> np.ndarray:
    """Systematic resampling indices for each row of a (K, N) weight array."""
    K, N = weights.shape
    u0 = gen.uniform(size=K)
    positions = (np.arange(N)[None, :] + u0[:, None]) / N
    cum = np.cumsum(weights, axis=1)
    cum[:, -1] = 1.0
    offsets = np.arange(K, dtype=float)[:, None]
    flat_idx = np.searchsorted((cum + offsets).ravel(), (positions + offsets).ravel())
    local = flat_idx - np.repeat(np.arange(K), N) * N
    return np.clip(local.reshape(K, N), 0, N - 1)


def run_filter_batch(
    model,
    X_paths: np.ndarray,
    cfg: SimConfig,
    n_particles: int,
    resample_threshold: float = 0.5,
    rng: Optional[RngStream] = None,
    trace_fns: Optional[Sequence[tuple[str, Callable]]] = None,
    return_clouds: bool = False,
    track_moments: bool = True,
) -> FilterBatchResult | tuple[FilterBatchResult, list]:
    """Bootstrap filter over a batch of observed slow paths in lockstep.

    ``X_paths`` has shape (R, M+1, p) on the grid implied by ``cfg``.
    ``trace_fns`` are scalar test functions of the fast state whose filter
    expectations are recorded at every step (including t = 0).  Rate sweeps
    that only need innovations can pass ``track_moments=False`` to skip the
    per-step mean/variance summaries.
    """
    spec = as_spec(model)
    X_paths = np.asarray(X_paths, float)
    R, Mp1, p = X_paths.shape
    M = Mp1 - 1
    if M != cfg.n_steps or p != spec.p:
        raise ConfigurationError("observed paths do not match the configuration grid")
    q, N = spec.q, n_particles
    dt = cfg.dt_slow
    rng = rng or RngStream(cfg.seed).substream(101)
    gen = rng.generator()
    trace_fns = list(trace_fns or [])

    P = np.tile(spec.y0, (R, N, 1))
    logw = np.zeros((R, N))
    w = np.full((R, N), 1.0 / N)

    out = FilterBatchResult(
        grid=cfg.grid(),
        dI=np.empty((R, M, p)),
        drift_means=np.empty((R, M, p)),
        means=np.empty((R, M + 1, q)),
        variances=np.empty((R, M + 1, q)),
        ess=np.empty((R, M + 1)),
        extras={fid: np.empty((R, M + 1)) for fid, _ in trace_fns},
    )
    clouds: list = []

    def _summaries(k: int) -> None:
        if track_moments:
            mu = np.einsum("rn,rnq->rq", w, P)
            out.means[:, k, :] = mu
            out.variances[:, k, :] = np.einsum("rn,rnq->rq", w, P**2) - mu**2
        out.ess[:, k] = 1.0 / np.einsum("rn,rn->r", w, w)
        for fid, f in trace_fns:
            out.extras[fid][:, k] = np.einsum("rn,rn->r", w, np.asarray(f(P), float))
        if return_clouds:
            clouds.append(ParticleCloud(P[0].copy(), w[0].copy(), k * dt))

    _summaries(0)

    sigma_const = np.asarray(spec.sigma(spec.x0), float)
    const_sigma = sigma_const.ndim == 2

    for k in range(M):
        Xk = X_paths[:, k, :]
        dX = X_paths[:, k + 1, :] - Xk
        xk_b = Xk[:, None, :]

        # innovation from the time-t_k cloud, before propagation/reweighting
        b_cur = broadcast_coeff(spec.b(xk_b, P), (R, N), p)
        pib = np.einsum("rn,rnp->rp", w, b_cur)
        resid = dX - pib * dt
        if const_sigma:
            if p == 1:
                dI_k = resid / sigma_const[0, 0]
            else:
                dI_k = np.linalg.solve(sigma_const, resid.T).T
        else:
            sig = np.asarray(spec.sigma(Xk), float)
            dI_k = np.linalg.solve(sig, resid[..., None])[..., 0]
        out.drift_means[:, k, :] = pib
        out.dI[:, k, :] = dI_k

        # propagate through the fast dynamics with X frozen at the left endpoint
        P = micro_advance(spec, xk_b, P, cfg.n, cfg.dt_fast, cfg.substeps, gen)

        # reweight by the Euler transition likelihood of the observed increment
        b_new = broadcast_coeff(spec.b(xk_b, P), (R, N), p)
        innov = dX[:, None, :] - b_new * dt
        if const_sigma:
            cov = sigma_const @ sigma_const.T * dt
            if p == 1:
                ll = -0.5 * innov[..., 0] ** 2 / cov[0, 0]
            else:
                sol = np.linalg.solve(cov, innov[..., None])[..., 0]
                ll = -0.5 * np.einsum("rnp,rnp->rn", innov, sol)
        else:
            sig = np.asarray(spec.sigma(Xk), float)
            cov = np.einsum("rij,rkj->rik", sig, sig) * dt
            sol = np.linalg.solve(cov[:, None, :, :], innov[..., None])[..., 0]
            ll = -0.5 * np.einsum("rnp,rnp->rn", innov, sol)

        logw += ll
        peak = logw.max(axis=1, keepdims=True)
        # log-weights are re-centered each step, so a peak below the linear
        # floor means every particle's weight collapsed (all < 1e-300)
        dead = ~np.isfinite(peak[:, 0]) | (peak[:, 0] < _LOG_WEIGHT_FLOOR)
        if np.any(dead):
            raise FilterDegeneracyError(k + 1, replicas=np.nonzero(dead)[0])
        logw -= peak
        np.exp(logw, out=w)
        w /= w.sum(axis=1, keepdims=True)

        _summaries(k + 1)

        ess = out.ess[:, k + 1]
        need = np.nonzero(ess < resample_threshold * N)[0]
        if len(need):
            idx = _systematic_resample_rows(w[need], gen)
            P[need] = np.take_along_axis(P[need], idx[..., None], axis=1)
            logw[need] = 0.0
            w[need] = 1.0 / N

    if return_clouds:
        return out, clouds
    return out


def run_particle_filter(
    model,
    path: PathBundle,
    n_particles: int,
    resample_threshold: float = 0.5,
    rng: Optional[RngStream] = None,
    trace_fns: Optional[Sequence[tuple[str, Callable]]] = None,
    store_clouds: bool = True,
) -> tuple[FilterTrace, InnovationPath]:
    """Filter one observed slow path; see :func:`run_filter_batch`.

    The path must carry its generating SimConfig (simulate_slow_fast sets
    it) so the filter knows the scale parameter and micro-stepping.
    """
    if path.cfg is None:
        raise ConfigurationError("path carries no SimConfig; filter needs n and substeps")
    res = run_filter_batch(
        model,
        path.X[None, :, :],
        path.cfg,
        n_particles,
        resample_threshold=resample_threshold,
        rng=rng,
        trace_fns=trace_fns,
        return_clouds=store_clouds,
    )
    if store_clouds:
        res, clouds = res
    trace = FilterTrace(
        grid=res.grid,
        means=res.means[0],
        variances=res.variances[0],
        ess=res.ess[0],
        drift_means=res.drift_means[0],
        clouds=tuple(clouds) if store_clouds else None,
        extras={fid: tr[0] for fid, tr in res.extras.items()},
    )
    return trace, InnovationPath(grid=res.grid, dI=res.dI[0])


def filter_expectation(cloud: ParticleCloud, f: Callable) -> tuple[float, float]:
    """Weighted particle expectation with a delta-method standard error."""
    vals = np.asarray(f(cloud.particles), float)
    if not np.all(np.isfinite(vals)):
        raise ConfigurationError("test function not finite on the particle support")
    est = float(cloud.weights @ vals)
    se = float(np.sqrt(np.sum(cloud.weights**2 * (vals - est) ** 2)))
    return est, se


@dataclass(frozen=True)
class KalmanTrace:
    """Exact conditional mean/variance for scalar linear-Gaussian models."""

    grid: np.ndarray
    mean: np.ndarray
    var: np.ndarray

    def stationary_var(self) -> float:
        return float(self.var[-1])


def riccati_stationary(n: int, params: KalmanParams) -> float:
    """Positive root of 0 = 2 n a P + n eta^2 - P^2 c^2 / sigma^2."""
    a, c, s, e = params.a, params.c, params.sigma, params.eta
    if c == 0:
        if a >= 0:
            raise ConfigurationError("no stationary variance for c=0, a>=0")
        return e**2 / (-2.0 * a)
    g = c**2 / s**2
    disc = (n * a) ** 2 + g * n * e**2
    return float((n * a + np.sqrt(disc)) / g)


def kalman_bucy_oracle(
    model,
    path: PathBundle,
    params: Optional[KalmanParams] = None,
    riccati_substeps: int = 24,
) -> KalmanTrace:
    """Integrate the exact scalar Kalman-Bucy filter along an observed path.

    dm = n (a m + g(X)) dt + (P c / sigma^2)(dX - (c m + d(X)) dt)
    dP/dt = 2 n a P + n eta^2 - P^2 c^2 / sigma^2,  m_0 = y0, P_0 = 0.

    The variance ODE is integrated with RK4 sub-steps inside each slow step;
    the mean update is Euler on the observation grid with the left-endpoint
    gain.  Models that are not scalar linear-Gaussian are rejected.
    """
    spec = as_spec(model)
    if params is None:
        params = model.kalman if isinstance(model, BuiltinModel) else None
    if params is None:
        raise ConfigurationError("model is not linear-Gaussian: no Kalman-Bucy closed form")
    if spec.p != 1 or spec.q != 1:
        raise ConfigurationError("Kalman-Bucy oracle implemented for p = q = 1")
    if path.cfg is None:
        raise ConfigurationError("path carries no SimConfig")
    n = path.cfg.n
    dt = path.cfg.dt_slow
    a, c, s, e = params.a, params.c, params.sigma, params.eta
    M = path.n_steps

    mean = np.empty(M + 1)
    var = np.empty(M + 1)
    mean[0] = spec.y0[0]
    var[0] = 0.0

    def pdot(pv: float) -> float:
        return 2 * n * a * pv + n * e**2 - pv**2 * c**2 / s**2

    h = dt / riccati_substeps
    gfun = params.g or (lambda x: 0.0)
    dfun = params.d or (lambda x: 0.0)
    for k in range(M):
        x = path.X[k, 0]
        dx = path.X[k + 1, 0] - x
        gain = var[k] * c / s**2
        mean[k + 1] = (
            mean[k]
            + n * (a * mean[k] + gfun(x)) * dt
            + gain * (dx - (c * mean[k] + dfun(x)) * dt)
        )
        pv = var[k]
        for _ in range(riccati_substeps):
            k1 = pdot(pv)
            k2 = pdot(pv + 0.5 * h * k1)
            k3 = pdot(pv + 0.5 * h * k2)
            k4 = pdot(pv + h * k3)
            pv += h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        var[k + 1] = pv
        if var[k + 1] <= 0:
            raise ConfigurationError(f"conditional variance left (0, inf) at step {k + 1}")
    return KalmanTrace(grid=path.grid, mean=mean, var=var)
