"""Convergence-rate estimators: coupled strong error, weak error, measure gap.

The strong study couples the slow-fast path X^n to the averaged path X^{*,n}
through the filter's innovation increments, exactly the construction whose
mean-square gap decays like 1/n.  The weak study compares expectations of
smooth test functions of X^n against the averaged limit under common slow
noise (a common-random-numbers estimator; an independent-ensemble mode is
available for A/B comparison).  All error points carry standard errors and
rate fits are weighted log-log regressions.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .rng import RngStream
from .sde import ConfigurationError, SimConfig, simulate_ensemble, simulate_paths_batch
from .models import BuiltinModel, as_spec, certificate_of
from .averaging import AveragedDrift, integrate_averaged_batch
from .filtering import FilterTrace, run_filter_batch
from .poisson import WeightedFn

__all__ = [
    "TestDictionary",
    "PhiFn",
    "RateFit",
    "fit_rate",
    "integrated_moment_gap",
    "drift_gap_diagnostic",
    "CoupledRunStats",
    "CoupledStudyResult",
    "coupled_study",
    "strong_error",
    "common_noise_strong_error",
    "WeakErrorResult",
    "resolve_weak_branch",
    "weak_error",
]


# ---------------------------------------------------------------------------
# test dictionaries

@dataclass(frozen=True)
class PhiFn:
    """Smooth bounded observable of the slow state with derivative evaluators."""

    f_id: str
    fn: Callable
    grad: Callable
    hess: Callable


def _default_phis(p: int) -> list[PhiFn]:
    u = np.full(p, 1.0 / np.sqrt(p))

    def s(x):
        return np.asarray(x, float) @ u

    def cos_fn(x):
        return np.cos(s(x))

    def cos_grad(x):
        return -np.sin(s(x))[..., None] * u

    def cos_hess(x):
        return -np.cos(s(x))[..., None, None] * np.outer(u, u)

    def inv_fn(x):
        return 1.0 / (1.0 + (np.asarray(x, float) ** 2).sum(-1))

    def inv_grad(x):
        x = np.asarray(x, float)
        d = (1.0 + (x**2).sum(-1))[..., None]
        return -2.0 * x / d**2

    def inv_hess(x):
        x = np.asarray(x, float)
        r2 = (x**2).sum(-1)
        d = 1.0 + r2
        eye = np.eye(p)
        return (-2.0 / d**2)[..., None, None] * eye + (8.0 / d**3)[..., None, None] * (
            x[..., :, None] * x[..., None, :]
        )

    def tp_fn(x):
        v = s(x)
        return np.tanh(v) * np.tanh(v / 2)

    def tp_grad(x):
        v = s(x)
        t1, t2 = np.tanh(v), np.tanh(v / 2)
        dv = (1 - t1**2) * t2 + 0.5 * t1 * (1 - t2**2)
        return dv[..., None] * u

    def tp_hess(x):
        v = s(x)
        t1, t2 = np.tanh(v), np.tanh(v / 2)
        d2 = (
            -2 * t1 * (1 - t1**2) * t2
            + (1 - t1**2) * (1 - t2**2)
            - 0.5 * t1 * t2 * (1 - t2**2)
        )
        return d2[..., None, None] * np.outer(u, u)

    return [
        PhiFn("cos(s)", cos_fn, cos_grad, cos_hess),
        PhiFn("1/(1+|x|^2)", inv_fn, inv_grad, inv_hess),
        PhiFn("tanh(s)tanh(s/2)", tp_fn, tp_grad, tp_hess),
    ]


def _default_fast_fns(A: np.ndarray, q: int) -> list[WeightedFn]:
    u = np.full(q, 1.0 / np.sqrt(q))
    A = np.atleast_2d(np.asarray(A, float))
    fns: list[WeightedFn] = []
    for k in (0.5, 1.0, 2.0):
        fns.append(
            WeightedFn.build(
                lambda y, k=k: np.sin(k * (np.asarray(y, float) @ u)),
                lambda y, k=k: k * np.cos(k * (np.asarray(y, float) @ u))[..., None] * u,
                A,
                f_id=f"sin({k}s)",
            )
        )
        fns.append(
            WeightedFn.build(
                lambda y, k=k: np.cos(k * (np.asarray(y, float) @ u)),
                lambda y, k=k: -k * np.sin(k * (np.asarray(y, float) @ u))[..., None] * u,
                A,
                f_id=f"cos({k}s)",
            )
        )
    for j in range(q):
        def coord(y, j=j):
            y = np.asarray(y, float)
            return y[..., j] / (1.0 + np.einsum("...i,...i->...", y @ A.T, y))

        def coord_grad(y, j=j):
            y = np.asarray(y, float)
            w = 1.0 + np.einsum("...i,...i->...", y @ A.T, y)
            ej = np.zeros(q)
            ej[j] = 1.0
            return ej / w[..., None] - (2.0 * y[..., j : j + 1] / w[..., None] ** 2) * (y @ A.T)

        fns.append(WeightedFn.build(coord, coord_grad, A, f_id=f"y{j+1}/(1+V)"))
    return [f.normalized() for f in fns]


@dataclass(frozen=True)
class TestDictionary:
    """Normalized fast-space test functions plus smooth slow-space observables."""

    __test__ = False  # not a pytest class despite the name

    fast_fns: tuple
    phis: tuple

    @classmethod
    def default(cls, model) -> "TestDictionary":
        spec = as_spec(model)
        cert = certificate_of(model)
        A = cert[0] if cert else np.eye(spec.q)
        return cls(
            fast_fns=tuple(_default_fast_fns(A, spec.q)),
            phis=tuple(_default_phis(spec.p)),
        )

    def restricted(self, f_ids: Sequence[str]) -> "TestDictionary":
        return TestDictionary(
            fast_fns=tuple(f for f in self.fast_fns if f.f_id in f_ids),
            phis=self.phis,
        )


# ---------------------------------------------------------------------------
# rate fitting

@dataclass(frozen=True)
class RateFit:
    """Weighted log-log regression of error against the scale parameter."""

    ns: np.ndarray
    errors: np.ndarray
    ses: np.ndarray
    slope: float
    intercept: float
    slope_se: float
    ci_lo: float
    ci_hi: float
    r2: float
    points_used: int

    def summary(self) -> dict:
        return {
            "slope": self.slope,
            "intercept": self.intercept,
            "slope_se": self.slope_se,
            "ci_lo": self.ci_lo,
            "ci_hi": self.ci_hi,
            "r2": self.r2,
            "points_used": self.points_used,
        }

    def to_csv(self, path) -> None:
        from .sde import _write_csv

        _write_csv(path, ["n", "error", "stderr"], np.column_stack([self.ns, self.errors, self.ses]))


def fit_rate(ns, errors, ses=None) -> RateFit:
    """Fit log(error) = intercept + slope * log(n) by weighted least squares.

    Weights come from the SE of each log-error; with all-zero SEs the fit is
    ordinary least squares.  The 95% CI uses the weight-propagated parameter
    variance, inflated by the residual chi-square when the scatter exceeds
    the declared errors.
    """
    ns = np.asarray(ns, float)
    errors = np.asarray(errors, float)
    ses = np.zeros_like(errors) if ses is None else np.asarray(ses, float)
    if len(ns) < 4:
        raise ConfigurationError("rate fit needs at least 4 points")
    if np.any(errors <= 0) or not np.all(np.isfinite(errors)):
        raise ConfigurationError("rate fit needs strictly positive finite errors")

    x = np.log(ns)
    yv = np.log(errors)
    selog = np.divide(ses, errors, out=np.zeros_like(ses), where=errors > 0)
    if np.all(selog == 0):
        w = np.ones_like(x)
        known_var = False
    else:
        w = 1.0 / np.maximum(selog, 1e-12) ** 2
        known_var = True

    W = w.sum()
    xbar = (w * x).sum() / W
    ybar = (w * yv).sum() / W
    sxx = (w * (x - xbar) ** 2).sum()
    slope = (w * (x - xbar) * (yv - ybar)).sum() / sxx
    intercept = ybar - slope * xbar
    resid = yv - (intercept + slope * x)
    dof = len(ns) - 2
    chi2 = (w * resid**2).sum()
    if known_var:
        var_slope = 1.0 / sxx
        var_slope *= max(1.0, chi2 / dof)
    else:
        var_slope = (resid**2).sum() / dof / ((x - xbar) ** 2).sum()
    sse = float(np.sqrt(var_slope))
    from scipy import stats as _st

    tq = _st.t.ppf(0.975, dof)
    ss_tot = (w * (yv - ybar) ** 2).sum()
    r2 = 1.0 - chi2 / ss_tot if ss_tot > 0 else 1.0
    return RateFit(
        ns=ns, errors=errors, ses=ses,
        slope=float(slope), intercept=float(intercept), slope_se=sse,
        ci_lo=float(slope - tq * sse), ci_hi=float(slope + tq * sse),
        r2=float(r2), points_used=len(ns),
    )


# ---------------------------------------------------------------------------
# measure-gap (time-integrated moment gap) estimators

def _trace_from_clouds(trace: FilterTrace, f: Callable) -> np.ndarray:
    if trace.clouds is None:
        raise ConfigurationError("filter trace carries neither extras nor clouds for this f")
    return np.array([c.weights @ np.asarray(f(c.particles), float) for c in trace.clouds])


def integrated_moment_gap(
    trace: FilterTrace,
    invariant,
    X_path: np.ndarray,
    dictionary: Sequence[WeightedFn],
) -> tuple[float, dict]:
    """Dictionary lower bound for the time-integrated filter-vs-invariant gap.

    For each normalized f, computes |trapz(pihat_t[f] - pi^{*,X_t}[f])| over
    the path grid and returns the max with the per-function table.  This is
    a lower bound of the sup over the full unit class.
    """
    X_path = np.asarray(X_path, float)
    if len(X_path) != len(trace.grid):
        raise ConfigurationError("filter trace and slow path grids are misaligned")
    dt = float(trace.grid[1] - trace.grid[0])
    per_f = {}
    best = 0.0
    for f in dictionary:
        if f.f_id in trace.extras:
            pih = trace.extras[f.f_id]
        else:
            pih = _trace_from_clouds(trace, f.fn)
        pistar = invariant.expectation_along(f.fn, X_path)
        gap = float(np.trapezoid(pih - pistar, dx=dt))
        per_f[f.f_id] = abs(gap)
        best = max(best, abs(gap))
    return best, per_f


def drift_gap_diagnostic(
    model,
    avg: AveragedDrift,
    path_X: np.ndarray,
    averaged_X: np.ndarray,
    drift_means: np.ndarray,
    grid: np.ndarray,
) -> float:
    """|integral <X - X*, Delta>| for one coupled pair.

    Delta_t is the filter drift estimate minus the invariant-averaged drift
    at the observed slow location (the latter evaluated through ``avg``).
    """
    dt = float(grid[1] - grid[0])
    M = len(grid) - 1
    xl = path_X[:M]
    delta = drift_means - np.atleast_2d(avg(xl))
    vals = np.einsum("kp,kp->k", path_X[:M] - averaged_X[:M], delta)
    return abs(float(np.trapezoid(vals, dx=dt)))


# ---------------------------------------------------------------------------
# coupled strong-error sweep

@dataclass
class CoupledRunStats:
    """Per-n aggregates of the innovation-coupled error study."""

    n: int
    replicas: int
    sup_mean_sq: float          # sup over grid of E||X - X*||^2
    sup_mean_sq_se: float
    argmax_t: float
    sup_sq_mean: float          # E[sup ||.||^2]
    sup_sq_se: float
    sup_m_mean: float           # E[sup ||.||^m]
    sup_m_se: float
    m: float
    pointwise_mean: np.ndarray
    pointwise_se: np.ndarray
    rho_mean: Optional[float] = None
    rho_se: Optional[float] = None
    diag_mean: Optional[float] = None
    diag_se: Optional[float] = None


@dataclass
class CoupledStudyResult:
    per_n: list
    strong_fit: Optional[RateFit]
    sup_moment_fit: Optional[RateFit]
    m: float
    rho_fit: Optional[RateFit] = None
    diag_fit: Optional[RateFit] = None


_CTX: dict = {}


def _coupled_block(args) -> tuple:
    """One replica block of the coupled sweep (worker-safe via fork globals)."""
    n_idx, block_idx, r0, r1 = args
    ctx = _CTX
    model, avg, cfg = ctx["model"], ctx["avg"], ctx["cfg"]
    spec = as_spec(model)
    n = ctx["n_list"][n_idx]
    cfgn = replace(cfg, n=n)
    R = r1 - r0
    sub = RngStream(cfg.seed).substream(5, n_idx, block_idx)

    grid, Xp, _ = simulate_paths_batch(spec, cfgn, R, sub.substream(0))
    trace_fns = [(f.f_id, f.fn) for f in ctx["fast_fns"]]
    fb = run_filter_batch(
        model, Xp, cfgn, ctx["n_particles"],
        resample_threshold=ctx["resample_threshold"],
        rng=sub.substream(1), trace_fns=trace_fns, track_moments=False,
    )
    Xa = integrate_averaged_batch(spec, avg, grid, fb.dI)
    diff2 = ((Xp - Xa) ** 2).sum(-1)  # (R, M+1)

    out = {
        "pt_s1": diff2.sum(0),
        "pt_s2": (diff2**2).sum(0),
        "sup2_s1": diff2.max(1).sum(),
        "sup2_s2": (diff2.max(1) ** 2).sum(),
    }
    supm = diff2.max(1) ** (ctx["m"] / 2.0)
    out["supm_s1"] = supm.sum()
    out["supm_s2"] = (supm**2).sum()

    if trace_fns:
        invariant = ctx["invariant"]
        dt = float(grid[1] - grid[0])
        flatX = Xp.reshape(-1, spec.p)
        rho = np.zeros(R)
        for f in ctx["fast_fns"]:
            pistar = invariant.expectation_along(f.fn, flatX).reshape(R, -1)
            gaps = np.abs(np.trapezoid(fb.extras[f.f_id] - pistar, dx=dt, axis=1))
            rho = np.maximum(rho, gaps)
        out["rho_s1"] = rho.sum()
        out["rho_s2"] = (rho**2).sum()
    if ctx["with_diag"]:
        dt = float(grid[1] - grid[0])
        xl = Xp[:, :-1, :]
        delta = fb.drift_means - avg(xl)
        vals = np.einsum("rkp,rkp->rk", Xp[:, :-1, :] - Xa[:, :-1, :], delta)
        diag = np.abs(np.trapezoid(vals, dx=dt, axis=1))
        out["diag_s1"] = diag.sum()
        out["diag_s2"] = (diag**2).sum()
    return n_idx, block_idx, out


def _mean_se(s1: float, s2: float, count: int) -> tuple[float, float]:
    mean = s1 / count
    var = max(s2 / count - mean**2, 0.0) * count / max(count - 1, 1)
    return mean, float(np.sqrt(var / count))


def coupled_study(
    model,
    avg: AveragedDrift,
    n_list: Sequence[int],
    replicas: int,
    cfg_template: SimConfig,
    *,
    n_particles: int = 2000,
    resample_threshold: float = 0.5,
    m: float = 1.5,
    dictionary: Optional[TestDictionary] = None,
    invariant=None,
    with_diag: bool = True,
    block_size: int = 100,
    workers: int = 1,
) -> CoupledStudyResult:
    """Innovation-coupled error sweep over the scale parameter list.

    Per replica: simulate (X^n, Y^n), filter it to recover innovations and
    per-step drift estimates, integrate the averaged path from the same
    innovations, and record coupled error functionals.  Replicas are handled
    in fixed-size lockstep blocks whose streams depend only on (seed, n,
    block), so results are bit-identical for any worker count.

    When a dictionary is supplied (requires an invariant-family oracle), the
    time-integrated moment gap is recorded per replica and fitted; the same
    sweep also reports the drift-gap diagnostic integral.
    """
    if not (1 < m < 2):
        raise ConfigurationError("sup-moment order m must lie in (1, 2)")
    n_list = list(n_list)
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ConfigurationError("n_list must be strictly increasing")
    if dictionary is not None and invariant is None:
        if isinstance(model, BuiltinModel):
            invariant = model.invariant
        else:
            raise ConfigurationError("measure-gap study needs an invariant-family oracle")

    fast_fns = tuple(dictionary.fast_fns) if dictionary is not None else ()
    _CTX.clear()
    _CTX.update(
        model=model, avg=avg, cfg=cfg_template, n_list=n_list,
        n_particles=n_particles, resample_threshold=resample_threshold,
        m=m, fast_fns=fast_fns, invariant=invariant, with_diag=with_diag,
    )
    blocks = []
    for n_idx in range(len(n_list)):
        r0 = 0
        b = 0
        while r0 < replicas:
            r1 = min(r0 + block_size, replicas)
            blocks.append((n_idx, b, r0, r1))
            r0, b = r1, b + 1

    if workers > 1:
        import multiprocessing as mp
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(
            max_workers=workers, mp_context=mp.get_context("fork")
        ) as pool:
            results = list(pool.map(_coupled_block, blocks))
    else:
        results = [_coupled_block(t) for t in blocks]

    per_n = []
    for n_idx, n in enumerate(n_list):
        parts = sorted(
            [(b, out) for i, b, out in results if i == n_idx], key=lambda t: t[0]
        )
        agg: dict = {}
        for _, out in parts:
            for k, v in out.items():
                agg[k] = agg.get(k, 0) + v
        R = replicas
        pt_mean = agg["pt_s1"] / R
        pt_var = np.maximum(agg["pt_s2"] / R - pt_mean**2, 0.0) * R / (R - 1)
        pt_se = np.sqrt(pt_var / R)
        kmax = int(np.argmax(pt_mean))
        sup2_mean, sup2_se = _mean_se(agg["sup2_s1"], agg["sup2_s2"], R)
        supm_mean, supm_se = _mean_se(agg["supm_s1"], agg["supm_s2"], R)
        stats = CoupledRunStats(
            n=n, replicas=R,
            sup_mean_sq=float(pt_mean[kmax]), sup_mean_sq_se=float(pt_se[kmax]),
            argmax_t=float(kmax * cfg_template.dt_slow),
            sup_sq_mean=sup2_mean, sup_sq_se=sup2_se,
            sup_m_mean=supm_mean, sup_m_se=supm_se, m=m,
            pointwise_mean=pt_mean, pointwise_se=pt_se,
        )
        if "rho_s1" in agg:
            stats.rho_mean, stats.rho_se = _mean_se(agg["rho_s1"], agg["rho_s2"], R)
        if "diag_s1" in agg:
            stats.diag_mean, stats.diag_se = _mean_se(agg["diag_s1"], agg["diag_s2"], R)
        per_n.append(stats)

    ns = [s.n for s in per_n]
    fittable = len(ns) >= 4
    strong_fit = moment_fit = rho_fit = diag_fit = None
    if fittable:
        strong_fit = fit_rate(ns, [s.sup_mean_sq for s in per_n], [s.sup_mean_sq_se for s in per_n])
        moment_fit = fit_rate(ns, [s.sup_m_mean for s in per_n], [s.sup_m_se for s in per_n])
        if per_n[0].rho_mean is not None:
            rho_fit = fit_rate(ns, [s.rho_mean for s in per_n], [s.rho_se for s in per_n])
        if per_n[0].diag_mean is not None:
            diag_fit = fit_rate(ns, [s.diag_mean for s in per_n], [s.diag_se for s in per_n])
    return CoupledStudyResult(
        per_n=per_n, strong_fit=strong_fit, sup_moment_fit=moment_fit, m=m,
        rho_fit=rho_fit, diag_fit=diag_fit,
    )


def strong_error(
    model,
    avg: AveragedDrift,
    n_list: Sequence[int],
    replicas: int,
    cfg_template: SimConfig,
    **kwargs,
) -> CoupledStudyResult:
    """Strong-rate study: sup_t E||X^n - X^{*,n}||^2 and the m-th sup moment."""
    kwargs.setdefault("dictionary", None)
    kwargs.setdefault("with_diag", False)
    return coupled_study(model, avg, n_list, replicas, cfg_template, **kwargs)


def common_noise_strong_error(
    model,
    avg: AveragedDrift,
    n_list: Sequence[int],
    replicas: int,
    cfg_template: SimConfig,
    rng: Optional[RngStream] = None,
    m: float = 1.5,
) -> CoupledStudyResult:
    """A/B coupling mode: the averaged path shares the slow Brownian noise.

    No filter is involved; X^n and the averaged path integrate the same dW
    per replica.  This is the classical averaging coupling, whose mean-square
    gap carries the optimal 1/n decay; comparing it against the
    innovation-coupled study quantifies what the filter construction changes.
    """
    spec = as_spec(model)
    rng = rng or RngStream(cfg_template.seed).substream(21)
    per_n = []
    for n_idx, n in enumerate(n_list):
        cfgn = replace(cfg_template, n=n)
        M = cfgn.n_steps
        acc = {
            "pt_s1": np.zeros(M + 1), "pt_s2": np.zeros(M + 1),
            "sup2_s1": 0.0, "sup2_s2": 0.0, "supm_s1": 0.0, "supm_s2": 0.0,
        }
        running = {"max": None}

        def record(k, t, X, Y, Xa):
            d2 = ((X - Xa) ** 2).sum(-1)
            acc["pt_s1"][k] += d2.sum()
            acc["pt_s2"][k] += (d2**2).sum()
            running["max"] = d2 if running["max"] is None else np.maximum(running["max"], d2)

        simulate_ensemble(spec, cfgn, replicas, rng.substream(n_idx), averaged=avg, record=record)
        sup2 = running["max"]
        supm = sup2 ** (m / 2.0)
        R = replicas
        pt_mean = acc["pt_s1"] / R
        pt_var = np.maximum(acc["pt_s2"] / R - pt_mean**2, 0.0) * R / (R - 1)
        kmax = int(np.argmax(pt_mean))
        s2m, s2se = _mean_se(sup2.sum(), (sup2**2).sum(), R)
        smm, smse = _mean_se(supm.sum(), (supm**2).sum(), R)
        per_n.append(
            CoupledRunStats(
                n=n, replicas=R,
                sup_mean_sq=float(pt_mean[kmax]),
                sup_mean_sq_se=float(np.sqrt(pt_var[kmax] / R)),
                argmax_t=float(kmax * cfg_template.dt_slow),
                sup_sq_mean=s2m, sup_sq_se=s2se,
                sup_m_mean=smm, sup_m_se=smse, m=m,
                pointwise_mean=pt_mean, pointwise_se=np.sqrt(pt_var / R),
            )
        )
    ns = [s.n for s in per_n]
    strong_fit = moment_fit = None
    if len(ns) >= 4:
        strong_fit = fit_rate(ns, [s.sup_mean_sq for s in per_n], [s.sup_mean_sq_se for s in per_n])
        moment_fit = fit_rate(ns, [s.sup_m_mean for s in per_n], [s.sup_m_se for s in per_n])
    return CoupledStudyResult(per_n=per_n, strong_fit=strong_fit, sup_moment_fit=moment_fit, m=m)


# ---------------------------------------------------------------------------
# weak error

@dataclass
class WeakErrorResult:
    """Weak-error table for one observable, with the fit branch that fired.

    ``branch`` is "slope" when enough points cleared the noise floor for a
    log-log fit, else "degrade" (endpoint comparison); ``excluded`` lists n
    values whose error was indistinguishable from Monte Carlo noise.
    """

    phi_id: str
    ns: np.ndarray
    errors: np.ndarray
    ses: np.ndarray
    branch: str
    fit: Optional[RateFit]
    excluded: list
    degrade_pair: Optional[tuple] = None
    degrade_ok: Optional[bool] = None

    def summary(self) -> dict:
        d = {
            "phi": self.phi_id,
            "branch": self.branch,
            "excluded_n": list(self.excluded),
            "n": self.ns.tolist(),
            "error": self.errors.tolist(),
            "stderr": self.ses.tolist(),
        }
        if self.fit is not None:
            d.update(self.fit.summary())
        if self.degrade_pair is not None:
            d["degrade_pair"] = list(self.degrade_pair)
            d["degrade_ok"] = bool(self.degrade_ok)
        return d


def weak_error(
    model,
    avg: AveragedDrift,
    phis: Sequence[PhiFn],
    n_list: Sequence[int],
    replicas: int,
    cfg_template: SimConfig,
    rng: Optional[RngStream] = None,
    mode: str = "coupled",
    chunk: int = 25000,
    degrade_pair: tuple = (16, 256),
    ref_dt_factor: int = 4,
) -> list[WeakErrorResult]:
    """E[phi(X^n_T)] - E[phi(X*_T)] across n, with noise-floor-aware fitting.

    ``mode="coupled"`` drives the averaged limit path with the same slow
    Brownian increments as X^n inside each replica (common random numbers;
    the averaged path has the limit law exactly, and the difference
    estimator's variance shrinks with the coupling).  ``mode="independent"``
    simulates the reference ensemble with fresh noise at dt/ref_dt_factor.

    Fit points with |error| <= 3 SE are excluded; with fewer than 4 survivors
    the result degrades to an endpoint comparison at ``degrade_pair`` which
    passes when the errors have nonoverlapping 3-SE intervals in the right
    order.  The branch taken is recorded.
    """
    spec = as_spec(model)
    rng = rng or RngStream(cfg_template.seed).substream(11)
    n_list = list(n_list)
    phis = list(phis)
    n_phi = len(phis)

    errs = np.zeros((n_phi, len(n_list)))
    ses = np.zeros_like(errs)

    for n_idx, n in enumerate(n_list):
        cfgn = replace(cfg_template, n=n)
        s1 = np.zeros(n_phi)
        s2 = np.zeros(n_phi)
        done = 0
        ref_s1 = np.zeros(n_phi)
        ref_s2 = np.zeros(n_phi)
        c_idx = 0
        while done < replicas:
            take = min(chunk, replicas - done)
            sub = rng.substream(n_idx, c_idx)
            if mode == "coupled":
                res = simulate_ensemble(spec, cfgn, take, sub, averaged=avg)
                for j, phi in enumerate(phis):
                    d = np.asarray(phi.fn(res.X), float) - np.asarray(phi.fn(res.X_avg), float)
                    s1[j] += d.sum()
                    s2[j] += (d**2).sum()
            else:
                from .averaging import averaged_terminal_ensemble

                res = simulate_ensemble(spec, cfgn, take, sub.substream(0))
                cfg_ref = replace(
                    cfgn, dt_slow=cfgn.dt_slow / ref_dt_factor, substeps=1
                )
                ref = averaged_terminal_ensemble(spec, avg, cfg_ref, take, sub.substream(1))
                for j, phi in enumerate(phis):
                    v = np.asarray(phi.fn(res.X), float)
                    rv = np.asarray(phi.fn(ref), float)
                    s1[j] += v.sum()
                    s2[j] += (v**2).sum()
                    ref_s1[j] += rv.sum()
                    ref_s2[j] += (rv**2).sum()
            done += take
            c_idx += 1
        for j in range(n_phi):
            if mode == "coupled":
                mean, se = _mean_se(s1[j], s2[j], replicas)
                errs[j, n_idx], ses[j, n_idx] = mean, se
            else:
                m1, se1 = _mean_se(s1[j], s2[j], replicas)
                m2, se2 = _mean_se(ref_s1[j], ref_s2[j], replicas)
                errs[j, n_idx] = m1 - m2
                ses[j, n_idx] = float(np.hypot(se1, se2))

    return [
        resolve_weak_branch(phi.f_id, n_list, errs[j], ses[j], degrade_pair)
        for j, phi in enumerate(phis)
    ]


def resolve_weak_branch(
    phi_id: str,
    n_list: Sequence[int],
    errors: np.ndarray,
    ses: np.ndarray,
    degrade_pair: tuple = (16, 256),
) -> WeakErrorResult:
    """Pick the fit branch for a weak-error table.

    Points with |error| <= 3 SE are below the noise floor and excluded.  With
    at least 4 survivors a log-log slope is fitted ("slope" branch); else the
    result degrades to comparing |error| at the two ``degrade_pair`` scales,
    requiring nonoverlapping 3-SE intervals in decreasing order.
    """
    ns = np.asarray(n_list, float)
    e = np.asarray(errors, float)
    s = np.asarray(ses, float)
    usable = np.abs(e) > 3 * s
    excluded = [int(n_list[i]) for i in range(len(n_list)) if not usable[i]]
    if usable.sum() >= 4:
        fit = fit_rate(ns[usable], np.abs(e[usable]), s[usable])
        return WeakErrorResult(
            phi_id=phi_id, ns=ns, errors=e, ses=s,
            branch="slope", fit=fit, excluded=excluded,
        )
    lo, hi = degrade_pair
    ok = None
    if lo in n_list and hi in n_list:
        i_lo, i_hi = list(n_list).index(lo), list(n_list).index(hi)
        sep = abs(e[i_lo]) - 3 * s[i_lo] > abs(e[i_hi]) + 3 * s[i_hi]
        ok = bool(sep and abs(e[i_hi]) <= abs(e[i_lo]))
    return WeakErrorResult(
        phi_id=phi_id, ns=ns, errors=e, ses=s,
        branch="degrade", fit=None, excluded=excluded,
        degrade_pair=degrade_pair, degrade_ok=ok,
    )
