"""Estimation of frozen-diffusion invariant measures and their mixing rates.

The frozen chain at parameter z is sampled by long-run Euler simulation with
burn-in and thinning calibrated from the stability certificate (burn-in
5/delta1, thinning 1/delta1 by default).  Standard errors use batch means
with ceil(sqrt(N)) batches, which stays honest under residual
autocorrelation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .rng import RngStream
from .sde import ConfigurationError, frozen_values_at_times, micro_advance
from .models import as_spec, certificate_of, moment_constants

__all__ = [
    "EmpiricalMeasure",
    "RelaxationTable",
    "ErgodicityFit",
    "FitWindowError",
    "ContinuityProbe",
    "batch_means_se",
    "estimate_invariant",
    "estimate_relaxation",
    "fit_ergodic_rate",
    "probe_invariant_continuity",
    "bounded_dictionary",
]


class FitWindowError(RuntimeError):
    """No usable decay window above the noise floor; no rate is fabricated."""


def batch_means_se(values: np.ndarray) -> float:
    """Standard error of the mean via batch means, ceil(sqrt(N)) batches."""
    x = np.asarray(values, float).ravel()
    n = len(x)
    if n < 4:
        return float(np.std(x, ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
    nb = int(np.ceil(np.sqrt(n)))
    m = n // nb
    means = x[: nb * m].reshape(nb, m).mean(axis=1)
    return float(np.std(means, ddof=1) / np.sqrt(nb))


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Weighted sample approximation of a frozen invariant measure.

    ``samples`` has shape (N, q) in collection (time-major) order so batch
    means respect the chain autocorrelation structure.
    """

    samples: np.ndarray
    weights: np.ndarray
    z: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        w = np.asarray(self.weights, float)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ConfigurationError("weights must be nonnegative and sum to 1")

    @property
    def n(self) -> int:
        return len(self.samples)

    def expectation(self, f: Callable) -> tuple[float, float]:
        """(estimate, standard error) of the integral of f."""
        vals = np.asarray(f(self.samples), float)
        if self._uniform():
            return float(vals.mean()), batch_means_se(vals)
        est = float(self.weights @ vals)
        se = float(np.sqrt(np.sum(self.weights**2 * (vals - est) ** 2)))
        return est, se

    def _uniform(self) -> bool:
        return bool(np.allclose(self.weights, 1.0 / self.n, rtol=1e-9, atol=0))

    def mean(self) -> tuple[np.ndarray, np.ndarray]:
        est = self.weights @ self.samples
        se = np.array([batch_means_se(self.samples[:, j]) for j in range(self.samples.shape[1])])
        return est, se

    def var(self) -> tuple[np.ndarray, np.ndarray]:
        mu = self.weights @ self.samples
        dev2 = (self.samples - mu) ** 2
        est = self.weights @ dev2
        se = np.array([batch_means_se(dev2[:, j]) for j in range(dev2.shape[1])])
        return est, se

    def to_csv(self, path) -> None:
        q = self.samples.shape[1]
        header = [f"y_{j+1}" for j in range(q)] + ["weight"]
        from .sde import _write_csv

        _write_csv(path, header, np.column_stack([self.samples, self.weights]))


def estimate_invariant(
    model,
    z,
    *,
    n_samples: int = 2000,
    burn_in: Optional[float] = None,
    thinning: Optional[float] = None,
    dt: Optional[float] = None,
    n_chains: int = 16,
    init: Optional[np.ndarray] = None,
    rng: Optional[RngStream] = None,
) -> EmpiricalMeasure:
    """Long-run frozen-chain estimate of the invariant measure at parameter z.

    Runs ``n_chains`` chains in lockstep, discards ``burn_in`` time units,
    then records every ``thinning`` time units until at least ``n_samples``
    draws are collected.  For certified models the Lyapunov moment estimate
    is checked against its stationary bound and a warning is emitted on
    violation.
    """
    spec = as_spec(model)
    cert = certificate_of(model)
    if cert is None:
        warnings.warn("model has no stability certificate; using generic defaults")
        delta1 = None
    else:
        delta1 = cert[2]
    if n_samples < 100:
        raise ConfigurationError("insufficient samples requested (need >= 100)")
    cap = spec.stability_cap if spec.stability_cap is not None else (
        0.1 / delta1 if delta1 else 0.1
    )
    dt = dt if dt is not None else cap / 5.0
    burn_in = burn_in if burn_in is not None else (5.0 / delta1 if delta1 else 5.0)
    thinning = thinning if thinning is not None else (1.0 / delta1 if delta1 else 1.0)
    rng = rng or RngStream(0).substream(7)

    z = np.atleast_1d(np.asarray(z, float))
    burn_steps = int(np.ceil(burn_in / dt))
    thin_steps = max(1, round(thinning / dt))
    rounds = int(np.ceil(n_samples / n_chains))

    if init is None:
        y = np.tile(spec.y0, (n_chains, 1))
    else:
        init = np.atleast_2d(np.asarray(init, float))
        y = np.tile(init, (n_chains, 1)) if init.shape[0] == 1 else init.copy()
        if y.shape != (n_chains, spec.q):
            raise ConfigurationError("init must broadcast to (n_chains, q)")

    gen = rng.generator()
    for _ in range(burn_steps):
        y = micro_advance(spec, z, y, 1.0, dt, 1, gen)
    if not np.all(np.isfinite(y)):
        raise ConfigurationError("frozen chain diverged during burn-in")

    out = np.empty((rounds, n_chains, spec.q))
    for r in range(rounds):
        for _ in range(thin_steps):
            y = micro_advance(spec, z, y, 1.0, dt, 1, gen)
        out[r] = y
    samples = out.reshape(rounds * n_chains, spec.q)
    if not np.all(np.isfinite(samples)):
        raise ConfigurationError("frozen chain diverged during sampling")

    measure = EmpiricalMeasure(
        samples=samples,
        weights=np.full(len(samples), 1.0 / len(samples)),
        z=z,
        provenance={
            "burn_in": burn_in,
            "thinning": thinning,
            "dt": dt,
            "n_chains": n_chains,
            "rounds": rounds,
        },
    )
    if cert is not None:
        A, d0, d1 = cert
        b0, b1 = moment_constants(A, d0, d1, 1.0, 1)
        vhat, vse = measure.expectation(lambda s: np.einsum("ij,ij->i", s @ np.atleast_2d(A).T, s))
        if vhat >= b0 / b1 + 3 * vse:
            warnings.warn(
                f"Lyapunov moment estimate {vhat:.4g} exceeds stationary bound "
                f"{b0 / b1:.4g} + 3 SE; chain may not have equilibrated"
            )
    return measure


def _pi_f(invariant, f: Callable, z) -> tuple[float, float]:
    """Invariant expectation of f from an oracle or empirical measure."""
    if invariant is None:
        raise ConfigurationError("invariant expectation unavailable: pass an oracle or estimate")
    if hasattr(invariant, "expectation_along"):  # closed-form family
        return float(invariant.expectation(f, z)), 0.0
    if isinstance(invariant, EmpiricalMeasure):
        return invariant.expectation(f)
    raise ConfigurationError(f"unsupported invariant lookup {type(invariant)!r}")


@dataclass(frozen=True)
class RelaxationTable:
    """Monte Carlo estimates of E[f(Y_t) | Y_0 = y] - pi[f] on a (y, t) grid."""

    z: np.ndarray
    f_id: str
    y_grid: np.ndarray
    times: np.ndarray
    values: np.ndarray  # (len(y_grid), len(times))
    se: np.ndarray


def estimate_relaxation(
    model,
    z,
    f: Callable,
    y_grid,
    t_grid,
    replicas: int,
    rng: RngStream,
    invariant=None,
    dt: Optional[float] = None,
    f_id: str = "f",
) -> RelaxationTable:
    """Decay profile of the frozen semigroup toward its invariant average.

    At t = 0 the value is f(y) - pi[f] exactly (no simulation noise beyond
    the invariant estimate's own error).
    """
    spec = as_spec(model)
    if invariant is None:
        raise ConfigurationError("pass the invariant oracle or an EmpiricalMeasure")
    cap = spec.stability_cap if spec.stability_cap is not None else 0.1
    dt = dt if dt is not None else cap / 5.0
    z = np.atleast_1d(np.asarray(z, float))
    y_grid = np.atleast_2d(np.asarray(y_grid, float).reshape(-1, spec.q))
    t_grid = np.asarray(t_grid, float)

    pi_val, pi_se = _pi_f(invariant, f, z)
    values = np.empty((len(y_grid), len(t_grid)))
    se = np.empty_like(values)
    times = None
    for i, y0 in enumerate(y_grid):
        times, vals = frozen_values_at_times(
            spec, z, y0, t_grid, dt, replicas, rng.substream(i)
        )
        fv = np.asarray(f(vals), float)  # (R, K)
        values[i] = fv.mean(axis=0) - pi_val
        mc_se = fv.std(axis=0, ddof=1) / np.sqrt(replicas)
        mc_se[times == 0.0] = 0.0
        se[i] = np.sqrt(mc_se**2 + pi_se**2)
    return RelaxationTable(z=z, f_id=f_id, y_grid=y_grid, times=times, values=values, se=se)


@dataclass(frozen=True)
class ErgodicityFit:
    """Exponential envelope |H_t| ~ C exp(-xi t) from a log-linear fit."""

    f_id: str
    C: float
    xi: float
    r2: float
    window: tuple[float, float]
    n_points: int
    y_row: np.ndarray

    def as_dict(self) -> dict:
        return {
            "f_id": self.f_id,
            "C": self.C,
            "xi": self.xi,
            "r2": self.r2,
            "window": list(self.window),
            "n_points": self.n_points,
        }


def fit_ergodic_rate(table: RelaxationTable, row: Optional[int] = None) -> ErgodicityFit:
    """Least-squares fit of log |H_t| over the window where |H| > 3 SE.

    Raises FitWindowError when no window spans at least a decade of decay
    above the noise floor.
    """
    usable_per_row = [
        np.nonzero(np.abs(table.values[i]) > 3 * table.se[i])[0]
        for i in range(len(table.y_grid))
    ]
    if row is None:
        row = int(np.argmax([len(u) for u in usable_per_row]))
    idx = usable_per_row[row]
    if len(idx) < 3:
        raise FitWindowError("fewer than 3 points above the noise floor")
    h = np.abs(table.values[row, idx])
    if h.max() / h.min() < 10.0:
        raise FitWindowError("usable window spans less than one decade of decay")
    t = table.times[idx]
    logh = np.log(h)
    selog = np.maximum(table.se[row, idx] / h, 1e-6)
    w = 1.0 / selog**2
    W = np.sum(w)
    tbar = np.sum(w * t) / W
    lbar = np.sum(w * logh) / W
    stt = np.sum(w * (t - tbar) ** 2)
    slope = np.sum(w * (t - tbar) * (logh - lbar)) / stt
    intercept = lbar - slope * tbar
    pred = intercept + slope * t
    ss_res = np.sum(w * (logh - pred) ** 2)
    ss_tot = np.sum(w * (logh - lbar) ** 2)
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return ErgodicityFit(
        f_id=table.f_id,
        C=float(np.exp(intercept)),
        xi=float(-slope),
        r2=float(r2),
        window=(float(t.min()), float(t.max())),
        n_points=len(idx),
        y_row=table.y_grid[row],
    )


def bounded_dictionary(q: int) -> list[tuple[str, Callable]]:
    """Default dictionary of sup-norm-bounded probes (||f||_inf <= 1)."""
    u = np.full(q, 1.0 / np.sqrt(q))

    def proj(y):
        return np.asarray(y, float) @ u

    fns: list[tuple[str, Callable]] = []
    for a in (0.5, 1.0, 2.0):
        fns.append((f"tanh({a}s)", lambda y, a=a: np.tanh(a * proj(y))))
        fns.append((f"sin({a}s)", lambda y, a=a: np.sin(a * proj(y))))
        fns.append((f"cos({a}s)", lambda y, a=a: np.cos(a * proj(y))))
    fns.append(("exp(-|y|^2)", lambda y: np.exp(-(np.asarray(y, float) ** 2).sum(-1))))
    return fns


@dataclass(frozen=True)
class ContinuityProbe:
    """Dictionary lower bound for the TV-Lipschitz ratio of z -> pi^{*,z}.

    ``ratio`` is max_f |pi1[f] - pi2[f]| / ||z1 - z2|| over bounded f; this
    bounds the true total-variation ratio from below and is reported as such.
    """

    z1: np.ndarray
    z2: np.ndarray
    ratio: float
    ratio_se: float
    per_f: dict


def probe_invariant_continuity(
    model,
    z1,
    z2,
    dictionary: Optional[Sequence[tuple[str, Callable]]] = None,
    *,
    measures: Optional[tuple] = None,
    n_samples: int = 4000,
    rng: Optional[RngStream] = None,
) -> ContinuityProbe:
    """Estimate a lower bound on the invariant family's TV-Lipschitz ratio."""
    spec = as_spec(model)
    z1 = np.atleast_1d(np.asarray(z1, float))
    z2 = np.atleast_1d(np.asarray(z2, float))
    dz = float(np.linalg.norm(z1 - z2))
    if dz <= 0:
        raise ConfigurationError("require z1 != z2 for a continuity probe")
    dictionary = list(dictionary or bounded_dictionary(spec.q))
    rng = rng or RngStream(0).substream(13)
    if measures is None:
        m1 = estimate_invariant(model, z1, n_samples=n_samples, rng=rng.substream(0))
        m2 = estimate_invariant(model, z2, n_samples=n_samples, rng=rng.substream(1))
    else:
        m1, m2 = measures
    per_f = {}
    best, best_se = 0.0, 0.0
    for fid, f in dictionary:
        e1, s1 = _pi_f(m1, f, z1) if not isinstance(m1, EmpiricalMeasure) else m1.expectation(f)
        e2, s2 = _pi_f(m2, f, z2) if not isinstance(m2, EmpiricalMeasure) else m2.expectation(f)
        val = abs(e1 - e2) / dz
        se = np.hypot(s1, s2) / dz
        per_f[fid] = (val, se)
        if val > best:
            best, best_se = val, se
    return ContinuityProbe(z1=z1, z2=z2, ratio=best, ratio_se=best_se, per_f=per_f)
