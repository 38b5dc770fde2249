"""Averaged drift construction and simulation of the limiting slow dynamics.

The averaged drift bbar(x) integrates b(x, .) against the frozen invariant
measure at z = x.  It is built either from a closed-form oracle or by
tabulate-then-interpolate: estimate the invariant measure on an x-grid, take
the sample average of b at each node, and interpolate piecewise-linearly
(bbar is Lipschitz, so the interpolation error is spacing * Lip(bbar)).

The averaged slow path integrates dX = bbar(X) dt + sigma(X) dN where the
driving increments dN are either innovations recovered by the particle
filter (the coupled limit process) or fresh Brownian noise (the weak-limit
process); the two have the same law.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .rng import RngStream
from .sde import ConfigurationError, DivergedTrajectoryError, SimConfig, broadcast_coeff, matvec
from .models import as_spec
from .ergodics import batch_means_se, estimate_invariant

__all__ = [
    "AveragedDrift",
    "GridTooCoarseError",
    "LipschitzProbe",
    "build_averaged_drift",
    "lipschitz_probe",
    "simulate_averaged",
    "averaged_terminal_ensemble",
    "integrate_averaged_batch",
]


class GridTooCoarseError(ConfigurationError):
    """Estimated interpolation error exceeds the declared tolerance."""


@dataclass(frozen=True)
class AveragedDrift:
    """Evaluable averaged drift, either closed-form or tabulated.

    Tabulated mode is piecewise linear on a 1-D x grid (p = 1); evaluation
    outside the grid clamps to the edge values, so the grid must cover the
    range the slow path visits.
    """

    mode: str
    oracle_fn: Optional[Callable] = None
    x_grid: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None
    stderr: Optional[np.ndarray] = None
    lip_estimate: Optional[float] = None
    interp_error_bound: Optional[float] = None
    measures: Optional[tuple] = None

    @classmethod
    def from_oracle(cls, fn: Callable) -> "AveragedDrift":
        return cls(mode="oracle", oracle_fn=fn)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, float)
        if self.mode == "oracle":
            return np.asarray(self.oracle_fn(x), float)
        flat = x[..., 0]
        return np.interp(flat, self.x_grid, self.values[:, 0])[..., None]

    def to_csv(self, path) -> None:
        if self.mode != "tabulated":
            raise ConfigurationError("only tabulated drifts serialize to CSV")
        from .sde import _write_csv

        _write_csv(
            path,
            ["x", "bbar", "stderr"],
            np.column_stack([self.x_grid, self.values[:, 0], self.stderr[:, 0]]),
        )


def build_averaged_drift(
    model,
    x_grid,
    *,
    n_samples: int = 2000,
    rng: Optional[RngStream] = None,
    max_interp_error: Optional[float] = None,
    keep_measures: bool = False,
    **invariant_kwargs,
) -> AveragedDrift:
    """Tabulate bbar(x_i) = mean of b(x_i, .) under the frozen invariant law.

    Refuses (GridTooCoarseError) when spacing * estimated Lip(bbar) exceeds
    ``max_interp_error``.
    """
    spec = as_spec(model)
    if spec.p != 1:
        raise ConfigurationError("tabulated averaged drift supports p = 1 only")
    x_grid = np.sort(np.asarray(x_grid, float).ravel())
    if len(x_grid) < 2:
        raise ConfigurationError("need at least 2 grid nodes")
    rng = rng or RngStream(0).substream(23)

    values = np.empty((len(x_grid), spec.p))
    stderr = np.empty_like(values)
    measures = []
    for i, xi in enumerate(x_grid):
        meas = estimate_invariant(
            model, [xi], n_samples=n_samples, rng=rng.substream(i), **invariant_kwargs
        )
        bvals = broadcast_coeff(
            spec.b(np.array([xi]), meas.samples), (meas.n,), spec.p
        )
        values[i] = meas.weights @ bvals
        stderr[i] = [batch_means_se(bvals[:, j]) for j in range(spec.p)]
        if keep_measures:
            measures.append(meas)

    dq = np.linalg.norm(np.diff(values, axis=0), axis=1) / np.diff(x_grid)
    lip = float(dq.max())
    bound = float(np.diff(x_grid).max() * lip)
    if max_interp_error is not None and bound > max_interp_error:
        raise GridTooCoarseError(
            f"estimated interpolation error {bound:.4g} (spacing {np.diff(x_grid).max():.4g} "
            f"x Lip {lip:.4g}) exceeds tolerance {max_interp_error:.4g}; refine the grid"
        )
    return AveragedDrift(
        mode="tabulated",
        x_grid=x_grid,
        values=values,
        stderr=stderr,
        lip_estimate=lip,
        interp_error_bound=bound,
        measures=tuple(measures) if keep_measures else None,
    )


@dataclass(frozen=True)
class LipschitzProbe:
    estimate: float
    band: float  # MC-error contribution at the maximizing quotient
    quotients: np.ndarray


def lipschitz_probe(avg: AveragedDrift) -> LipschitzProbe:
    """Max adjacent-node difference quotient of a tabulated averaged drift."""
    if avg.mode != "tabulated" or avg.x_grid is None or len(avg.x_grid) < 3:
        raise ConfigurationError("Lipschitz probe needs a tabulated drift with >= 3 nodes")
    dx = np.diff(avg.x_grid)
    dq = np.linalg.norm(np.diff(avg.values, axis=0), axis=1) / dx
    se_pairs = np.hypot(
        np.linalg.norm(avg.stderr[:-1], axis=1), np.linalg.norm(avg.stderr[1:], axis=1)
    ) / dx
    k = int(np.argmax(dq))
    return LipschitzProbe(estimate=float(dq[k]), band=float(se_pairs[k]), quotients=dq)


def _driving_increments(driving, cfg: Optional[SimConfig], p: int):
    """Resolve the driving-noise argument to (grid, increments)."""
    dI = getattr(driving, "dI", None)
    if dI is not None:
        grid = np.asarray(driving.grid, float)
        if cfg is not None and len(grid) - 1 != cfg.n_steps:
            raise ConfigurationError("driving increments do not match the configured grid")
        return grid, np.asarray(dI, float)
    if isinstance(driving, np.ndarray):
        if cfg is None:
            raise ConfigurationError("raw increments need a SimConfig for the grid")
        if driving.shape != (cfg.n_steps, p):
            raise ConfigurationError("driving increment shape mismatch")
        return cfg.grid(), driving
    if isinstance(driving, (int, np.integer)):
        driving = RngStream(int(driving))
    if isinstance(driving, RngStream):
        if cfg is None:
            raise ConfigurationError("fresh-noise driving needs a SimConfig")
        gen = driving.generator()
        dW = np.sqrt(cfg.dt_slow) * gen.standard_normal((cfg.n_steps, p))
        return cfg.grid(), dW
    raise ConfigurationError(f"cannot interpret driving source {type(driving)!r}")


def simulate_averaged(
    model,
    avg: AveragedDrift,
    driving,
    cfg: Optional[SimConfig] = None,
) -> np.ndarray:
    """Euler path of dX = bbar(X) dt + sigma(X) dN from x0.

    ``driving`` is an innovation/path object carrying ``dI`` and ``grid``, a
    raw (M, p) increment array, an integer seed, or an RngStream (the last
    two draw fresh Brownian increments on the cfg grid).
    """
    spec = as_spec(model)
    grid, dN = _driving_increments(driving, cfg, spec.p)
    M = len(grid) - 1
    dt = float(grid[1] - grid[0])
    X = np.empty((M + 1, spec.p))
    X[0] = spec.x0
    for k in range(M):
        x = X[k]
        X[k + 1] = x + dt * avg(x) + matvec(spec.sigma(x), dN[k])
        if not np.all(np.isfinite(X[k + 1])):
            raise DivergedTrajectoryError(k + 1, "averaged slow state")
    return X


def averaged_terminal_ensemble(
    model,
    avg: AveragedDrift,
    cfg: SimConfig,
    n_replicas: int,
    rng: RngStream,
) -> np.ndarray:
    """Terminal states of the averaged SDE under fresh noise, (R, p)."""
    spec = as_spec(model)
    gen = rng.generator()
    M, dt = cfg.n_steps, cfg.dt_slow
    X = np.tile(spec.x0, (n_replicas, 1))
    sq = np.sqrt(dt)
    for _ in range(M):
        dW = sq * gen.standard_normal((n_replicas, spec.p))
        X = X + dt * np.atleast_2d(avg(X)) + matvec(spec.sigma(X), dW)
    if not np.all(np.isfinite(X)):
        raise DivergedTrajectoryError(M, "averaged slow state")
    return X


def integrate_averaged_batch(
    model,
    avg: AveragedDrift,
    grid: np.ndarray,
    dN: np.ndarray,
    x0: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Lockstep averaged paths for a batch of driving increments (R, M, p)."""
    spec = as_spec(model)
    R, M, p = dN.shape
    dt = float(grid[1] - grid[0])
    X = np.empty((R, M + 1, p))
    X[:, 0, :] = spec.x0 if x0 is None else x0
    for k in range(M):
        x = X[:, k, :]
        X[:, k + 1, :] = x + dt * avg(x) + matvec(spec.sigma(x), dN[:, k, :])
    if not np.all(np.isfinite(X[:, -1, :])):
        raise DivergedTrajectoryError(M, "averaged slow state")
    return X
