"""Euler-Maruyama kernels for slow-fast systems and frozen fast diffusions.

The slow-fast pair is

    dX = b(X, Y) dt + sigma(X) dW
    dY = n h(X, Y) dt + sqrt(n) eta(X, Y) dB

with scale separation ``n``.  Within each slow step of size ``dt_slow`` the
fast component is advanced by ``substeps`` micro-steps (effective fast step
``dt_slow / substeps``); the slow component is advanced once per slow step
from the left-endpoint value of Y (Ito convention).

Coefficient callbacks must broadcast over leading sample axes:

    b(x, y)   x (..., p), y (..., q)  ->  (..., p)
    sigma(x)  (p, p) constant, or x (..., p) -> (..., p, p)
    h(x, y)   -> (..., q)
    eta(x, y) -> (q, q) constant, or (..., q, q)

All kernels are pure given (model, config, stream): identical inputs give
bit-identical outputs, and stored increments can be replayed to reproduce a
path exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .rng import RngStream

__all__ = [
    "ConfigurationError",
    "DivergedTrajectoryError",
    "ModelSpec",
    "SimConfig",
    "PathBundle",
    "FrozenPath",
    "EnsembleResult",
    "simulate_slow_fast",
    "simulate_frozen",
    "simulate_paths_batch",
    "simulate_ensemble",
    "frozen_values_at_times",
    "frozen_terminal_batch",
    "reconstruct_slow_from_innovations",
]


class ConfigurationError(ValueError):
    """Inconsistent model/configuration input."""


class DivergedTrajectoryError(RuntimeError):
    """A trajectory left the representable range (NaN/inf).

    Divergent trajectories are aborted and reported, never clamped:
    clamping would silently bias rate estimates.
    """

    def __init__(self, step: int, what: str = "state", replicas=None):
        self.step = step
        self.replicas = replicas
        msg = f"non-finite {what} first detected at slow step {step}"
        if replicas is not None:
            msg += f" (replica indices {np.asarray(replicas).ravel()[:8]})"
        super().__init__(msg)


@dataclass(frozen=True)
class ModelSpec:
    """Coefficient quadruple of a slow-fast system plus initial conditions.

    ``stability_cap`` bounds the effective fast Euler step: configurations
    must satisfy ``n * dt_slow / substeps <= stability_cap``.  Builtin models
    declare it from their stability certificate (``0.1 / delta1`` unless
    overridden); leave ``None`` to skip the check for ad-hoc models.
    """

    p: int
    q: int
    b: Callable
    sigma: Callable
    h: Callable
    eta: Callable
    x0: np.ndarray
    y0: np.ndarray
    stability_cap: Optional[float] = None
    label: str = "model"

    def __post_init__(self):
        if self.p < 1 or self.q < 1:
            raise ConfigurationError("dimensions p, q must be positive")
        object.__setattr__(self, "x0", np.atleast_1d(np.asarray(self.x0, dtype=float)))
        object.__setattr__(self, "y0", np.atleast_1d(np.asarray(self.y0, dtype=float)))
        if self.x0.shape != (self.p,):
            raise ConfigurationError(f"x0 must have shape ({self.p},)")
        if self.y0.shape != (self.q,):
            raise ConfigurationError(f"y0 must have shape ({self.q},)")


@dataclass(frozen=True)
class SimConfig:
    """Discretization and seed control for one slow-fast simulation."""

    n: int
    T: float
    dt_slow: float
    substeps: int = 1
    seed: int = 0
    replica_id: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ConfigurationError("scale parameter n must be a positive integer")
        if self.T <= 0 or self.dt_slow <= 0:
            raise ConfigurationError("time quantities must be strictly positive")
        if self.substeps < 1:
            raise ConfigurationError("substeps must be >= 1")
        m = round(self.T / self.dt_slow)
        if m < 1 or abs(m * self.dt_slow - self.T) > 1e-9 * max(1.0, self.T):
            raise ConfigurationError("T must be an integer multiple of dt_slow")

    @property
    def n_steps(self) -> int:
        return round(self.T / self.dt_slow)

    @property
    def dt_fast(self) -> float:
        return self.dt_slow / self.substeps

    def grid(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_steps + 1)

    def validate(self, model: ModelSpec) -> None:
        if model.stability_cap is not None:
            eff = self.n * self.dt_fast
            if eff > model.stability_cap * (1 + 1e-12):
                raise ConfigurationError(
                    f"effective fast step n*dt_slow/substeps = {eff:.4g} exceeds "
                    f"stability cap {model.stability_cap:.4g}"
                )

    def stream(self) -> RngStream:
        return RngStream(self.seed).substream(self.replica_id)


@dataclass(frozen=True)
class PathBundle:
    """One realized slow-fast trajectory with its driving increments.

    ``dW`` has shape (M, p), ``dB`` has shape (M, substeps, q); ``dI`` is
    filled in by the particle filter when innovations are computed.
    """

    grid: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    dW: np.ndarray
    dB: np.ndarray
    dI: Optional[np.ndarray] = None
    cfg: Optional["SimConfig"] = None

    @property
    def n_steps(self) -> int:
        return len(self.grid) - 1

    @property
    def dt(self) -> float:
        return float(self.grid[1] - self.grid[0])

    def with_innovations(self, dI: np.ndarray) -> "PathBundle":
        return PathBundle(self.grid, self.X, self.Y, self.dW, self.dB, np.asarray(dI), self.cfg)

    def to_csv(self, path) -> None:
        """Write t, X_1..X_p, Y_1..Y_q with a header row."""
        p, q = self.X.shape[1], self.Y.shape[1]
        header = ["t"] + [f"X_{i+1}" for i in range(p)] + [f"Y_{j+1}" for j in range(q)]
        _write_csv(path, header, np.column_stack([self.grid, self.X, self.Y]))

    def increments_to_csv(self, path) -> None:
        """Companion CSV of driving increments, one row per slow step."""
        m, p = self.dW.shape
        substeps, q = self.dB.shape[1], self.dB.shape[2]
        header = (
            ["t_left"]
            + [f"dW_{i+1}" for i in range(p)]
            + [f"dB_s{s+1}_{j+1}" for s in range(substeps) for j in range(q)]
        )
        if self.dI is not None:
            header += [f"dI_{i+1}" for i in range(p)]
        cols = [self.grid[:-1], self.dW, self.dB.reshape(m, substeps * q)]
        if self.dI is not None:
            cols.append(self.dI)
        _write_csv(path, header, np.column_stack(cols))


@dataclass(frozen=True)
class FrozenPath:
    """Trajectory of the fast diffusion with the slow variable held fixed."""

    grid: np.ndarray
    Y: np.ndarray
    z: np.ndarray


@dataclass(frozen=True)
class EnsembleResult:
    """Terminal states of a replica ensemble (and its averaged companion)."""

    X: np.ndarray
    Y: np.ndarray
    X_avg: Optional[np.ndarray] = None


def _write_csv(path, header: Sequence[str], rows: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in np.atleast_2d(rows):
            fh.write(",".join(format(v, ".17g") for v in row) + "\n")


def matvec(mat: np.ndarray, vec: np.ndarray) -> np.ndarray:
    """Apply a (stack of) square matrices to a (stack of) vectors."""
    mat = np.asarray(mat)
    if mat.ndim == 2:
        return vec @ mat.T
    return np.einsum("...ij,...j->...i", mat, vec)


def broadcast_coeff(vals, batch_shape: tuple, d: int) -> np.ndarray:
    """Broadcast a coefficient evaluation to the full (batch..., d) shape.

    Lets constant or partially-broadcast callbacks (for example a drift that
    ignores y) participate in vectorized kernels.
    """
    vals = np.asarray(vals, float)
    want = tuple(batch_shape) + (d,)
    if vals.shape == want:
        return vals
    return np.broadcast_to(vals, want)


def _check_finite(arr: np.ndarray, step: int, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        bad = None
        if arr.ndim > 1:
            bad = np.nonzero(~np.isfinite(arr).all(axis=tuple(range(1, arr.ndim))))[0]
        raise DivergedTrajectoryError(step, what, replicas=bad)


def micro_advance(
    model: ModelSpec,
    x: np.ndarray,
    y: np.ndarray,
    n: float,
    dt_fast: float,
    substeps: int,
    gen: np.random.Generator,
    dB_out: Optional[np.ndarray] = None,
    dB_in: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Advance the fast variable by ``substeps`` Euler micro-steps.

    The slow argument ``x`` is held fixed (left endpoint of the slow step).
    Pass ``dB_out`` (substeps, ..., q) to record the Brownian increments or
    ``dB_in`` to replay stored ones.
    """
    drift_scale = n * dt_fast
    noise_scale = np.sqrt(n)
    sqrt_dtf = np.sqrt(dt_fast)
    for j in range(substeps):
        if dB_in is not None:
            db = dB_in[j]
        else:
            db = gen.standard_normal(y.shape)
            db *= sqrt_dtf
        if dB_out is not None:
            dB_out[j] = db
        drift = broadcast_coeff(model.h(x, y), y.shape[:-1], y.shape[-1])
        y = y + drift_scale * drift + noise_scale * matvec(model.eta(x, y), db)
    return y


def simulate_slow_fast(
    model: ModelSpec,
    cfg: SimConfig,
    rng: Optional[RngStream] = None,
    increments: Optional[tuple] = None,
) -> PathBundle:
    """Simulate one slow-fast trajectory, storing states and increments.

    ``increments=(dW, dB)`` replays a stored increment set, reproducing the
    original path exactly (coupling reuse).
    """
    cfg.validate(model)
    M, p, q, sub = cfg.n_steps, model.p, model.q, cfg.substeps
    dt = cfg.dt_slow
    gen = (rng or cfg.stream()).generator()

    if increments is not None:
        dW, dB = np.asarray(increments[0], float), np.asarray(increments[1], float)
        if dW.shape != (M, p) or dB.shape != (M, sub, q):
            raise ConfigurationError("replayed increments have mismatched shapes")
    else:
        dW = np.empty((M, p))
        dB = np.empty((M, sub, q))

    X = np.empty((M + 1, p))
    Y = np.empty((M + 1, q))
    X[0], Y[0] = model.x0, model.y0
    sqdt = np.sqrt(dt)

    for k in range(M):
        if increments is None:
            dW[k] = sqdt * gen.standard_normal(p)
        x, y = X[k], Y[k]
        X[k + 1] = x + dt * model.b(x, y) + matvec(model.sigma(x), dW[k])
        Y[k + 1] = micro_advance(
            model, x, y, cfg.n, cfg.dt_fast, sub, gen,
            dB_out=dB[k] if increments is None else None,
            dB_in=dB[k] if increments is not None else None,
        )
        if not (np.all(np.isfinite(X[k + 1])) and np.all(np.isfinite(Y[k + 1]))):
            raise DivergedTrajectoryError(k + 1)

    return PathBundle(cfg.grid(), X, Y, dW, dB, cfg=cfg)


def simulate_frozen(
    model: ModelSpec,
    z: np.ndarray,
    y_init: np.ndarray,
    horizon: float,
    dt: float,
    rng: RngStream,
) -> FrozenPath:
    """Simulate dY = h(z, Y) dt + eta(z, Y) dB with z held fixed (n = 1)."""
    if dt <= 0 or horizon <= 0:
        raise ConfigurationError("horizon and dt must be positive")
    if model.stability_cap is not None and dt > model.stability_cap * (1 + 1e-12):
        raise ConfigurationError("dt exceeds stability cap for the frozen chain")
    z = np.atleast_1d(np.asarray(z, float))
    y = np.atleast_1d(np.asarray(y_init, float)).copy()
    M = max(1, round(horizon / dt))
    gen = rng.generator()
    Y = np.empty((M + 1, model.q))
    Y[0] = y
    for k in range(M):
        Y[k + 1] = micro_advance(model, z, Y[k], 1.0, dt, 1, gen)
        if not np.all(np.isfinite(Y[k + 1])):
            raise DivergedTrajectoryError(k + 1)
    return FrozenPath(dt * np.arange(M + 1), Y, z)


def simulate_paths_batch(
    model: ModelSpec,
    cfg: SimConfig,
    n_replicas: int,
    rng: RngStream,
    store_y: bool = False,
):
    """Simulate ``n_replicas`` independent slow-fast paths in lockstep.

    Returns ``(grid, X, Y_terminal)`` with X of shape (R, M+1, p); set
    ``store_y`` to also get the full fast path (R, M+1, q).  Lockstep
    vectorization over replicas is the single-machine fast path; results are
    independent of how replicas would be partitioned across workers.
    """
    cfg.validate(model)
    M, p, q, sub = cfg.n_steps, model.p, model.q, cfg.substeps
    R, dt = n_replicas, cfg.dt_slow
    gen = rng.generator()

    X = np.empty((R, M + 1, p))
    X[:, 0, :] = model.x0
    Yfull = np.empty((R, M + 1, q)) if store_y else None
    y = np.tile(model.y0, (R, 1))
    if store_y:
        Yfull[:, 0, :] = y
    sqdt = np.sqrt(dt)

    for k in range(M):
        x = X[:, k, :]
        dW = sqdt * gen.standard_normal((R, p))
        bxy = broadcast_coeff(model.b(x, y), (R,), p)
        X[:, k + 1, :] = x + dt * bxy + matvec(model.sigma(x), dW)
        y = micro_advance(model, x, y, cfg.n, cfg.dt_fast, sub, gen)
        if store_y:
            Yfull[:, k + 1, :] = y
        _check_finite(X[:, k + 1, :], k + 1, "slow state")
        _check_finite(y, k + 1, "fast state")
    return cfg.grid(), X, (Yfull if store_y else y)


def simulate_ensemble(
    model: ModelSpec,
    cfg: SimConfig,
    n_replicas: int,
    rng: RngStream,
    averaged: Optional[Callable] = None,
    record: Optional[Callable] = None,
) -> EnsembleResult:
    """Terminal-state ensemble of the slow-fast system.

    When ``averaged`` (a drift x -> bbar(x)) is given, a companion path with
    dX = bbar(X) dt + sigma(X) dW is integrated from the same slow Brownian
    increments, realizing the limiting dynamics under common noise.
    ``record(k, t, X, Y, X_avg)`` is invoked after every slow step (and once
    at k = 0) for streaming statistics; arrays must not be mutated.
    """
    cfg.validate(model)
    M, p, q, sub = cfg.n_steps, model.p, model.q, cfg.substeps
    R, dt = n_replicas, cfg.dt_slow
    gen = rng.generator()

    X = np.tile(model.x0, (R, 1))
    y = np.tile(model.y0, (R, 1))
    Xa = np.tile(model.x0, (R, 1)) if averaged is not None else None
    sqdt = np.sqrt(dt)
    if record is not None:
        record(0, 0.0, X, y, Xa)

    for k in range(M):
        dW = sqdt * gen.standard_normal((R, p))
        Xn = X + dt * broadcast_coeff(model.b(X, y), (R,), p) + matvec(model.sigma(X), dW)
        if Xa is not None:
            Xa = Xa + dt * np.atleast_2d(averaged(Xa)) + matvec(model.sigma(Xa), dW)
        y = micro_advance(model, X, y, cfg.n, cfg.dt_fast, sub, gen)
        X = Xn
        if record is not None:
            record(k + 1, (k + 1) * dt, X, y, Xa)
        if (k + 1) % 50 == 0 or k == M - 1:
            _check_finite(X, k + 1, "slow state")
            _check_finite(y, k + 1, "fast state")
    return EnsembleResult(X=X, Y=y, X_avg=Xa)


def frozen_values_at_times(
    model: ModelSpec,
    z: np.ndarray,
    y_init: np.ndarray,
    t_grid: np.ndarray,
    dt: float,
    n_replicas: int,
    rng: RngStream,
) -> tuple[np.ndarray, np.ndarray]:
    """Frozen-diffusion states at requested times, over a replica ensemble.

    Times are snapped to the simulation grid; returns ``(times, values)``
    with values of shape (R, len(times), q).
    """
    z = np.atleast_1d(np.asarray(z, float))
    t_grid = np.asarray(t_grid, float)
    steps = np.round(t_grid / dt).astype(int)
    times = steps * dt
    y = np.tile(np.atleast_1d(np.asarray(y_init, float)), (n_replicas, 1))
    out = np.empty((n_replicas, len(t_grid), model.q))
    gen = rng.generator()
    order = np.argsort(steps, kind="stable")
    for idx in order[steps[order] == 0]:
        out[:, idx, :] = y
    step_now = 0
    for idx in order[steps[order] > 0]:
        target = steps[idx]
        while step_now < target:
            y = micro_advance(model, z, y, 1.0, dt, 1, gen)
            step_now += 1
        _check_finite(y, step_now, "fast state")
        out[:, idx, :] = y
    return times, out


def frozen_terminal_batch(
    model: ModelSpec,
    z_rows: np.ndarray,
    y_init: np.ndarray,
    steps: np.ndarray,
    dt: float,
    rng: RngStream,
    antithetic_pairs: bool = False,
) -> np.ndarray:
    """Terminal frozen-diffusion states for a batch with per-row z and horizon.

    Row i runs ``steps[i]`` Euler steps of dY = h(z_i, Y) dt + eta(z_i, Y) dB.
    Rows are processed longest-first so the active batch shrinks as horizons
    are reached.  With ``antithetic_pairs`` adjacent rows (2i, 2i+1) share
    mirrored noise; paired rows must have identical z and steps.
    """
    z_rows = np.atleast_2d(np.asarray(z_rows, float))
    B = z_rows.shape[0]
    steps = np.asarray(steps, int)
    y0 = np.asarray(y_init, float)
    y0 = np.tile(y0, (B, 1)) if y0.ndim == 1 else y0.copy()

    if antithetic_pairs and B % 2:
        raise ConfigurationError("antithetic batches must have even size")
    # stable descending sort keeps antithetic pairs (equal horizons) adjacent
    order = np.argsort(-steps, kind="stable")
    inv = np.empty(B, int)
    inv[order] = np.arange(B)

    zs = z_rows[order]
    ys = y0[order]
    ss = steps[order]
    out = np.empty_like(ys)
    max_steps = int(ss[0]) if B else 0
    # rows with steps == 0 finish immediately
    done_from = int(np.searchsorted(-ss, 0, side="left"))
    out[done_from:] = ys[done_from:]

    gen = rng.generator()
    sq = np.sqrt(dt)
    for s in range(max_steps):
        # rows still needing more than s steps
        active = int(np.searchsorted(-ss, -(s + 1), side="right"))
        if active == 0:
            break
        zv, yv = zs[:active], ys[:active]
        db = gen.standard_normal((active, yv.shape[1]))
        if antithetic_pairs:
            db[1::2] = -db[0::2]
        db *= sq
        ys[:active] = yv + dt * model.h(zv, yv) + matvec(model.eta(zv, yv), db)
        finished = int(np.searchsorted(-ss, -(s + 2), side="right"))
        if finished < active:
            out[finished:active] = ys[finished:active]
        if (s + 1) % 200 == 0:
            _check_finite(ys[:active], s + 1, "fast state")
    _check_finite(out, max_steps, "fast state")
    return out[inv]


def reconstruct_slow_from_innovations(
    model: ModelSpec,
    path: PathBundle,
    drift_means: np.ndarray,
    dI: np.ndarray,
) -> np.ndarray:
    """Rebuild the slow path from filter drift estimates and innovations.

    Returns x0 + sum(drift_means * dt) + sum(sigma(X) dI); because the
    innovations are defined as exactly that residual, the output must match
    the observed path to rounding precision.
    """
    drift_means = np.asarray(drift_means, float)
    dI = np.asarray(dI, float)
    M = path.n_steps
    if drift_means.shape[0] != M or dI.shape[0] != M:
        raise ConfigurationError("grid length mismatch between path and filter output")
    dt = path.dt
    X = np.empty_like(path.X)
    X[0] = path.X[0]
    for k in range(M):
        X[k + 1] = X[k] + dt * drift_means[k] + matvec(model.sigma(X[k]), dI[k])
    return X
