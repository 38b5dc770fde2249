"""Experiment orchestration: configuration, execution, artifact persistence.

Each run executes one named study, writes CSV/JSON artifacts plus a manifest
into a fresh output directory (existing directories are never overwritten),
and exits nonzero when an acceptance-tagged check fails.  Identical config
and seed produce byte-identical CSV outputs for any worker count.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, field
from importlib.metadata import version as _pkg_version
from pathlib import Path
import numpy as np

from .rng import RngStream
from .sde import ConfigurationError, SimConfig, simulate_slow_fast
from .models import BUILTIN_NAMES, builtin, check_lyapunov, check_regularity
from .ergodics import estimate_invariant
from .averaging import AveragedDrift
from .filtering import kalman_bucy_oracle, riccati_stationary, run_particle_filter
from .poisson import PoissonParams, WeightedFn, check_poisson_residual, estimate_corrector
from .metrics import TestDictionary, coupled_study, weak_error

EXPERIMENT_KINDS = (
    "simulate",
    "invariant",
    "filter-validate",
    "rates-strong",
    "rates-weak",
    "rho-study",
    "poisson-check",
    "check-assumptions",
)

# acceptance windows for the exit-status checks, per study
SLOPE_WINDOWS = {
    "strong": (-1.25, -0.75),
    "moment": (-1.05, -0.45),
    "weak": (-1.4, -0.6),
    "rho": (-1.3, -0.7),
}


@dataclass
class ExperimentConfig:
    """Fully resolved description of one experiment run."""

    kind: str
    model: str
    seed: int
    out: str
    workers: int = 1
    n_list: list = field(default_factory=lambda: [4, 8, 16, 32, 64, 128, 256])
    replicas: int = 400
    sim: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigurationError(
                f"unknown experiment kind '{self.kind}' (have {', '.join(EXPERIMENT_KINDS)})"
            )
        if self.seed is None:
            raise ConfigurationError("seed is mandatory (no wall-clock default)")
        if any(b <= a for a, b in zip(self.n_list, self.n_list[1:])):
            raise ConfigurationError("n_list must be strictly increasing")

    def sim_config(self, **overrides) -> SimConfig:
        args = dict(n=self.n_list[0], T=1.0, dt_slow=2e-3, substeps=8, seed=self.seed)
        args.update(self.sim)
        args.update(overrides)
        return SimConfig(**args)

    def echo(self) -> dict:
        return {
            "kind": self.kind,
            "model": self.model,
            "seed": self.seed,
            "workers": self.workers,
            "n_list": list(self.n_list),
            "replicas": self.replicas,
            "sim": dict(self.sim),
            "extras": dict(self.extras),
        }


def _write_json(path: Path, obj: dict) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, default=float)
        fh.write("\n")


def _window_ok(name: str, slope: float) -> bool:
    lo, hi = SLOPE_WINDOWS[name]
    return lo <= slope <= hi


def run_experiment(cfg: ExperimentConfig) -> int:
    """Execute the configured study; returns the process exit status."""
    out = Path(cfg.out)
    if out.exists():
        raise ConfigurationError(f"output directory {out} already exists; refusing to overwrite")
    out.mkdir(parents=True)
    t0 = time.time()
    try:
        model = builtin(cfg.model)
    except ConfigurationError as exc:
        raise ConfigurationError(f"cannot resolve model '{cfg.model}': {exc}") from exc

    runner = {
        "simulate": _run_simulate,
        "invariant": _run_invariant,
        "filter-validate": _run_filter_validate,
        "rates-strong": _run_rates_strong,
        "rates-weak": _run_rates_weak,
        "rho-study": _run_rho_study,
        "poisson-check": _run_poisson_check,
        "check-assumptions": _run_check_assumptions,
    }[cfg.kind]
    status, summary = runner(cfg, model, out)

    manifest = {
        "config": cfg.echo(),
        "seed": cfg.seed,
        "version": _pkg_version("twoscale"),
        "wall_time_s": time.time() - t0,
        "exit_status": status,
    }
    _write_json(out / "manifest.json", manifest)
    _write_json(out / "summary.json", summary)
    return status


def _run_simulate(cfg: ExperimentConfig, model, out: Path):
    sim = cfg.sim_config()
    path = simulate_slow_fast(model.spec, sim)
    path.to_csv(out / "path.csv")
    if cfg.extras.get("increments", True):
        path.increments_to_csv(out / "increments.csv")
    return 0, {"n": sim.n, "steps": sim.n_steps, "X_T": path.X[-1].tolist()}


def _run_invariant(cfg: ExperimentConfig, model, out: Path):
    z_values = cfg.extras.get("z_values", [0.0, 1.0, float(np.pi / 2)])
    n_samples = cfg.extras.get("n_samples", 4000)
    rng = RngStream(cfg.seed).substream(1)
    rows = []
    ok = True
    for i, z in enumerate(z_values):
        meas = estimate_invariant(model, z, n_samples=n_samples, rng=rng.substream(i))
        meas.to_csv(out / f"invariant_z{i}.csv")
        mean, mean_se = meas.mean()
        var, var_se = meas.var()
        row = {
            "z": float(z),
            "mean": mean.tolist(), "mean_se": mean_se.tolist(),
            "var": var.tolist(), "var_se": var_se.tolist(),
        }
        oracle_mean = model.invariant.mean(z)
        oracle_var = np.diag(model.invariant.cov)
        row["oracle_mean"] = oracle_mean.tolist()
        row["oracle_var"] = oracle_var.tolist()
        within = bool(
            np.all(np.abs(mean - oracle_mean) <= 3 * mean_se)
            and np.all(np.abs(var - oracle_var) <= 3 * var_se)
        )
        row["within_3se"] = within
        ok = ok and within
        rows.append(row)
    return (0 if ok else 1), {"z_checks": rows, "all_within_3se": ok}


def _run_filter_validate(cfg: ExperimentConfig, model, out: Path):
    if model.kalman is None:
        raise ConfigurationError("filter-validate needs a linear-Gaussian model (LINGAUSS)")
    sim = cfg.sim_config(n=cfg.extras.get("n", 16), substeps=cfg.sim.get("substeps", 1))
    n_particles = cfg.extras.get("particles", 10000)
    path = simulate_slow_fast(model.spec, sim)
    trace, innov = run_particle_filter(
        model, path, n_particles, rng=RngStream(cfg.seed).substream(2), store_clouds=False
    )
    kb = kalman_bucy_oracle(model, path)
    trace.to_csv(out / "filter_trace.csv", innovations=innov)
    rmse = float(np.sqrt(np.mean((trace.means[:, 0] - kb.mean) ** 2)))
    late = slice(len(kb.grid) // 2, None)
    pstar = riccati_stationary(sim.n, model.kalman)
    late_var = float(trace.variances[late, 0].mean())
    summary = {
        "n": sim.n,
        "particles": n_particles,
        "rmse_mean": rmse,
        "late_filter_var": late_var,
        "stationary_var": pstar,
        "var_rel_err": abs(late_var - pstar) / pstar,
    }
    ok = rmse < 0.05 and summary["var_rel_err"] < 0.10
    return (0 if ok else 1), summary


def _study_dictionary(cfg: ExperimentConfig, model) -> TestDictionary:
    dic = TestDictionary.default(model)
    wanted = cfg.extras.get("dictionary")
    return dic.restricted(wanted) if wanted else dic


def _run_rates_strong(cfg: ExperimentConfig, model, out: Path):
    avg = AveragedDrift.from_oracle(model.averaged_drift)
    res = coupled_study(
        model, avg, cfg.n_list, cfg.replicas, cfg.sim_config(),
        n_particles=cfg.extras.get("particles", 2000),
        m=cfg.extras.get("m", 1.5),
        dictionary=None, with_diag=False,
        block_size=cfg.extras.get("block_size", 100),
        workers=cfg.workers,
    )
    res.strong_fit.to_csv(out / "rates_strong.csv")
    res.sup_moment_fit.to_csv(out / "rates_strong_m.csv")
    summary = {
        "slope": res.strong_fit.slope,
        "ci_lo": res.strong_fit.ci_lo,
        "ci_hi": res.strong_fit.ci_hi,
        "moment_slope": res.sup_moment_fit.slope,
        "moment_ci_lo": res.sup_moment_fit.ci_lo,
        "moment_ci_hi": res.sup_moment_fit.ci_hi,
        "m": res.m,
        "window_strong": list(SLOPE_WINDOWS["strong"]),
        "window_moment": list(SLOPE_WINDOWS["moment"]),
    }
    ok = _window_ok("strong", res.strong_fit.slope) and _window_ok(
        "moment", res.sup_moment_fit.slope
    )
    return (0 if ok else 1), summary


def _run_rates_weak(cfg: ExperimentConfig, model, out: Path):
    avg = AveragedDrift.from_oracle(model.averaged_drift)
    dic = TestDictionary.default(model)
    phis = [p for p in dic.phis if p.f_id == cfg.extras.get("phi", "cos(s)")] or list(dic.phis[:1])
    sim = cfg.sim_config(
        dt_slow=cfg.sim.get("dt_slow", 4e-3), substeps=cfg.sim.get("substeps", 8)
    )
    results = weak_error(
        model, avg, phis, cfg.n_list, cfg.replicas, sim,
        rng=RngStream(cfg.seed).substream(3),
        mode=cfg.extras.get("mode", "coupled"),
        chunk=cfg.extras.get("chunk", 25000),
    )
    r = results[0]
    from .sde import _write_csv

    _write_csv(out / "rates_weak.csv", ["n", "error", "stderr"],
               np.column_stack([r.ns, r.errors, r.ses]))
    summary = r.summary()
    summary["window"] = list(SLOPE_WINDOWS["weak"])
    if r.branch == "slope":
        ok = _window_ok("weak", r.fit.slope)
    else:
        ok = bool(r.degrade_ok)
    summary["passed"] = ok
    return (0 if ok else 1), summary


def _run_rho_study(cfg: ExperimentConfig, model, out: Path):
    avg = AveragedDrift.from_oracle(model.averaged_drift)
    res = coupled_study(
        model, avg, cfg.n_list, cfg.replicas, cfg.sim_config(),
        n_particles=cfg.extras.get("particles", 2000),
        dictionary=_study_dictionary(cfg, model),
        with_diag=True,
        block_size=cfg.extras.get("block_size", 100),
        workers=cfg.workers,
    )
    res.rho_fit.to_csv(out / "rho.csv")
    summary = {
        "rho_slope": res.rho_fit.slope,
        "rho_ci_lo": res.rho_fit.ci_lo,
        "rho_ci_hi": res.rho_fit.ci_hi,
        "diag_slope": res.diag_fit.slope if res.diag_fit else None,
        "window": list(SLOPE_WINDOWS["rho"]),
    }
    ok = _window_ok("rho", res.rho_fit.slope)
    return (0 if ok else 1), summary


def _run_poisson_check(cfg: ExperimentConfig, model, out: Path):
    if model.name != "LINGAUSS":
        raise ConfigurationError("poisson-check validates the LINGAUSS closed form")
    params = PoissonParams(
        epsilon=cfg.extras.get("epsilon", 0.01),
        lam=cfg.extras.get("lambda", 0.1),
        outer=cfg.extras.get("outer", 4000),
        inner=cfg.extras.get("inner", 16),
    )
    f = WeightedFn.build(
        lambda y: y[..., 0], lambda y: np.ones_like(y), model.A, f_id="y"
    ).normalized()
    points = cfg.extras.get("points", [[0.0, 1.0], [0.5, 1.0], [-0.5, -1.0], [1.0, 2.0], [0.0, -2.0]])
    rng = RngStream(cfg.seed).substream(4)
    rows = []
    ok = True
    for i, (z, y) in enumerate(points):
        v, se = estimate_corrector(model, f, [z], [y], params, model.invariant, rng.substream(i, 0))
        closed = -y / (params.lam + 1.0)
        counter = [0]

        def v_eval(zz, yy, i=i):
            counter[0] += 1
            return estimate_corrector(
                model, f, zz, yy, params, model.invariant, rng.substream(i, counter[0])
            )

        rep = check_poisson_residual(model, f, [z], [y], params, v_eval, model.invariant)
        within = abs(v - closed) <= 3 * se
        rows.append(
            dict(z=z, y=y, v=v, se=se, closed_form=closed, within_3se=bool(within))
            | rep.as_dict()
        )
        ok = ok and within and rep.verdict == "pass"
    _write_json(out / "poisson.json", {"points": rows})
    return (0 if ok else 1), {"points_ok": ok, "n_points": len(points)}


def _run_check_assumptions(cfg: ExperimentConfig, model, out: Path):
    cert = check_lyapunov(model, model.A, model.delta0, model.delta1)
    report = check_regularity(model, declared=model.declared)
    payload = {"lyapunov": cert.as_dict(), "regularity": report.as_dict()}
    _write_json(out / "assumptions.json", payload)
    ok = cert.valid and report.passed
    return (0 if ok else 1), {"lyapunov_valid": cert.valid, "regularity_passed": report.passed}


# ---------------------------------------------------------------------------
# command line

def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="twoscale",
        description="Slow-fast SDE studies: simulation, filtering, averaging, rates.",
    )
    ap.add_argument("kind", choices=EXPERIMENT_KINDS, help="experiment to run")
    ap.add_argument("--config", type=Path, help="JSON config file (flags override)")
    ap.add_argument("--seed", type=int, help="64-bit reproducibility key (mandatory)")
    ap.add_argument("--workers", type=int, help="replica-level worker processes")
    ap.add_argument("--out", type=str, help="output directory (must not exist)")
    ap.add_argument("--model", type=str, help=f"model name ({', '.join(BUILTIN_NAMES)})")
    ap.add_argument("--n-list", type=str, help="comma-separated scale parameters")
    ap.add_argument("--replicas", type=int, help="Monte Carlo replicas")
    return ap


def config_from_args(argv=None) -> ExperimentConfig:
    args = _build_parser().parse_args(argv)
    raw: dict = {}
    if args.config:
        raw = json.loads(Path(args.config).read_text())
    merged = {
        "kind": args.kind,
        "model": args.model or raw.get("model", "SINCOS"),
        "seed": args.seed if args.seed is not None else raw.get("seed"),
        "out": args.out or raw.get("out", f"runs/{args.kind}"),
        "workers": args.workers or raw.get("workers", 1),
        "replicas": args.replicas or raw.get("replicas", 400),
        "sim": raw.get("sim", {}),
        "extras": raw.get("extras", {}),
    }
    if args.n_list:
        merged["n_list"] = [int(v) for v in args.n_list.split(",")]
    elif "n_list" in raw:
        merged["n_list"] = list(raw["n_list"])
    return ExperimentConfig(**merged)


def main(argv=None) -> int:
    try:
        cfg = config_from_args(argv)
        status = run_experiment(cfg)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"{cfg.kind}: exit {status} (artifacts in {cfg.out})")
    return status


if __name__ == "__main__":
    sys.exit(main())
