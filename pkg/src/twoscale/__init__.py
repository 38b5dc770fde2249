"""Slow-fast diffusion toolkit: simulation, filtering, averaging, rate studies."""

from .rng import RngStream
from .sde import (
    ConfigurationError,
    DivergedTrajectoryError,
    ModelSpec,
    PathBundle,
    SimConfig,
    reconstruct_slow_from_innovations,
    simulate_frozen,
    simulate_slow_fast,
)
from .models import (
    BuiltinModel,
    GaussianInvariant,
    SampleSpec,
    StabilityCert,
    builtin,
    check_lyapunov,
    check_regularity,
)
from .ergodics import (
    EmpiricalMeasure,
    ErgodicityFit,
    FitWindowError,
    estimate_invariant,
    estimate_relaxation,
    fit_ergodic_rate,
    probe_invariant_continuity,
)
from .averaging import AveragedDrift, build_averaged_drift, lipschitz_probe, simulate_averaged
from .filtering import (
    FilterDegeneracyError,
    InnovationPath,
    ParticleCloud,
    filter_expectation,
    kalman_bucy_oracle,
    run_particle_filter,
)
from .poisson import (
    PoissonParams,
    WeightedFn,
    apply_generator_fast,
    apply_generator_slow,
    check_poisson_residual,
    estimate_corrector,
)
from .metrics import (
    RateFit,
    TestDictionary,
    coupled_study,
    fit_rate,
    integrated_moment_gap,
    strong_error,
    weak_error,
)

__all__ = [name for name in dir() if not name.startswith("_")]
