"""Optimal stopping under stochastic volatility via time change and coupling."""

__version__ = "0.1.0"

from .chain import (
    ChainModel,
    ChainPath,
    CoupledChainPaths,
    SkipFreeChainModel,
    coupling_generator,
    simulate_chain,
    simulate_coupled,
    time_scaled_generator,
    validate_chain,
    validate_skip_free,
)
from .models import DiffusionVolModel, simulate_G, simulate_xi, validate_model, xi_system
from .montecarlo import (
    Estimate,
    LsBasis,
    McConfig,
    StoppingRule,
    estimate_value_timechanged,
    ls_lower_bound_finite_T,
    probe_continuity,
    verify_monotonicity_coupled,
)
from .stopping import (
    GainFunction,
    StoppingProblem,
    check_monotone_surface,
    extract_thresholds,
    finite_horizon_value,
    ordered_threshold_search,
    solve_value_iteration,
)
from .timechange import TimeChangePath, compare, gamma_from_chain, gamma_from_samples
