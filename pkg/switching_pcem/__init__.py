"""Predictor-corrector Euler-Maruyama schemes for SDEs with Markovian switching"""

__version__ = "0.1.0"

from .ctmc import GeneratorMatrix, transition_matrix, validate_generator
from .models import CallableModel, LinearSwitchingModel, StabilityTestModel, SwitchingModel, linear_model
from .schemes import SchemeParams, SchemePreset, pcem_step, resolve_scheme
from .simulate import SeedPair, build_grid, run_replications, simulate_coupled, simulate_path
from .analysis import fit_strong_order, monte_carlo_error, scan_stability_region, state_p_stable, transfer_moment

__all__ = [
    "GeneratorMatrix",
    "transition_matrix",
    "validate_generator",
    "CallableModel",
    "LinearSwitchingModel",
    "StabilityTestModel",
    "SwitchingModel",
    "linear_model",
    "SchemeParams",
    "SchemePreset",
    "pcem_step",
    "resolve_scheme",
    "SeedPair",
    "build_grid",
    "run_replications",
    "simulate_coupled",
    "simulate_path",
    "fit_strong_order",
    "monte_carlo_error",
    "scan_stability_region",
    "state_p_stable",
    "transfer_moment",
]
