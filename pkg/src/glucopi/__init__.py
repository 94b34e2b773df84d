"""Closed-loop glucose homeostasis modelling and CGM conformation toolkit."""

from .model import (
    A3_DEFAULT,
    TABLE1_RANGES,
    InputPulse,
    ModelParams,
    ModelState,
    Trajectory,
    constant_external_input,
    feedback_concentration,
    input_f,
    simulate_integral,
    simulate_planar,
)
from .analysis import (
    Equilibrium,
    Jacobian,
    LyapunovValue,
    StabilityReport,
    TrappingBound,
    classify_stability,
    equilibrium,
    jacobian,
    lyapunov,
    trapping_bound,
    trapping_bound_variable,
)
from .cgm import Excursion, GlucoseTrace, extract_excursions, ingest_csv, smooth
from .fit import FitConfig, FitResult, fit_excursion, fit_excursions, fit_trace, objective
from .shapiro import ShapiroResult, shapiro_wilk

__version__ = "0.1.0"

__all__ = [
    "A3_DEFAULT",
    "TABLE1_RANGES",
    "InputPulse",
    "ModelParams",
    "ModelState",
    "Trajectory",
    "constant_external_input",
    "feedback_concentration",
    "input_f",
    "simulate_integral",
    "simulate_planar",
    "Equilibrium",
    "Jacobian",
    "LyapunovValue",
    "StabilityReport",
    "TrappingBound",
    "classify_stability",
    "equilibrium",
    "jacobian",
    "lyapunov",
    "trapping_bound",
    "trapping_bound_variable",
    "Excursion",
    "GlucoseTrace",
    "extract_excursions",
    "ingest_csv",
    "smooth",
    "FitConfig",
    "FitResult",
    "fit_excursion",
    "fit_excursions",
    "fit_trace",
    "objective",
    "ShapiroResult",
    "shapiro_wilk",
    "__version__",
]
