"""Optimal dealer quoting and hedging under transient market impact.

Closed-form stationary controls, a backward explicit-Euler solver for the
full control problem on a (q, x) grid, and a reproducible Monte Carlo
engine for P&L experiments.
"""

__version__ = "0.1.0"

from .closedform import (
    ClosedFormCoeffs,
    approx_quote,
    approx_speed,
    coeffs,
    internalization_half_width,
    meanfield_relaxation,
    p_exec,
    speed_from_pressure,
)
from .hjb import (
    ControlField,
    GridSpec,
    SolveResult,
    ValueField,
    extract_controls,
    load_controls,
    save_controls,
    solve_ac,
    solve_baseline,
    solve_transient,
)
from .intensity import (
    ConvergenceError,
    ExponentialCurve,
    IntensityCurve,
    SigmoidCurve,
    build_curves,
    xi,
)
from .params import (
    ConfigError,
    ModelParams,
    RawConfig,
    denormalize,
    load_config,
    load_params,
    normalize,
)
from .simulate import (
    ClosedFormPolicy,
    GridPolicy,
    PathStats,
    PerformanceReport,
    SimState,
    SimulationError,
    accrue_hedge,
    book_shock,
    shock_experiment,
    simulate_paths,
)

__all__ = [
    "__version__",
    "ClosedFormCoeffs", "approx_quote", "approx_speed", "coeffs",
    "internalization_half_width", "meanfield_relaxation", "p_exec",
    "speed_from_pressure",
    "ControlField", "GridSpec", "SolveResult", "ValueField",
    "extract_controls", "load_controls", "save_controls",
    "solve_ac", "solve_baseline", "solve_transient",
    "ConvergenceError", "ExponentialCurve", "IntensityCurve",
    "SigmoidCurve", "build_curves", "xi",
    "ConfigError", "ModelParams", "RawConfig", "denormalize",
    "load_config", "load_params", "normalize",
    "ClosedFormPolicy", "GridPolicy", "PathStats", "PerformanceReport",
    "SimState", "SimulationError", "accrue_hedge", "book_shock",
    "shock_experiment", "simulate_paths",
]
