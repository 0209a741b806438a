"""Seven-level NV-/NV0 photodynamics: simulation, fitting and readout-contrast analysis."""

__version__ = "0.1.0"

from .core import (
    LABELS,
    PLTrace,
    RateMatrix,
    SpinInit,
    StateVector,
    build_initial_state,
    build_rate_matrix,
    charge_split,
    evolve,
    limit_state,
    pl_trace,
    readout_state,
    steady_state,
)
from .params import NVParams, PowerScaling, lifetimes, params_from_lifetimes
from .kinetics import (
    ChargeRates,
    ChargeState,
    FourLevelParams,
    evolve_charge,
    fit_exponential_decay,
    fit_power_law,
    reduce_four_level,
    split_rates,
    total_rate,
)
from .contrast import (
    ReadoutWindow,
    compute_contrast,
    contrast_vs_pnv0,
    decompose,
    optimize_window,
    sweep_grid,
)
from .pipeline import FitConfig, FitResult, RawTrace, fit_global, fit_no_charge, preprocess, synthesize, synthesize_bundle
