"""Steady-state sizing of co-located battery storage and the forward-contract
quantity for a wind power producer.

The wind output is modeled as a continuous-time Markov chain; the storage
level under the balancing dispatch policy is a finite-buffer Markov-modulated
fluid queue whose limiting distribution gives exact long-run profits, which
are then optimized over the contract quantity and the storage size.
"""

__version__ = "0.1.0"

from .ctmc import (
    CtmcModel,
    WindTrace,
    discretize,
    estimate,
    load_trace,
    preprocess,
    simulate,
    stationary_distribution,
)
from .empirical import DispatchState, ExpostStats, expost_optimize, expost_profit
from .fluidq import (
    FluidQueueSpec,
    LimitingDistribution,
    StorageParams,
    apply_drift_floor,
    build_drift,
    monte_carlo_psi,
    solve_with_fallback,
    spectral_solve,
)
from .optimizer import (
    SearchConfig,
    SizingResult,
    SweepRow,
    fix_b_optimize_q,
    optimize,
    sweep,
)
from .profit import (
    MarketParams,
    ProfitBreakdown,
    best_no_storage,
    critical_cost,
    evaluate,
    no_storage_profit,
    physical_units,
)

__all__ = [
    "CtmcModel",
    "WindTrace",
    "discretize",
    "estimate",
    "load_trace",
    "preprocess",
    "simulate",
    "stationary_distribution",
    "DispatchState",
    "ExpostStats",
    "expost_optimize",
    "expost_profit",
    "FluidQueueSpec",
    "LimitingDistribution",
    "StorageParams",
    "apply_drift_floor",
    "build_drift",
    "monte_carlo_psi",
    "solve_with_fallback",
    "spectral_solve",
    "SearchConfig",
    "SizingResult",
    "SweepRow",
    "fix_b_optimize_q",
    "optimize",
    "sweep",
    "MarketParams",
    "ProfitBreakdown",
    "best_no_storage",
    "critical_cost",
    "evaluate",
    "no_storage_profit",
    "physical_units",
]
