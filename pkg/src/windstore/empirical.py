"""Trace-driven ex-post profit of the balancing policy.

Steps a state of charge through a sampled wind trace under the balancing
dispatch rule and accrues contract income, shortfall penalties and surplus
revenue.  Serves as the model-free oracle for the steady-state results.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ctmc import WindTrace
from .errors import ConfigError, DataError
from .fluidq import StorageParams
from .profit import MarketParams


@dataclass
class DispatchState:
    """Running dispatch bookkeeping: state of charge in capacity-hours plus
    profit accumulators (price-weighted) and external-side imbalance energy."""

    x: float = 0.0
    income: float = 0.0
    penalty: float = 0.0
    revenue: float = 0.0
    shortfall_ext: float = 0.0
    surplus_ext: float = 0.0
    steps: int = 0


@dataclass(frozen=True)
class ExpostStats:
    """Per-hour imbalance summary of one dispatch run (external-side energy)."""

    shortfall: float
    surplus: float
    final_soc: float
    steps: int


def step_dispatch(
    state: DispatchState,
    w: float,
    q: float,
    b: float,
    delta: float,
    storage: StorageParams,
    market: MarketParams,
    *,
    surplus_convention: str = "external",
    shortfall_convention: str = "external",
) -> DispatchState:
    """Advance one sampling period; reference implementation of the kernel.

    Charging stores rho_c * delta * (w - q); overflow beyond b is sold at
    kappa_prime (converted back to external MWh by default).  Discharging
    drains delta * (q - w) / rho_d; the deficit below empty is bought at kappa
    (external-side, i.e. deficit * rho_d, by default).
    """
    state.income += q * delta
    diff = w - q
    if diff > 0:
        xn = state.x + storage.rho_c * delta * diff
        if xn > b:
            over = xn - b
            ext = over / storage.rho_c
            state.surplus_ext += ext
            priced = ext if surplus_convention == "external" else over
            state.revenue += market.kappa_prime * priced
            xn = b
        state.x = xn
    elif diff < 0:
        xn = state.x - delta * (-diff) / storage.rho_d
        if xn < 0:
            deficit = -xn
            ext = deficit * storage.rho_d
            state.shortfall_ext += ext
            priced = ext if shortfall_convention == "external" else deficit
            state.penalty += market.kappa * priced
            xn = 0.0
        state.x = xn
    state.steps += 1
    return state


def expost_profit(
    trace: WindTrace,
    q: float,
    b: float,
    market: MarketParams,
    storage: StorageParams,
    *,
    surplus_convention: str = "external",
    shortfall_convention: str = "external",
) -> tuple[float, ExpostStats]:
    """Average ex-post profit rate of the balancing policy over the trace.

    The store starts empty.  Leakage is not part of the ex-post recursion, so
    storage.eta must be zero.
    """
    if storage.eta != 0:
        raise ConfigError("ex-post dispatch carries no leakage term; set eta = 0")
    if not 0 <= q <= 1:
        raise ConfigError("contract quantity must lie in [0, 1]")
    if b < 0:
        raise ConfigError("storage size must be >= 0")
    if surplus_convention not in ("external", "stored"):
        raise ConfigError(f"unknown surplus convention {surplus_convention!r}")
    if shortfall_convention not in ("external", "stored"):
        raise ConfigError(f"unknown shortfall convention {shortfall_convention!r}")
    if len(trace) < 2:
        raise DataError("trace needs at least two samples")

    from ._kernels import dispatch_loop

    penalty, revenue, shortfall, surplus, soc = dispatch_loop(
        trace.samples,
        float(q),
        float(b),
        trace.delta,
        storage.rho_c,
        storage.rho_d,
        market.kappa,
        market.kappa_prime,
        surplus_convention == "external",
        shortfall_convention == "external",
    )
    hours = len(trace) * trace.delta
    income = q * hours
    avg = market.price * (income - penalty + revenue) / hours
    return avg, ExpostStats(
        shortfall=shortfall / hours,
        surplus=surplus / hours,
        final_soc=soc,
        steps=len(trace),
    )


@dataclass(frozen=True)
class ExpostSurface:
    """Exhaustive ex-post evaluation over a (q, b) grid."""

    q_grid: np.ndarray
    b_grid: np.ndarray
    profit: np.ndarray  # (len(q_grid), len(b_grid))
    shortfall: np.ndarray
    surplus: np.ndarray

    def rows(self):
        for i, q in enumerate(self.q_grid):
            for j, b in enumerate(self.b_grid):
                yield (
                    float(q),
                    float(b),
                    float(self.profit[i, j]),
                    float(self.shortfall[i, j]),
                    float(self.surplus[i, j]),
                )


def expost_optimize(
    trace: WindTrace,
    market: MarketParams,
    storage: StorageParams,
    q_grid,
    b_grid,
    **conventions,
) -> tuple[float, float, ExpostSurface]:
    """Exhaustive ex-post search: returns the argmax and the full surface."""
    q_grid = np.asarray(list(q_grid), dtype=float)
    b_grid = np.asarray(list(b_grid), dtype=float)
    if q_grid.size == 0 or b_grid.size == 0:
        raise ConfigError("ex-post grids must be nonempty")
    profit = np.empty((q_grid.size, b_grid.size))
    shortfall = np.empty_like(profit)
    surplus = np.empty_like(profit)
    for i, q in enumerate(q_grid):
        for j, b in enumerate(b_grid):
            avg, stats = expost_profit(trace, float(q), float(b), market, storage, **conventions)
            profit[i, j] = avg
            shortfall[i, j] = stats.shortfall
            surplus[i, j] = stats.surplus
    flat = int(np.argmax(profit))
    i, j = np.unravel_index(flat, profit.shape)
    surface = ExpostSurface(q_grid, b_grid, profit, shortfall, surplus)
    return float(q_grid[i]), float(b_grid[j]), surface
