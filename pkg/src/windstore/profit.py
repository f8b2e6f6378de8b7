"""Long-run average profit of a contracted wind plant with storage.

All quantities are per unit: wind levels and the pledge q in plant capacity,
storage size b in hours of full capacity, prices relative to the fixed
contract price, storage cost c per (p.u. capacity * hour).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .ctmc import CtmcModel
from .errors import ConfigError, ContractError
from .fluidq import DEFAULT_TOL, StorageParams, build_drift, solve_with_fallback

HOURS_PER_YEAR = 8760.0


@dataclass(frozen=True)
class MarketParams:
    """Contract prices: shortfall factor kappa >= 1, surplus factor
    kappa_prime in [0, 1), price normalized to 1, amortized storage cost."""

    kappa: float = 1.35
    kappa_prime: float = 0.0
    price: float = 1.0
    storage_cost: float = 0.005

    def __post_init__(self):
        if self.kappa < 1.0:
            raise ConfigError("shortfall factor kappa must be >= 1 (no arbitrage)")
        if not 0.0 <= self.kappa_prime < 1.0:
            raise ConfigError("surplus factor kappa_prime must lie in [0, 1)")
        if not self.price > 0:
            raise ConfigError("price must be positive")
        if self.storage_cost < 0:
            raise ConfigError("storage cost must be >= 0")


@dataclass(frozen=True)
class ProfitBreakdown:
    """gross = income - imbalance terms; net = gross - c*b.  Expected
    shortfall/surplus are the unavailability-weighted imbalance energies."""

    gross: float
    storage_charge: float
    net: float
    expected_shortfall: float
    expected_surplus: float


def evaluate(
    model: CtmcModel,
    psi,
    q: float,
    b: float,
    market: MarketParams,
    *,
    envelope_tol: float = DEFAULT_TOL,
) -> ProfitBreakdown:
    """Per-unit long-run average profit for unavailability vector psi."""
    psi = np.asarray(psi, dtype=float)
    pi = model.stationary
    if psi.shape != pi.shape:
        raise ContractError("psi shape does not match the model")
    if psi.min() < -envelope_tol or (psi - pi).max() > envelope_tol:
        raise ContractError(
            "psi escapes the [0, pi] envelope; upstream solve is invalid"
        )
    if not 0 <= q <= 1:
        raise ConfigError("contract quantity must lie in [0, 1]")
    if b < 0:
        raise ConfigError("storage size must be >= 0")
    w = model.state_values
    shortfall = float(psi @ np.maximum(q - w, 0.0))
    surplus = float(psi @ np.maximum(w - q, 0.0))
    gross = market.price * (q - market.kappa * shortfall + market.kappa_prime * surplus)
    charge = market.storage_cost * b
    return ProfitBreakdown(
        gross=gross,
        storage_charge=charge,
        net=gross - charge,
        expected_shortfall=shortfall,
        expected_surplus=surplus,
    )


def no_storage_profit(model: CtmcModel, q: float, market: MarketParams) -> ProfitBreakdown:
    """b = 0 closed form: storage is never available, psi = pi."""
    return evaluate(model, model.stationary, q, 0.0, market)


def best_no_storage(model: CtmcModel, market: MarketParams) -> tuple[float, ProfitBreakdown]:
    """Exact maximizer of the no-storage profit over q.

    The b = 0 profit is piecewise linear and concave in q, so the maximum sits
    on a state value or an endpoint.
    """
    candidates = np.unique(np.concatenate(([0.0, 1.0], model.state_values)))
    best_q, best = None, None
    for q in candidates:
        cur = no_storage_profit(model, float(q), market)
        if best is None or cur.net > best.net:
            best_q, best = float(q), cur
    return best_q, best


def solve_psi(
    model: CtmcModel,
    q: float,
    storage: StorageParams,
    *,
    r_inf: float = 0.0,
    tol: float = DEFAULT_TOL,
    mp_bits: int = 256,
    diagnostics: list | None = None,
):
    """Unavailability vector for (q, storage) via the fallback solver."""
    spec = build_drift(model, q, storage, r_inf=r_inf)
    return solve_with_fallback(
        spec, tol, mp_bits=mp_bits, diagnostics=diagnostics
    )


def critical_cost(
    model: CtmcModel,
    market: MarketParams,
    storage: StorageParams,
    db: float = 0.05,
    *,
    q_step: float = 0.005,
    r_inf: float = 0.0,
    tol: float = DEFAULT_TOL,
) -> float:
    """Critical amortized storage cost: forward-difference slope at b = 0 of
    the q-optimized gross profit.  Storage priced above this is worthless."""
    if db <= 0:
        raise ConfigError("finite-difference step db must be positive")
    _, base = best_no_storage(model, market)
    _, g_db = _max_gross_at_b(
        model, market, replace(storage, b=db), q_step=q_step, r_inf=r_inf, tol=tol
    )
    return (g_db - base.gross) / db


def _max_gross_at_b(model, market, storage, *, q_step, r_inf, tol):
    """Grid-seeded 1-D pattern search of gross profit over q at fixed b > 0."""
    cache = {}

    def gross(q):
        key = round(q, 12)
        if key not in cache:
            ld = solve_psi(model, q, storage, r_inf=r_inf, tol=tol)
            cache[key] = evaluate(model, ld.psi, q, storage.b, market).gross
        return cache[key]

    qs = np.arange(0.0, 1.0 + q_step / 2, q_step)
    vals = [gross(float(q)) for q in qs]
    best_q = float(qs[int(np.argmax(vals))])
    best_v = max(vals)
    step = q_step
    while step > 1e-4:
        moved = False
        for cand in (best_q - step, best_q + step):
            cand = min(max(cand, 0.0), 1.0)
            v = gross(cand)
            if v > best_v:
                best_q, best_v, moved = cand, v, True
        if not moved:
            step *= 0.5
    return best_q, best_v


def physical_units(c_pu: float, price_usd_per_mwh: float) -> float:
    """Convert a per-unit amortized storage cost to $/kWh-yr at the given
    reference energy price."""
    if c_pu < 0 or price_usd_per_mwh < 0:
        raise ConfigError("unit conversion inputs must be nonnegative")
    return c_pu * price_usd_per_mwh * HOURS_PER_YEAR / 1000.0
