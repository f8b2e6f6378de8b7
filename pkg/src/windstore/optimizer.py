"""Grid-seeded compass search over (contract quantity, storage size) and
parameter sensitivity sweeps.

The objective is nonsmooth where drift entries change sign and not convex, so
the search is derivative-free: evaluate a coarse grid, then refine the best
point with a shrinking compass pattern projected onto q in [0, 1], b >= 0.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .ctmc import CtmcModel
from .errors import ConfigError, OptimizerError, SolverError
from .fluidq import DEFAULT_TOL, StorageParams
from .profit import (
    MarketParams,
    ProfitBreakdown,
    best_no_storage,
    evaluate,
    no_storage_profit,
    solve_psi,
)

SWEEP_AXES = ("kappa", "kappa_prime", "rho", "eta", "c")


@dataclass(frozen=True)
class SearchConfig:
    """Grid resolution, descent steps and solver knobs for the (q, b) search."""

    q_step: float = 0.05
    b_grid: tuple = (0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0)
    step_q: float = 0.05
    step_b: float | None = None  # default: local b-grid spacing at the seed
    shrink: float = 0.5
    tol_step: float = 1e-3
    max_iters: int = 200
    tol: float = DEFAULT_TOL
    r_inf: float = 0.0
    mp_bits: int = 256

    def __post_init__(self):
        if not 0 < self.q_step <= 0.5:
            raise ConfigError("q_step must lie in (0, 0.5]")
        if len(self.b_grid) == 0 or min(self.b_grid) < 0:
            raise ConfigError("b_grid must be nonempty with nonnegative sizes")
        if not 0 < self.shrink < 1:
            raise ConfigError("shrink factor must lie in (0, 1)")
        if self.tol_step <= 0:
            raise ConfigError("tol_step must be positive")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")

    @property
    def q_grid(self) -> np.ndarray:
        return np.arange(0.0, 1.0 + self.q_step / 2, self.q_step)


@dataclass(frozen=True)
class EvalRecord:
    q: float
    b: float
    net: float
    method: str
    fallback_depth: int = 0
    error: str | None = None


@dataclass(frozen=True)
class SizingResult:
    q_star: float
    b_star: float
    profit: ProfitBreakdown
    psi: np.ndarray
    trace: tuple[EvalRecord, ...]

    @property
    def fallback_count(self) -> int:
        return sum(1 for rec in self.trace if rec.fallback_depth > 0)


class _Objective:
    """Memoized net-profit evaluation with an append-only trace log."""

    def __init__(self, model, market, storage, cfg, diagnostics=None):
        self.model = model
        self.market = market
        self.storage = storage
        self.cfg = cfg
        self.diagnostics = diagnostics
        self.cache = {}
        self.trace = []

    def __call__(self, q, b):
        key = (round(q, 10), round(b, 10))
        if key in self.cache:
            return self.cache[key]
        try:
            if b <= 0:
                breakdown = no_storage_profit(self.model, q, self.market)
                psi = self.model.stationary
                method, depth = "closed-form-b0", 0
            else:
                ld = solve_psi(
                    self.model, q, replace(self.storage, b=b),
                    r_inf=self.cfg.r_inf, tol=self.cfg.tol, mp_bits=self.cfg.mp_bits,
                    diagnostics=self.diagnostics,
                )
                breakdown = evaluate(self.model, ld.psi, q, b, self.market)
                psi, method, depth = ld.psi, ld.method, ld.fallback_depth
            entry = (breakdown.net, breakdown, psi)
            self.trace.append(EvalRecord(q, b, breakdown.net, method, depth))
        except SolverError as exc:
            entry = (-math.inf, None, None)
            self.trace.append(EvalRecord(q, b, -math.inf, "failed", 0, str(exc)))
        self.cache[key] = entry
        return entry


def optimize(
    model: CtmcModel,
    market: MarketParams,
    storage: StorageParams,
    cfg: SearchConfig = SearchConfig(),
    *,
    diagnostics: list | None = None,
) -> SizingResult:
    """Maximize net profit over (q, b): coarse grid, then compass descent from
    the best grid point.  Failed probe points are logged and skipped."""
    obj = _Objective(model, market, storage, cfg, diagnostics)

    best = None
    # exact no-storage maximizer seeds the b = 0 row
    q0, _ = best_no_storage(model, market)
    for q in np.unique(np.concatenate((cfg.q_grid, [q0]))):
        best = _better(best, (float(q), 0.0), obj)
    for b in cfg.b_grid:
        if b == 0:
            continue
        for q in cfg.q_grid:
            best = _better(best, (float(q), float(b)), obj)
    if best is None or not math.isfinite(obj(*best)[0]):
        raise OptimizerError("every grid evaluation failed")

    q_best, b_best = best
    step_q = cfg.step_q
    step_b = cfg.step_b if cfg.step_b is not None else _local_spacing(cfg.b_grid, b_best)
    iters = 0
    while max(step_q, step_b) > cfg.tol_step and iters < cfg.max_iters:
        iters += 1
        candidates = (
            (min(q_best + step_q, 1.0), b_best),
            (max(q_best - step_q, 0.0), b_best),
            (q_best, b_best + step_b),
            (q_best, max(b_best - step_b, 0.0)),
        )
        val_best = obj(q_best, b_best)[0]
        move = None
        for cand in candidates:
            v = obj(*cand)[0]
            if v > val_best:
                val_best, move = v, cand
        if move is None:
            step_q *= cfg.shrink
            step_b *= cfg.shrink
        else:
            q_best, b_best = move

    _, breakdown, psi = obj(q_best, b_best)
    return SizingResult(
        q_star=q_best,
        b_star=b_best,
        profit=breakdown,
        psi=np.asarray(psi, dtype=float).copy(),
        trace=tuple(obj.trace),
    )


def _better(best, cand, obj):
    if best is None:
        return cand
    return cand if obj(*cand)[0] > obj(*best)[0] else best


def _local_spacing(b_grid, b_seed):
    grid = sorted(set(b_grid))
    if len(grid) < 2:
        return max(b_seed * 0.25, 0.25)
    gaps = np.diff(grid)
    idx = int(np.searchsorted(grid, b_seed))
    return float(gaps[min(idx, len(gaps) - 1)])


def fix_b_optimize_q(
    model: CtmcModel,
    market: MarketParams,
    storage: StorageParams,
    b: float,
    cfg: SearchConfig = SearchConfig(),
    *,
    diagnostics: list | None = None,
) -> tuple[float, ProfitBreakdown]:
    """One-dimensional variant of optimize: best q at a fixed storage size."""
    if b < 0:
        raise ConfigError("storage size must be >= 0")
    obj = _Objective(model, market, storage, cfg, diagnostics)
    qs = list(cfg.q_grid)
    if b <= 0:
        q0, _ = best_no_storage(model, market)
        qs.append(q0)
    vals = [obj(float(q), b)[0] for q in qs]
    if not any(math.isfinite(v) for v in vals):
        raise OptimizerError(f"every evaluation failed at b = {b}")
    q_best = float(qs[int(np.argmax(vals))])
    step = cfg.step_q
    iters = 0
    while step > cfg.tol_step and iters < cfg.max_iters:
        iters += 1
        val_best = obj(q_best, b)[0]
        move = None
        for cand in (min(q_best + step, 1.0), max(q_best - step, 0.0)):
            if obj(cand, b)[0] > val_best:
                val_best, move = obj(cand, b)[0], cand
        if move is None:
            step *= cfg.shrink
        else:
            q_best = move
    _, breakdown, _ = obj(q_best, b)
    return q_best, breakdown


@dataclass(frozen=True)
class SweepRow:
    value: float
    q_star: float
    b_star: float
    net: float
    gain: float
    psi_norm: float
    fallback_count: int


def _apply_axis(market, storage, axis, value):
    if axis == "kappa":
        return replace(market, kappa=value), storage
    if axis == "kappa_prime":
        return replace(market, kappa_prime=value), storage
    if axis == "c":
        return replace(market, storage_cost=value), storage
    if axis == "rho":
        root = math.sqrt(value)
        return market, replace(storage, rho_c=root, rho_d=root)
    if axis == "eta":
        return market, replace(storage, eta=value)
    raise ConfigError(f"unknown sweep axis {axis!r}; pick one of {SWEEP_AXES}")


def _sweep_point(args):
    model, market, storage, axis, value, cfg = args
    market_v, storage_v = _apply_axis(market, storage, axis, value)
    result = optimize(model, market_v, storage_v, cfg)
    _, base = best_no_storage(model, market_v)
    return SweepRow(
        value=value,
        q_star=result.q_star,
        b_star=result.b_star,
        net=result.profit.net,
        gain=result.profit.net - base.net,
        psi_norm=float(np.sum(result.psi)),
        fallback_count=result.fallback_count,
    )


def sweep(
    model: CtmcModel,
    market: MarketParams,
    storage: StorageParams,
    axis: str,
    values,
    cfg: SearchConfig = SearchConfig(),
    *,
    workers: int = 1,
) -> list[SweepRow]:
    """One optimize per axis value; rows are returned in input order.

    Rejects sweeps that would evaluate a point with both kappa_prime > 0 and
    eta > 0, where the balancing policy is no longer optimal.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; pick one of {SWEEP_AXES}")
    values = [float(v) for v in values]
    if not values:
        raise ConfigError("sweep needs at least one value")
    for v in values:
        market_v, storage_v = _apply_axis(market, storage, axis, v)
        if market_v.kappa_prime > 0 and storage_v.eta > 0:
            raise ConfigError(
                "sweep would combine kappa_prime > 0 with eta > 0; the balancing "
                "policy is only optimal with one of them active"
            )
    jobs = [(model, market, storage, axis, v, cfg) for v in values]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_sweep_point, jobs))
    return [_sweep_point(job) for job in jobs]
