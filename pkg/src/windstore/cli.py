"""Batch command-line front end.

Subcommands: estimate | curve | optimize | sweep | simulate | validate.
Every command reads one YAML config, writes its tables (and best-effort
plots) into the output directory, and drops a manifest with the config hash,
seed and library versions next to them.

Exit codes: 0 success, 2 config error, 3 data error, 4 solver error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .ctmc import CtmcModel, discretize, estimate, load_trace, preprocess, simulate
from .empirical import expost_optimize, expost_profit
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    ModelError,
    OptimizerError,
    SolverError,
    WindstoreError,
)
from .fluidq import StorageParams, build_drift, monte_carlo_psi, solve_with_fallback
from .optimizer import SearchConfig, fix_b_optimize_q, optimize, sweep
from .profit import MarketParams, best_no_storage, evaluate, no_storage_profit
from .synthetic import reference_model

_FMT = "%.12g"


@dataclass(frozen=True)
class ModelSection:
    n_levels: int = 15
    window_hours: float = 1.0
    delta: float | None = None
    capacity: float | None = None
    bin_edges: str = "uniform"
    state_value: str = "midpoint"

    def __post_init__(self):
        if self.n_levels < 2:
            raise ConfigError("model.n_levels must be >= 2")
        if self.window_hours <= 0:
            raise ConfigError("model.window_hours must be positive")


@dataclass(frozen=True)
class SweepSection:
    axis: str = "kappa"
    values: tuple = ()


@dataclass(frozen=True)
class RunConfig:
    """Validated run configuration.  Defaults follow the reference parameter
    set: kappa=1.35, kappa_prime=0, c=0.005, rho_c=rho_d=0.95, eta=0."""

    trace: str | None = None
    model_file: str | None = None
    out: str = "out"
    seed: int = 0
    workers: int = 1
    model: ModelSection = field(default_factory=ModelSection)
    market: MarketParams = field(default_factory=MarketParams)
    storage: StorageParams = field(default_factory=StorageParams)
    r_inf: float = 0.0
    search: SearchConfig = field(default_factory=SearchConfig)
    curve_b: tuple = (0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0)
    curve_expost: bool = False
    sweep: SweepSection = field(default_factory=SweepSection)
    sim_q_grid: tuple | None = None
    sim_b_grid: tuple | None = None
    validate_horizon: float = 2e5
    raw: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.market.kappa_prime > 0 and self.storage.eta > 0:
            raise ConfigError(
                "kappa_prime > 0 together with eta > 0 invalidates the balancing "
                "policy; sweep one of them at a time"
            )
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")


def _take(section: dict, allowed: dict, where: str) -> dict:
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")
    return {k: section[k] for k in section}


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping: {path}")
    try:
        return _config_from_dict(raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _config_from_dict(raw: dict) -> RunConfig:
    top_allowed = {
        "trace", "model_file", "out", "seed", "workers", "model", "market",
        "storage", "search", "curve", "sweep", "simulate", "validate",
    }
    unknown = set(raw) - top_allowed
    if unknown:
        raise ConfigError(f"unknown top-level config key(s): {sorted(unknown)}")

    model = ModelSection(**_take(raw.get("model", {}) or {}, ModelSection.__dataclass_fields__, "model"))

    market_raw = dict(raw.get("market", {}) or {})
    if "c" in market_raw:
        market_raw["storage_cost"] = market_raw.pop("c")
    market = MarketParams(**_take(market_raw, MarketParams.__dataclass_fields__, "market"))

    storage_raw = dict(raw.get("storage", {}) or {})
    r_inf = float(storage_raw.pop("r_inf", 0.0))
    storage = StorageParams(**_take(storage_raw, StorageParams.__dataclass_fields__, "storage"))

    search_raw = dict(raw.get("search", {}) or {})
    if "b_grid" in search_raw:
        search_raw["b_grid"] = tuple(float(b) for b in search_raw["b_grid"])
    search_raw.setdefault("r_inf", r_inf)
    search = SearchConfig(**_take(search_raw, SearchConfig.__dataclass_fields__, "search"))

    curve_raw = dict(raw.get("curve", {}) or {})
    curve_allowed = {"b_list": None, "expost_overlay": None}
    curve_raw = _take(curve_raw, curve_allowed, "curve")
    curve_b = tuple(float(b) for b in curve_raw.get("b_list", (0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0)))
    curve_expost = bool(curve_raw.get("expost_overlay", False))

    sweep_raw = dict(raw.get("sweep", {}) or {})
    sweep_raw = _take(sweep_raw, {"axis": None, "values": None}, "sweep")
    sweep_cfg = SweepSection(
        axis=str(sweep_raw.get("axis", "kappa")),
        values=tuple(float(v) for v in sweep_raw.get("values", ())),
    )

    sim_raw = _take(dict(raw.get("simulate", {}) or {}), {"q_grid": None, "b_grid": None}, "simulate")
    val_raw = _take(dict(raw.get("validate", {}) or {}), {"horizon": None}, "validate")

    return RunConfig(
        trace=raw.get("trace"),
        model_file=raw.get("model_file"),
        out=str(raw.get("out", "out")),
        seed=int(raw.get("seed", 0)),
        workers=int(raw.get("workers", 1)),
        model=model,
        market=market,
        storage=storage,
        r_inf=r_inf,
        search=search,
        curve_b=curve_b,
        curve_expost=curve_expost,
        sweep=sweep_cfg,
        sim_q_grid=tuple(float(q) for q in sim_raw["q_grid"]) if "q_grid" in sim_raw else None,
        sim_b_grid=tuple(float(b) for b in sim_raw["b_grid"]) if "b_grid" in sim_raw else None,
        validate_horizon=float(val_raw.get("horizon", 2e5)),
        raw=raw,
    )


# ---------------------------------------------------------------- I/O helpers

def _fmt(value) -> str:
    if isinstance(value, float):
        return _FMT % value
    return str(value)


def write_table(path: Path, header: list[str], rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def save_model(path: Path, model: CtmcModel, delta: float) -> None:
    payload = {
        "n_states": model.n_states,
        "state_values": model.state_values.tolist(),
        "generator": model.generator.tolist(),
        "stationary": model.stationary.tolist(),
        "delta": delta,
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_model(path) -> CtmcModel:
    path = Path(path)
    if not path.exists():
        raise DataError(f"model file not found: {path}")
    payload = json.loads(path.read_text())
    return CtmcModel(
        n_states=int(payload["n_states"]),
        state_values=np.asarray(payload["state_values"]),
        generator=np.asarray(payload["generator"]),
        stationary=np.asarray(payload["stationary"]),
    )


def _manifest(out: Path, command: str, cfg: RunConfig, outputs: list[str]) -> None:
    digest = hashlib.sha256(
        json.dumps(cfg.raw, sort_keys=True, default=str).encode()
    ).hexdigest()
    payload = {
        "command": command,
        "config_sha256": digest,
        "seed": cfg.seed,
        "outputs": sorted(outputs),
        "versions": {
            "windstore": __version__,
            "numpy": np.__version__,
            "python": "%d.%d" % sys.version_info[:2],
        },
    }
    (out / f"{command}_manifest.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n"
    )


def _plot(fn, path: Path) -> None:
    """Best-effort plotting; never gates the exit code."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        with matplotlib.rc_context({"svg.hashsalt": "windstore"}):
            fig = plt.figure(figsize=(5, 3.4))
            fn(fig.gca())
            fig.tight_layout()
            fig.savefig(path)
            plt.close(fig)
    except Exception as exc:  # pragma: no cover - depends on mpl backend
        print(f"plotting skipped ({exc})", file=sys.stderr)


# ---------------------------------------------------------------- pipeline

def _load_input_trace(cfg: RunConfig):
    if cfg.trace is None:
        raise DataError("this command needs a `trace` path in the config")
    return load_trace(cfg.trace, capacity=cfg.model.capacity, delta=cfg.model.delta)


def _estimate_model(cfg: RunConfig):
    trace = _load_input_trace(cfg)
    smoothed = preprocess(trace, cfg.model.window_hours)
    labels, values = discretize(
        smoothed,
        cfg.model.n_levels,
        bin_edges=cfg.model.bin_edges,
        state_value=cfg.model.state_value,
    )
    return estimate(labels, values, smoothed.delta), smoothed


def _get_model(cfg: RunConfig) -> CtmcModel:
    if cfg.model_file is not None:
        return load_model(cfg.model_file)
    if cfg.trace is not None:
        model, _ = _estimate_model(cfg)
        return model
    raise DataError("config needs a `trace` or a `model_file` entry")


def cmd_estimate(cfg: RunConfig, out: Path, diagnostics=None) -> int:
    model, smoothed = _estimate_model(cfg)
    save_model(out / "model.json", model, smoothed.delta)
    pi = model.stationary
    entropy = float(-(pi[pi > 0] @ np.log(pi[pi > 0])))
    print(f"states retained: {model.n_states}")
    print(f"stationary entropy: {entropy:.4f} nats")
    print(f"mean per-unit output: {model.mean_output:.4f}")
    _manifest(out, "estimate", cfg, ["model.json"])
    return 0


def cmd_curve(cfg: RunConfig, out: Path, diagnostics=None) -> int:
    model = _get_model(cfg)
    base_q, base = best_no_storage(model, cfg.market)
    rows = []
    for b in cfg.curve_b:
        if b == 0:
            rows.append((0.0, base_q, 0.0, base.gross, base.expected_shortfall,
                         base.expected_surplus))
            continue
        storage_b = replace(cfg.storage, b=float(b))
        q_star, breakdown = fix_b_optimize_q(
            model, cfg.market, storage_b, float(b), cfg.search,
            diagnostics=diagnostics,
        )
        rows.append((float(b), q_star, breakdown.gross - base.gross, breakdown.gross,
                     breakdown.expected_shortfall, breakdown.expected_surplus))
    header = ["b", "q_star", "gain", "gross", "expected_shortfall", "expected_surplus"]
    write_table(out / "curve.csv", header, rows)
    summary = {
        "base_gross": base.gross,
        "base_q": base_q,
        "fit_reference": model.mean_output,
    }
    (out / "curve_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")

    outputs = ["curve.csv", "curve_summary.json"]
    if cfg.curve_expost and cfg.trace is not None:
        trace = _load_input_trace(cfg)
        ex_rows = []
        qs = np.arange(0.0, 1.0 + cfg.search.q_step / 2, cfg.search.q_step)
        _, g0, _ = _expost_best_q(trace, cfg, 0.0, qs)
        for b in cfg.curve_b:
            q_star, gross, _ = _expost_best_q(trace, cfg, float(b), qs)
            ex_rows.append((float(b), q_star, gross - g0, gross))
        write_table(out / "curve_expost.csv", ["b", "q_star", "gain", "avg_profit"], ex_rows)
        outputs.append("curve_expost.csv")

    def draw(ax):
        bs = [r[0] for r in rows]
        ax.plot(bs, [r[2] for r in rows], marker="o", label="model gain")
        ax.axhline(model.mean_output - base.gross, ls="--", c="gray",
                   label="feed-in-tariff bound")
        ax.set_xlabel("storage size b (h)")
        ax.set_ylabel("gross gain over no storage")
        ax.legend()

    _plot(draw, out / "curve.svg")
    outputs.append("curve.svg")
    _manifest(out, "curve", cfg, outputs)
    return 0


def _expost_best_q(trace, cfg, b, qs):
    best = (None, -np.inf, None)
    for q in qs:
        avg, stats = expost_profit(trace, float(q), b, cfg.market, cfg.storage)
        if avg > best[1]:
            best = (float(q), avg, stats)
    return best


def cmd_optimize(cfg: RunConfig, out: Path, diagnostics=None) -> int:
    model = _get_model(cfg)
    result = optimize(model, cfg.market, cfg.storage, cfg.search, diagnostics=diagnostics)
    payload = {
        "q_star": result.q_star,
        "b_star": result.b_star,
        "profit": asdict(result.profit),
        "psi": result.psi.tolist(),
        "fallback_count": result.fallback_count,
        "evaluations": len(result.trace),
    }
    (out / "sizing.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    write_table(
        out / "search_trace.csv",
        ["q", "b", "net", "method", "fallback_depth", "error"],
        [(r.q, r.b, r.net, r.method, r.fallback_depth, r.error or "") for r in result.trace],
    )
    print(f"q* = {result.q_star:.4f}  b* = {result.b_star:.4f}  net = {result.profit.net:.6f}")
    _manifest(out, "optimize", cfg, ["sizing.json", "search_trace.csv"])
    return 0


def cmd_sweep(cfg: RunConfig, out: Path, diagnostics=None) -> int:
    if not cfg.sweep.values:
        raise ConfigError("sweep.values must be a nonempty list")
    model = _get_model(cfg)
    rows = sweep(
        model, cfg.market, cfg.storage, cfg.sweep.axis, cfg.sweep.values,
        cfg.search, workers=cfg.workers,
    )
    header = ["axis_value", "q_star", "b_star", "net", "gain", "psi_norm", "fallback_count"]
    write_table(
        out / "sweep.csv",
        header,
        [(r.value, r.q_star, r.b_star, r.net, r.gain, r.psi_norm, r.fallback_count) for r in rows],
    )

    def draw(ax):
        ax.plot([r.value for r in rows], [r.b_star for r in rows], marker="o")
        ax.set_xlabel(cfg.sweep.axis)
        ax.set_ylabel("optimal storage size b* (h)")

    _plot(draw, out / "sweep_bstar.svg")

    def draw_gain(ax):
        ax.plot([r.value for r in rows], [r.gain for r in rows], marker="o")
        ax.set_xlabel(cfg.sweep.axis)
        ax.set_ylabel("net gain over no storage")

    _plot(draw_gain, out / "sweep_gain.svg")
    _manifest(out, "sweep", cfg, ["sweep.csv", "sweep_bstar.svg", "sweep_gain.svg"])
    return 0


def cmd_simulate(cfg: RunConfig, out: Path, diagnostics=None) -> int:
    trace = _load_input_trace(cfg)
    q_grid = cfg.sim_q_grid if cfg.sim_q_grid is not None else tuple(cfg.search.q_grid)
    b_grid = cfg.sim_b_grid if cfg.sim_b_grid is not None else cfg.search.b_grid
    q_star, b_star, surface = expost_optimize(trace, cfg.market, cfg.storage, q_grid, b_grid)
    write_table(out / "expost_surface.csv",
                ["q", "b", "avg_profit", "shortfall", "surplus"], surface.rows())
    best = {
        "q_star": q_star,
        "b_star": b_star,
        "avg_profit": float(surface.profit.max()),
    }
    (out / "expost_best.json").write_text(json.dumps(best, indent=2, sort_keys=True) + "\n")
    print(f"ex-post best: q* = {q_star:.4f}  b* = {b_star:.4f}")
    _manifest(out, "simulate", cfg, ["expost_surface.csv", "expost_best.json"])
    return 0


def cmd_validate(cfg: RunConfig, out: Path, diagnostics=None) -> int:
    """Cross-check the spectral solution against the Monte Carlo and ex-post
    oracles on the configured model (reference model when none is given)."""
    if cfg.trace is None and cfg.model_file is None:
        model = reference_model()
    else:
        model = _get_model(cfg)
    horizon = max(cfg.validate_horizon, 1e4)
    checks = []

    q_probe = float(np.clip(round(model.mean_output, 2), 0.05, 0.95))
    for b in (0.5, 2.0):
        storage_b = replace(cfg.storage, b=b)
        spec = build_drift(model, q_probe, storage_b, r_inf=cfg.r_inf)
        ld = solve_with_fallback(spec, cfg.search.tol, diagnostics=diagnostics)
        est, se = monte_carlo_psi(spec, horizon, cfg.seed)
        holding = float(np.max(-1.0 / np.diag(model.generator)))
        ok = bool(
            np.all(
                (np.abs(ld.psi - est) <= 3 * se + 1e-12)
                | ((est == 0) & (ld.psi <= 5 * holding / horizon))
            )
        )
        checks.append({
            "name": f"spectral-vs-monte-carlo(b={b:g})",
            "passed": ok,
            "detail": {
                "psi_spectral": ld.psi.tolist(),
                "psi_mc": est.tolist(),
                "std_err": se.tolist(),
                "method": ld.method,
            },
        })

    sim_delta = 0.25
    sim = simulate(model, horizon, sim_delta, cfg.seed + 1)
    for b in (1.0, 2.0):
        storage_b = replace(cfg.storage, b=b, eta=0.0)
        spec = build_drift(model, q_probe, storage_b, r_inf=cfg.r_inf)
        ld = solve_with_fallback(spec, cfg.search.tol)
        model_gross = evaluate(model, ld.psi, q_probe, b, cfg.market).gross
        expost, _ = expost_profit(sim, q_probe, b, cfg.market, storage_b)
        ok = abs(model_gross - expost) < 0.02
        checks.append({
            "name": f"spectral-vs-expost(b={b:g})",
            "passed": bool(ok),
            "detail": {"model_gross": model_gross, "expost": expost},
        })

    w = sim.samples
    direct = float(np.mean(
        cfg.market.price * (
            q_probe
            - cfg.market.kappa * np.maximum(q_probe - w, 0.0)
            + cfg.market.kappa_prime * np.maximum(w - q_probe, 0.0)
        )
    ))
    expost0, _ = expost_profit(sim, q_probe, 0.0, cfg.market, replace(cfg.storage, b=0.0, eta=0.0))
    checks.append({
        "name": "no-storage-closed-form",
        "passed": bool(abs(expost0 - direct) < 1e-9),
        "detail": {"expost_b0": expost0, "direct": direct},
    })

    spec = build_drift(model, q_probe, replace(cfg.storage, b=1.0), r_inf=cfg.r_inf)
    est1, _ = monte_carlo_psi(spec, 1e4, cfg.seed)
    est2, _ = monte_carlo_psi(spec, 1e4, cfg.seed)
    checks.append({
        "name": "monte-carlo-determinism",
        "passed": bool(np.array_equal(est1, est2)),
        "detail": {},
    })

    all_ok = all(c["passed"] for c in checks)
    (out / "validation.json").write_text(
        json.dumps({"passed": all_ok, "checks": checks}, indent=2, sort_keys=True) + "\n"
    )
    for c in checks:
        print(f"CHECK {c['name']}: {'PASS' if c['passed'] else 'FAIL'}")
    _manifest(out, "validate", cfg, ["validation.json"])
    if not all_ok:
        raise SolverError("validation checks failed; see validation.json")
    return 0


_COMMANDS = {
    "estimate": cmd_estimate,
    "curve": cmd_curve,
    "optimize": cmd_optimize,
    "sweep": cmd_sweep,
    "simulate": cmd_simulate,
    "validate": cmd_validate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="windstore",
        description="Steady-state storage sizing and contracting for wind plants",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--out", default=None, help="output directory (overrides config)")
        p.add_argument("--seed", type=int, default=None, help="seed (overrides config)")
        p.add_argument("--workers", type=int, default=None, help="worker processes")
        p.add_argument("--diagnostics", action="store_true",
                       help="write per-solve diagnostic records")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.out is not None:
            cfg = replace(cfg, out=args.out)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.workers is not None:
            cfg = replace(cfg, workers=args.workers)
        diagnostics = [] if args.diagnostics else None
        if args.diagnostics:
            cfg = replace(cfg, workers=1)  # diagnostics are collected in-process
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        code = _COMMANDS[args.command](cfg, out, diagnostics)
        if diagnostics is not None:
            _write_diagnostics(out / "solver_diagnostics.csv", diagnostics)
        return code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, ModelError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (SolverError, OptimizerError, ContractError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return 4
    except WindstoreError as exc:  # pragma: no cover - safety net
        print(f"error: {exc}", file=sys.stderr)
        return 4


def _write_diagnostics(path: Path, records: list) -> None:
    header = ["n_states", "buffer", "r_inf", "method", "residual", "condition",
              "eigenvalues", "error"]
    rows = []
    for rec in records:
        rows.append(tuple("" if rec[k] is None else rec[k] for k in header))
    write_table(path, header, rows)


if __name__ == "__main__":
    sys.exit(main())
