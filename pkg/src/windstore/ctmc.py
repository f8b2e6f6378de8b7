"""Continuous-time Markov chain models of per-unit wind power output.

Builds a discrete-state CTMC from a sampled wind power trace (rolling-mean
smoothing, level discretization, transition counting) and provides the
stationary distribution plus trajectory simulation for validation work.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import DataError, EstimationError, ModelError

_ROW_SUM_TOL = 1e-10
_PI_RESIDUAL_TOL = 1e-10
_PI_SUM_TOL = 1e-12


@dataclass(frozen=True)
class WindTrace:
    """Per-unit wind power series on a regular sampling grid.

    samples are already normalized to [0, 1]; ``capacity`` records the
    nameplate MW used for that normalization.
    """

    samples: np.ndarray
    delta: float = 1.0
    capacity: float = 1.0

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        object.__setattr__(self, "samples", samples)
        if samples.ndim != 1 or samples.size < 2:
            raise DataError("wind trace needs at least two samples")
        if not np.all(np.isfinite(samples)):
            raise DataError("wind trace contains non-finite samples")
        if samples.min() < 0.0 or samples.max() > 1.0:
            raise DataError("per-unit wind samples must lie in [0, 1]")
        if not self.delta > 0:
            raise DataError("sampling period must be positive")
        if not self.capacity > 0:
            raise DataError("capacity must be positive")

    def __len__(self):
        return self.samples.size

    @property
    def hours(self) -> float:
        return self.samples.size * self.delta


@dataclass(frozen=True)
class CtmcModel:
    """Wind CTMC: state levels, generator matrix (1/h) and stationary vector."""

    n_states: int
    state_values: np.ndarray
    generator: np.ndarray
    stationary: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.state_values, dtype=float)
        gen = np.asarray(self.generator, dtype=float)
        pi = np.asarray(self.stationary, dtype=float)
        object.__setattr__(self, "state_values", values)
        object.__setattr__(self, "generator", gen)
        object.__setattr__(self, "stationary", pi)
        n = self.n_states
        if values.shape != (n,) or gen.shape != (n, n) or pi.shape != (n,):
            raise ModelError("inconsistent model shapes")
        if n > 1 and not np.all(np.diff(values) > 0):
            raise ModelError("state values must be strictly increasing")
        if np.abs(gen.sum(axis=1)).max() > _ROW_SUM_TOL:
            raise ModelError("generator rows must sum to zero")
        off = gen[~np.eye(n, dtype=bool)]
        if off.size and off.min() < 0:
            raise ModelError("off-diagonal generator entries must be >= 0")
        if pi.min() < 0 or abs(pi.sum() - 1.0) > _PI_SUM_TOL:
            raise ModelError("stationary vector must be a probability vector")
        if np.abs(pi @ gen).max() > _PI_RESIDUAL_TOL:
            raise ModelError("stationary vector does not satisfy pi @ Q = 0")

    @property
    def mean_output(self) -> float:
        """Long-run average per-unit output (feed-in-tariff benchmark)."""
        return float(self.stationary @ self.state_values)


def preprocess(trace: WindTrace, window_hours: float) -> WindTrace:
    """Centered rolling mean over ``window_hours``; edge windows are truncated
    to the available samples so the trace length is preserved."""
    if window_hours < trace.delta:
        raise DataError("averaging window must be at least one sampling period")
    k = max(1, int(round(window_hours / trace.delta)))
    x = trace.samples
    if k == 1:
        return WindTrace(x.copy(), trace.delta, trace.capacity)
    left, right = (k - 1) // 2, k // 2
    csum = np.concatenate(([0.0], np.cumsum(x)))
    idx = np.arange(x.size)
    lo = np.maximum(idx - left, 0)
    hi = np.minimum(idx + right, x.size - 1)
    means = (csum[hi + 1] - csum[lo]) / (hi + 1 - lo)
    # rounding can push a mean a hair outside [0, 1]
    return WindTrace(np.clip(means, 0.0, 1.0), trace.delta, trace.capacity)


def discretize(
    trace: WindTrace,
    n_levels: int,
    *,
    bin_edges: str = "uniform",
    state_value: str = "midpoint",
) -> tuple[np.ndarray, np.ndarray]:
    """Map samples to ``n_levels`` bins over [0, 1].

    Uniform bins are [k/n, (k+1)/n); a sample exactly on an interior edge goes
    to the upper bin and 1.0 goes to the top bin.  ``bin_edges="quantile"``
    uses empirical quantile edges instead; ``state_value="mean"`` replaces bin
    midpoints with the conditional mean of the samples in each bin.
    """
    if n_levels < 2:
        raise DataError("need at least two discretization levels")
    x = trace.samples
    if bin_edges == "uniform":
        labels = np.clip(np.floor(x * n_levels).astype(np.int64), 0, n_levels - 1)
        edges = np.arange(n_levels + 1) / n_levels
    elif bin_edges == "quantile":
        interior = np.quantile(x, np.arange(1, n_levels) / n_levels)
        labels = np.searchsorted(interior, x, side="right").astype(np.int64)
        edges = np.concatenate(([0.0], interior, [1.0]))
    else:
        raise DataError(f"unknown bin_edges mode {bin_edges!r}")

    if state_value == "midpoint":
        values = 0.5 * (edges[:-1] + edges[1:])
    elif state_value == "mean":
        values = np.empty(n_levels)
        for k in range(n_levels):
            sel = labels == k
            values[k] = x[sel].mean() if sel.any() else 0.5 * (edges[k] + edges[k + 1])
    else:
        raise DataError(f"unknown state_value mode {state_value!r}")
    return labels, values


def estimate(labels, state_values, delta: float) -> CtmcModel:
    """Max-likelihood CTMC from a label sequence: count consecutive
    transitions, row-normalize to P, convert with Q = (P - I) / delta.

    States never visited are dropped and indices compacted.  A visited state
    with no observed transition to a different state would be absorbing and
    raises an estimation error.
    """
    labels = np.asarray(labels, dtype=np.int64)
    state_values = np.asarray(state_values, dtype=float)
    if labels.size < 2:
        raise EstimationError("need at least two labels to count transitions")
    if labels.min() < 0 or labels.max() >= state_values.size:
        raise EstimationError("label outside the state-value range")
    if not delta > 0:
        raise EstimationError("sampling period must be positive")

    visited = np.unique(labels)
    remap = np.full(state_values.size, -1, dtype=np.int64)
    remap[visited] = np.arange(visited.size)
    seq = remap[labels]
    n = visited.size

    counts = np.zeros((n, n))
    np.add.at(counts, (seq[:-1], seq[1:]), 1.0)
    leaving = counts.sum(axis=1) - np.diag(counts)
    dead = np.flatnonzero(leaving == 0)
    if dead.size:
        names = ", ".join(
            f"{visited[k]} (w={state_values[visited[k]]:.4g})" for k in dead
        )
        raise EstimationError(f"absorbing observed state(s): {names}")

    transition = counts / counts.sum(axis=1, keepdims=True)
    generator = (transition - np.eye(n)) / delta
    pi = stationary_distribution(generator)
    return CtmcModel(
        n_states=n,
        state_values=state_values[visited],
        generator=generator,
        stationary=pi,
    )


def stationary_distribution(generator) -> np.ndarray:
    """Solve pi @ Q = 0, sum(pi) = 1 for an irreducible generator."""
    Q = np.asarray(generator, dtype=float)
    n = Q.shape[0]
    if Q.shape != (n, n):
        raise ModelError("generator must be square")
    if np.abs(Q.sum(axis=1)).max() > _ROW_SUM_TOL:
        raise ModelError("generator rows must sum to zero")
    off = Q[~np.eye(n, dtype=bool)]
    if off.size and off.min() < 0:
        raise ModelError("off-diagonal generator entries must be >= 0")
    if n == 1:
        return np.ones(1)

    ncomp, _ = connected_components(
        csr_matrix((Q > 0).astype(np.int8)), directed=True, connection="strong"
    )
    if ncomp != 1:
        raise ModelError(f"generator is reducible ({ncomp} communicating classes)")
    # the smallest singular direction is the stationary one; a second near-null
    # direction means the chain is numerically reducible
    _, sv, vh = np.linalg.svd(Q.T)
    if sv[0] <= 0:
        raise ModelError("generator is identically zero")
    if sv[-2] <= 1e-8 * sv[0]:
        raise ModelError(
            "generator is numerically rank-deficient beyond the stationary direction"
        )
    v = vh[-1]
    total = v.sum()
    if abs(total) < 1e-12:
        raise ModelError("null vector has zero mass; generator is not a valid chain")
    pi = v / total
    if pi.min() < -1e-10:
        raise ModelError("stationary solve produced negative probabilities")
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def simulate(model: CtmcModel, hours: float, delta: float, seed: int) -> WindTrace:
    """Sample-and-hold trace of a CTMC trajectory on a regular delta grid."""
    if hours <= delta:
        raise DataError("simulation horizon must exceed the sampling period")
    states, end_times = _sample_path(model, hours, seed)
    n_samples = int(hours / delta)
    grid = np.arange(n_samples) * delta
    idx = np.searchsorted(end_times, grid, side="right")
    return WindTrace(model.state_values[states[idx]], delta, 1.0)


def _sample_path(model: CtmcModel, hours: float, seed: int):
    """Event-driven CTMC path: per-sojourn states and cumulative end times."""
    rng = np.random.default_rng(seed)
    n = model.n_states
    rates = -np.diag(model.generator)
    if n == 1:
        return np.zeros(1, dtype=np.int64), np.array([hours])
    if rates.min() <= 0:
        raise ModelError("every state needs a positive exit rate to simulate")
    jump = model.generator / rates[:, None]
    np.fill_diagonal(jump, 0.0)
    pcum = np.cumsum(jump, axis=1)
    pcum[:, -1] = 1.0

    s0 = int(rng.choice(n, p=model.stationary))
    chunk = 1 << 16
    state_chunks, time_chunks = [], []
    t, s = 0.0, s0
    while t < hours:
        u = rng.random(chunk)
        states = _embedded_chain(pcum, u, s)
        taus = rng.exponential(1.0, chunk) / rates[states[:-1]]
        state_chunks.append(states[:-1])
        time_chunks.append(taus)
        t += taus.sum()
        s = int(states[-1])
    states = np.concatenate(state_chunks)
    end_times = np.cumsum(np.concatenate(time_chunks))
    return states, end_times


def _embedded_chain(pcum, u, s0):
    from ._kernels import embedded_chain

    return embedded_chain(pcum, u, s0)


def load_trace(
    path,
    *,
    capacity: float | None = None,
    delta: float | None = None,
) -> WindTrace:
    """Read a wind trace from delimited text.

    Requires a header row with either ``timestamp,power_mw`` columns (capacity
    must then be supplied; delta is inferred from timestamps unless given, and
    an explicit delta wins over the inferred one with a warning on mismatch)
    or a single ``power_pu`` column.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"trace file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip().lower() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty trace file") from None
        rows = [row for row in reader if row and any(cell.strip() for cell in row)]

    if "power_pu" in header:
        col = header.index("power_pu")
        values = _parse_column(rows, col, path)
        if values.min() < -1e-9 or values.max() > 1 + 1e-9:
            raise DataError(f"{path}: power_pu values outside [0, 1]")
        return WindTrace(np.clip(values, 0.0, 1.0), delta or 1.0, capacity or 1.0)

    if "power_mw" in header:
        if capacity is None:
            raise DataError(f"{path}: power_mw input needs a configured capacity")
        col = header.index("power_mw")
        values = _parse_column(rows, col, path) / capacity
        if values.min() < -1e-9 or values.max() > 1 + 1e-6:
            raise DataError(f"{path}: normalized power outside [0, 1]; check capacity")
        inferred = None
        if "timestamp" in header:
            inferred = _infer_delta(rows, header.index("timestamp"), path)
        if delta is None:
            if inferred is None:
                raise DataError(f"{path}: cannot infer delta; configure it explicitly")
            delta = inferred
        elif inferred is not None and abs(inferred - delta) > 1e-6:
            warnings.warn(
                f"{path}: configured delta {delta} h differs from timestamps "
                f"({inferred:.6g} h); using the configured value",
                stacklevel=2,
            )
        return WindTrace(np.clip(values, 0.0, 1.0), delta, capacity)

    raise DataError(f"{path}: header must contain power_pu or timestamp,power_mw")


def _parse_column(rows, col, path) -> np.ndarray:
    values = np.empty(len(rows))
    for i, row in enumerate(rows):
        try:
            values[i] = float(row[col])
        except (ValueError, IndexError):
            raise DataError(f"{path}: bad value on line {i + 2}") from None
    return values


def _infer_delta(rows, col, path) -> float | None:
    def as_hours(cell):
        cell = cell.strip()
        try:
            return float(cell)
        except ValueError:
            try:
                return datetime.fromisoformat(cell).timestamp() / 3600.0
            except ValueError:
                raise DataError(f"{path}: unparseable timestamp {cell!r}") from None

    stamps = [as_hours(row[col]) for row in rows[: min(len(rows), 1000)]]
    diffs = np.diff(stamps)
    if diffs.size == 0 or np.any(diffs <= 0):
        return None
    return float(np.median(diffs))
