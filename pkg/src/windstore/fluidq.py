"""Finite-buffer Markov-modulated fluid queue solver.

Builds the per-state drift vector implied by the balancing policy (with
charge/discharge efficiency and constant leakage), solves the limiting
distribution F of the storage level by the spectral method, and derives the
storage-unavailability vector psi = F(0) + pi - F(b).  A stability ladder
(double precision -> extended precision -> drift flooring) and an event-driven
Monte Carlo oracle back the analytic path.

Conventions
-----------
A ``FluidQueueSpec`` is taken literally: the level lives on [0, buffer] and
moves at ``drift[s]`` while the modulating chain sits in state s.  Any jointly
consistent unit system is acceptable (rescaling drift and buffer together does
not change psi).  ``build_drift`` normalizes to per-unit-of-storage level, so
it emits buffer = 1 and keeps the physical size in hours as metadata.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import mpmath
import numpy as np
from mpmath import mp

from .ctmc import CtmcModel
from .errors import (
    ConfigError,
    DataError,
    DegenerateBufferError,
    SolverError,
    UnrecoverableInstabilityError,
)

DEFAULT_TOL = 1e-8
DEFAULT_MP_BITS = 256
_ZERO_EIG_REL = 1e-12
_GRID_POINTS = 100


@dataclass(frozen=True)
class StorageParams:
    """Battery parameters: conversion efficiencies, constant leakage rate in
    (p.u. of b)/h, and size b in hours of full plant capacity."""

    rho_c: float = 0.95
    rho_d: float = 0.95
    eta: float = 0.0
    b: float = 0.0

    def __post_init__(self):
        if not 0 < self.rho_c <= 1 or not 0 < self.rho_d <= 1:
            raise ConfigError("conversion efficiencies must lie in (0, 1]")
        if self.eta < 0:
            raise ConfigError("leakage rate must be >= 0")
        if self.b < 0:
            raise ConfigError("storage size must be >= 0")

    @property
    def round_trip(self) -> float:
        return self.rho_c * self.rho_d


@dataclass(frozen=True)
class FluidQueueSpec:
    """Literal fluid-queue definition: level on [0, buffer] at velocity
    drift[s], modulated by the chain (generator, pi)."""

    drift: np.ndarray
    buffer: float
    generator: np.ndarray
    pi: np.ndarray
    r_inf: float = 0.0
    b_hours: float | None = None

    def __post_init__(self):
        drift = np.asarray(self.drift, dtype=float)
        gen = np.asarray(self.generator, dtype=float)
        pi = np.asarray(self.pi, dtype=float)
        object.__setattr__(self, "drift", drift)
        object.__setattr__(self, "generator", gen)
        object.__setattr__(self, "pi", pi)
        n = drift.size
        if gen.shape != (n, n) or pi.shape != (n,):
            raise ConfigError("drift, generator and pi shapes disagree")
        if not np.all(np.isfinite(drift)):
            raise ConfigError("drift entries must be finite")
        if not self.buffer > 0:
            raise ConfigError("buffer must be positive")
        if not 0 <= self.r_inf < 1:
            raise ConfigError("relative drift floor must lie in [0, 1)")

    @property
    def n_states(self) -> int:
        return self.drift.size


class _SaturatedEvaluator:
    """F for the closed-form cases: identically 0 (mass at the full boundary)
    or identically pi (mass at the empty boundary)."""

    def __init__(self, value):
        self._value = value

    def __call__(self, x):
        return self._value.copy()

    def many(self, xs):
        return np.tile(self._value, (len(xs), 1))


class _SpectralEvaluator:
    """Double-precision F(x) = sum_i a_i phi_i(x) u^i with overflow-safe
    shifted exponentials, extended to zero-drift states via the censoring map."""

    def __init__(self, lam, vectors, coeffs, shift, buffer, n_states, nz, zmap):
        self.lam = lam
        self.vectors = vectors
        self.coeffs = coeffs
        self.shift = shift  # bool per mode: exponent measured from x = buffer
        self.buffer = buffer
        self.n_states = n_states
        self.nz = nz
        self.z = np.setdiff1d(np.arange(n_states), nz)
        self.zmap = zmap  # F_Z = F_N @ zmap, or None

    def __call__(self, x):
        return self.many(np.array([x]))[0]

    def many(self, xs):
        xs = np.asarray(xs, dtype=float)
        offset = np.where(self.shift, -self.buffer, 0.0)
        arg = self.lam[None, :] * (xs[:, None] + offset[None, :])
        fn = (self.coeffs[None, :] * np.exp(arg)) @ self.vectors
        out = np.zeros((xs.size, self.n_states))
        out[:, self.nz] = fn.real
        if self.zmap is not None:
            out[:, self.z] = (fn @ self.zmap).real
        return out


class _SpectralEvaluatorMP:
    """Extended-precision twin of _SpectralEvaluator; keeps the mpmath
    objects so evaluation does not round through float64."""

    def __init__(self, lam, vectors, coeffs, shift, buffer, n_states, nz, zmap, prec):
        self.lam = lam
        self.vectors = vectors  # mp.matrix, modes x len(nz)
        self.coeffs = coeffs
        self.shift = shift
        self.buffer = buffer
        self.n_states = n_states
        self.nz = nz
        self.zmap = zmap  # mp.matrix len(nz) x len(z), or None
        self.prec = prec

    def __call__(self, x):
        with mp.workprec(self.prec):
            m = len(self.lam)
            n_nz = len(self.nz)
            fn = [mp.mpc(0) for _ in range(n_nz)]
            for i in range(m):
                arg = self.lam[i] * ((x - self.buffer) if self.shift[i] else x)
                w = self.coeffs[i] * mp.exp(arg)
                for k in range(n_nz):
                    fn[k] += w * self.vectors[i, k]
            out = np.zeros(self.n_states)
            out[self.nz] = [float(v.real) for v in fn]
            if self.zmap is not None:
                z = np.setdiff1d(np.arange(self.n_states), self.nz)
                for j in range(len(z)):
                    acc = mp.mpc(0)
                    for k in range(n_nz):
                        acc += fn[k] * self.zmap[k, j]
                    out[z[j]] = float(acc.real)
        return out


@dataclass
class LimitingDistribution:
    """Spectral limiting distribution of the storage level.

    ``evaluate(x)`` returns the per-state distribution values F(x, s) for
    x in [0, buffer]; ``psi`` is the storage-unavailability vector.
    """

    eigenvalues: np.ndarray
    vectors: np.ndarray
    coefficients: np.ndarray
    buffer: float
    pi: np.ndarray
    drift: np.ndarray
    psi: np.ndarray
    residual: float
    method: str
    r_inf: float
    condition: float = float("nan")
    fallback_depth: int = 0
    _evaluator: object = field(default=None, repr=False)

    def evaluate(self, x: float) -> np.ndarray:
        if x < -1e-9 or x > self.buffer + 1e-9:
            raise ValueError(f"level {x} outside [0, {self.buffer}]")
        return self._evaluator(min(max(x, 0.0), self.buffer))

    def grid(self, xs) -> np.ndarray:
        xs = np.asarray(xs, dtype=float)
        if xs.size and (xs.min() < -1e-9 or xs.max() > self.buffer + 1e-9):
            raise ValueError(f"levels outside [0, {self.buffer}]")
        xs = np.clip(xs, 0.0, self.buffer)
        if hasattr(self._evaluator, "many"):
            return self._evaluator.many(xs)
        return np.stack([self._evaluator(float(x)) for x in xs])


def build_drift(
    model: CtmcModel, q: float, storage: StorageParams, r_inf: float = 0.0
) -> FluidQueueSpec:
    """Drift vector of the balancing policy in per-unit-of-storage level.

    Charging states store at rho_c, discharging states drain at 1/rho_d, and
    constant leakage eta drains every state.  The emitted spec lives on the
    normalized level domain [0, 1]; the physical size is kept in b_hours.
    """
    if not 0 <= q <= 1:
        raise ConfigError("contract quantity must lie in [0, 1]")
    if storage.b == 0:
        raise DegenerateBufferError(
            "zero-size storage has no fluid queue; use the no-storage closed form"
        )
    w = model.state_values
    drift = np.where(
        w > q,
        storage.rho_c * (w - q) / storage.b,
        (w - q) / (storage.rho_d * storage.b),
    )
    drift[w == q] = 0.0
    drift = drift - storage.eta
    return FluidQueueSpec(
        drift=drift,
        buffer=1.0,
        generator=model.generator,
        pi=model.stationary,
        r_inf=r_inf,
        b_hours=storage.b,
    )


def apply_drift_floor(spec: FluidQueueSpec) -> FluidQueueSpec:
    """Snap small drift entries to 0 or to the relative floor r_inf * max|drift|,
    whichever is closer; entries at or above the floor are untouched."""
    if spec.r_inf == 0:
        return spec
    d = spec.drift.copy()
    thr = spec.r_inf * np.abs(d).max()
    small = np.abs(d) < thr
    to_zero = small & (np.abs(d) <= thr / 2)
    to_floor = small & ~to_zero
    d[to_zero] = 0.0
    d[to_floor] = np.sign(d[to_floor]) * thr
    return replace(spec, drift=d)


def spectral_solve(
    spec: FluidQueueSpec, tol: float = DEFAULT_TOL, *, mp_bits: int | None = None
) -> LimitingDistribution:
    """Solve the limiting distribution for the spec as given.

    Single-signed (or all-zero) drift bypasses the eigenproblem with the
    saturated closed form.  Otherwise the generalized eigenproblem
    lambda u D = u Q is solved on the nonzero-drift states, coefficients come
    from the boundary conditions F(0)=0 (drift > 0) and F(b)=pi (drift < 0),
    and zero-drift components are reconstructed from the censored system.
    Raises SolverError when the boundary residual or the distribution-shape
    invariants fail at ``tol``.
    """
    if tol <= 0:
        raise ConfigError("tolerance must be positive")
    d = spec.drift
    nz = np.flatnonzero(d)
    n = spec.n_states

    if nz.size == 0:
        # no state moves the level; it parks at the empty start
        return _finish(
            spec, _SaturatedEvaluator(spec.pi.copy()), "degenerate-zero-drift", tol,
            eigenvalues=np.empty(0, complex), vectors=np.empty((0, 0), complex),
            coefficients=np.empty(0, complex),
        )
    if np.all(d[nz] > 0):
        return _finish(
            spec, _SaturatedEvaluator(np.zeros(n)), "saturated-full", tol,
            eigenvalues=np.empty(0, complex), vectors=np.empty((0, 0), complex),
            coefficients=np.empty(0, complex),
        )
    if np.all(d[nz] < 0):
        return _finish(
            spec, _SaturatedEvaluator(spec.pi.copy()), "saturated-empty", tol,
            eigenvalues=np.empty(0, complex), vectors=np.empty((0, 0), complex),
            coefficients=np.empty(0, complex),
        )

    if mp_bits is None:
        return _solve_eigen_double(spec, tol)
    return _solve_eigen_mp(spec, tol, mp_bits)


def _finish(spec, evaluator, method, tol, *, eigenvalues, vectors, coefficients,
            condition=float("nan")):
    residual, psi = _validate(evaluator, spec, tol)
    return LimitingDistribution(
        eigenvalues=eigenvalues,
        vectors=vectors,
        coefficients=coefficients,
        buffer=spec.buffer,
        pi=spec.pi.copy(),
        drift=spec.drift.copy(),
        psi=psi,
        residual=residual,
        method=method,
        r_inf=spec.r_inf,
        condition=condition,
        _evaluator=evaluator,
    )


def _validate(evaluator, spec, tol):
    """Check boundary residual, monotonicity, envelope and psi bounds on a
    100-point grid; raise SolverError otherwise.  Returns (residual, psi)."""
    pi, d, L = spec.pi, spec.drift, spec.buffer
    xs = np.linspace(0.0, L, _GRID_POINTS)
    if hasattr(evaluator, "many"):
        G = evaluator.many(xs)
    else:
        G = np.stack([evaluator(x) for x in xs])
    if not np.all(np.isfinite(G)):
        raise SolverError("non-finite values in the limiting distribution")

    pos, neg = d > 0, d < 0
    res0 = np.abs(G[0][pos]).max() if pos.any() else 0.0
    resb = np.abs(G[-1][neg] - pi[neg]).max() if neg.any() else 0.0
    residual = max(res0, resb)
    if residual > tol:
        raise SolverError(
            f"boundary residual {residual:.3e} exceeds {tol:.1e}", residual=residual
        )
    if np.diff(G, axis=0).min() < -tol:
        raise SolverError(
            f"distribution not monotone (worst step {np.diff(G, axis=0).min():.3e})",
            residual=residual,
        )
    if G.min() < -tol or (G - pi[None, :]).max() > tol:
        raise SolverError("distribution escapes the [0, pi] envelope", residual=residual)
    psi = G[0] + pi - G[-1]
    if psi.min() < -tol or (psi - pi).max() > tol:
        raise SolverError("psi escapes the [0, pi] envelope", residual=residual)
    return residual, np.clip(psi, 0.0, pi)


def _censor(Q, nz, z):
    """Censored generator on the nonzero-drift states and the map W with
    F_Z = F_N @ W (Schur complement on the zero-drift block)."""
    if z.size == 0:
        return Q[np.ix_(nz, nz)], None
    Qzz = Q[np.ix_(z, z)]
    W = -Q[np.ix_(nz, z)] @ np.linalg.inv(Qzz)
    return Q[np.ix_(nz, nz)] + W @ Q[np.ix_(z, nz)], W


def _solve_eigen_double(spec, tol):
    Q, d, pi, L = spec.generator, spec.drift, spec.pi, spec.buffer
    nz = np.flatnonzero(d)
    z = np.flatnonzero(d == 0)
    Qt, W = _censor(Q, nz, z)
    dn = d[nz]

    M = Qt / dn[None, :]
    lam, V = np.linalg.eig(M.T)  # columns of V: left eigenvectors of M
    if not np.all(np.isfinite(lam)) or not np.all(np.isfinite(V)):
        raise SolverError("eigensolver returned non-finite output")
    U = V.T
    big = np.abs(lam).max()
    lam = np.where(np.abs(lam) < _ZERO_EIG_REL * big, 0.0 + 0.0j, lam)
    shift = lam.real > 0

    # build branch-by-branch: np.where would evaluate overflowing exponentials
    phi0 = np.ones(lam.size, dtype=complex)
    phi0[shift] = np.exp(-lam[shift] * L)
    phib = np.ones(lam.size, dtype=complex)
    phib[~shift] = np.exp(lam[~shift] * L)
    rows, rhs = [], []
    for k, s in enumerate(nz):
        if dn[k] > 0:
            rows.append(phi0 * U[:, k])
            rhs.append(0.0)
        else:
            rows.append(phib * U[:, k])
            rhs.append(pi[s])
    B = np.array(rows)
    coeffs, *_ = np.linalg.lstsq(B, np.asarray(rhs, dtype=complex), rcond=None)
    if not np.all(np.isfinite(coeffs)):
        raise SolverError("boundary system produced non-finite coefficients")

    evaluator = _SpectralEvaluator(
        lam, U, coeffs, shift, L, spec.n_states, nz, W.astype(complex) if W is not None else None
    )
    cond = float(np.linalg.cond(B))
    return _finish(
        spec, evaluator, "double", tol,
        eigenvalues=lam, vectors=U, coefficients=coeffs, condition=cond,
    )


def _solve_eigen_mp(spec, tol, bits):
    Q, d, pi, L = spec.generator, spec.drift, spec.pi, spec.buffer
    nz = np.flatnonzero(d)
    z = np.flatnonzero(d == 0)
    n_nz = nz.size
    with mp.workprec(bits):
        Qmp = mp.matrix(Q.tolist())
        if z.size:
            Qzz = mp.matrix([[Qmp[i, j] for j in z] for i in z])
            Qnz = mp.matrix([[Qmp[i, j] for j in z] for i in nz])
            Qzn = mp.matrix([[Qmp[i, j] for j in nz] for i in z])
            Wmp = -Qnz * (Qzz ** -1)
            Qt = mp.matrix([[Qmp[i, j] for j in nz] for i in nz]) + Wmp * Qzn
        else:
            Wmp = None
            Qt = mp.matrix([[Qmp[i, j] for j in nz] for i in nz])
        dn = [mp.mpf(float(d[s])) for s in nz]

        # A = (Qt / d_col).T so right eigenvectors of A are left modes
        A = mp.matrix(n_nz, n_nz)
        for i in range(n_nz):
            for j in range(n_nz):
                A[i, j] = Qt[j, i] / dn[i]
        try:
            E, ER = mpmath.eig(A)
        except Exception as exc:  # mpmath raises bare exceptions on breakdown
            raise SolverError(f"extended-precision eigensolver failed: {exc}") from exc

        big = max(abs(e) for e in E)
        lam = [mp.mpc(0) if abs(e) < _ZERO_EIG_REL * big else e for e in E]
        shift = [e.real > 0 for e in lam]
        U = mp.matrix(n_nz, n_nz)  # rows are modes
        for i in range(n_nz):
            for k in range(n_nz):
                U[i, k] = ER[k, i]

        B = mp.matrix(n_nz, n_nz)
        rhs = mp.matrix(n_nz, 1)
        for r, (k, s) in enumerate(zip(range(n_nz), nz)):
            if dn[k] > 0:
                for i in range(n_nz):
                    B[r, i] = U[i, k] * (mp.exp(-lam[i] * L) if shift[i] else mp.mpf(1))
                rhs[r] = mp.mpf(0)
            else:
                for i in range(n_nz):
                    B[r, i] = U[i, k] * (mp.mpf(1) if shift[i] else mp.exp(lam[i] * L))
                rhs[r] = mp.mpf(float(pi[s]))
        try:
            coeffs = mp.lu_solve(B, rhs)
        except Exception as exc:
            raise SolverError(f"extended-precision boundary solve failed: {exc}") from exc

        evaluator = _SpectralEvaluatorMP(
            lam, U, [coeffs[i] for i in range(n_nz)], shift, L,
            spec.n_states, nz, Wmp, bits,
        )
        lam_f = np.array([complex(e) for e in lam])
        U_f = np.array([[complex(U[i, k]) for k in range(n_nz)] for i in range(n_nz)])
        c_f = np.array([complex(coeffs[i]) for i in range(n_nz)])
    return _finish(
        spec, evaluator, f"mp{bits}", tol,
        eigenvalues=lam_f, vectors=U_f, coefficients=c_f,
    )


def _fallback_ladder(r0, start, escalation):
    vals = [r0]
    r = start if r0 == 0 else r0 * escalation
    while r <= 0.5 + 1e-12:
        vals.append(r)
        r *= escalation
    return vals


def solve_with_fallback(
    spec: FluidQueueSpec,
    tol: float = DEFAULT_TOL,
    *,
    mp_bits: int = DEFAULT_MP_BITS,
    escalation: float = 2.0,
    floor_start: float = 0.1,
    diagnostics: list | None = None,
) -> LimitingDistribution:
    """Stability ladder around spectral_solve.

    Attempt order: double precision, then extended precision, then raise the
    relative drift floor (x ``escalation`` starting at ``floor_start``) and
    retry both.  The first solution meeting ``tol`` is returned with its
    method annotation; exhausting floors beyond 0.5 raises
    UnrecoverableInstabilityError.
    """
    if tol <= 0:
        raise ConfigError("tolerance must be positive")
    attempts = []
    depth = 0
    for r_inf in _fallback_ladder(spec.r_inf, floor_start, escalation):
        trial = apply_drift_floor(replace(spec, r_inf=r_inf)) if r_inf > 0 else spec
        for bits in (None, mp_bits):
            label = ("double" if bits is None else f"mp{bits}") + (
                f"+rinf{r_inf:g}" if r_inf > spec.r_inf else ""
            )
            try:
                ld = spectral_solve(trial, tol, mp_bits=bits)
            except SolverError as exc:
                attempts.append((label, str(exc)))
                if diagnostics is not None:
                    diagnostics.append(_diag_record(trial, label, None, str(exc)))
                depth += 1
                continue
            if "saturated" not in ld.method and "degenerate" not in ld.method:
                ld.method = label
            ld.r_inf = r_inf
            ld.fallback_depth = depth
            if diagnostics is not None:
                diagnostics.append(_diag_record(trial, ld.method, ld, None))
            return ld
    raise UnrecoverableInstabilityError(
        f"no stable solution up to r_inf = 0.5 (attempts: {attempts})",
        attempts=attempts,
    )


def _diag_record(spec, label, ld, error):
    return {
        "n_states": spec.n_states,
        "buffer": spec.buffer,
        "r_inf": spec.r_inf,
        "method": label,
        "residual": None if ld is None else ld.residual,
        "condition": None if ld is None else ld.condition,
        "eigenvalues": "" if ld is None else ";".join(
            f"{e.real:.6g}{e.imag:+.3g}j" for e in np.atleast_1d(ld.eigenvalues)
        ),
        "error": error,
    }


def monte_carlo_psi(
    spec: FluidQueueSpec,
    horizon_hours: float,
    seed: int,
    *,
    n_batches: int = 100,
) -> tuple[np.ndarray, np.ndarray]:
    """Event-driven estimate of psi with batch-means standard errors.

    Simulates the modulating chain exactly, moves the level piecewise linearly
    clipped to [0, buffer], and accumulates per-state time saturated at a
    boundary.  Bit-reproducible for a fixed seed.
    """
    if horizon_hours < 1e4:
        raise DataError("Monte Carlo horizon must be at least 1e4 hours")
    from ._kernels import fluid_queue_sim

    n = spec.n_states
    d, L = spec.drift, spec.buffer
    rng = np.random.default_rng(seed)
    if n == 1:
        # deterministic level path: saturates after |level change| / |drift|
        t_hit = 0.0 if d[0] == 0 else L / abs(d[0]) if d[0] > 0 else 0.0
        est = np.array([max(horizon_hours - t_hit, 0.0) / horizon_hours])
        return est, np.zeros(1)

    rates = -np.diag(spec.generator)
    if rates.min() <= 0:
        raise DataError("every state needs a positive exit rate to simulate")
    jump = spec.generator / rates[:, None]
    np.fill_diagonal(jump, 0.0)
    pcum = np.cumsum(jump, axis=1)
    pcum[:, -1] = 1.0

    batch_len = horizon_hours / n_batches
    bt = np.zeros((n_batches, n))
    state = int(rng.choice(n, p=spec.pi))
    level, t = 0.0, 0.0
    chunk = 1 << 16
    while t < horizon_hours:
        u_hold = rng.random(chunk)
        u_jump = rng.random(chunk)
        state, level, t = fluid_queue_sim(
            pcum, rates, d, L, horizon_hours, batch_len,
            u_hold, u_jump, state, level, t, bt,
        )
    estimate = bt.sum(axis=0) / horizon_hours
    batch_means = bt / batch_len
    std_err = batch_means.std(axis=0, ddof=1) / np.sqrt(n_batches)
    return estimate, std_err
