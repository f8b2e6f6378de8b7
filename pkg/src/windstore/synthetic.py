"""Built-in models and generated wind data for validation and demos."""

from __future__ import annotations

import numpy as np

from .ctmc import CtmcModel, WindTrace, stationary_distribution


def reference_model() -> CtmcModel:
    """Small three-state wind model used by the validation command and tests."""
    generator = np.array(
        [
            [-0.30, 0.25, 0.05],
            [0.20, -0.45, 0.25],
            [0.05, 0.30, -0.35],
        ]
    )
    return CtmcModel(
        n_states=3,
        state_values=np.array([0.10, 0.45, 0.85]),
        generator=generator,
        stationary=stationary_distribution(generator),
    )


def random_irreducible_model(
    rng: np.random.Generator,
    n_states: int,
    *,
    rate_lo: float = 0.15,
    rate_hi: float = 1.2,
) -> CtmcModel:
    """Dense random generator with off-diagonal rates in [rate_lo, rate_hi]
    and evenly spread state values; always irreducible by construction."""
    rates = rng.uniform(rate_lo, rate_hi, (n_states, n_states))
    np.fill_diagonal(rates, 0.0)
    generator = rates - np.diag(rates.sum(axis=1))
    lo, hi = sorted(rng.uniform(0.02, 0.98, 2))
    if hi - lo < 0.2:
        lo, hi = 0.1, 0.9
    values = np.linspace(lo, hi, n_states)
    return CtmcModel(
        n_states=n_states,
        state_values=values,
        generator=generator,
        stationary=stationary_distribution(generator),
    )


def synthetic_wind_trace(
    hours: int = 2 * 8760,
    delta: float = 1.0,
    seed: int = 1,
    *,
    persistence: float = 0.97,
    weibull_shape: float = 2.2,
    weibull_scale: float = 10.0,
    cut_in: float = 3.0,
    rated: float = 11.0,
) -> WindTrace:
    """Hourly wind-plant-like per-unit output series.

    A stationary Gaussian AR(1) (lag-1 autocorrelation ``persistence``) is
    pushed through its own CDF onto Weibull wind speeds, then through a
    cubic cut-in/rated power curve.  The saturation at rated power gives the
    characteristic output marginal of real plants: mass spikes near 0 and 1
    with strong short-range autocorrelation.
    """
    n = int(round(hours / delta))
    rng = np.random.default_rng(seed)
    innovations = rng.standard_normal(n)
    z = np.empty(n)
    z[0] = innovations[0]
    scale = np.sqrt(1.0 - persistence**2)
    for t in range(1, n):
        z[t] = persistence * z[t - 1] + scale * innovations[t]
    u = np.clip(_norm_cdf(z), 1e-12, 1 - 1e-12)
    speed = weibull_scale * (-np.log1p(-u)) ** (1.0 / weibull_shape)
    ramp = np.clip((speed**3 - cut_in**3) / (rated**3 - cut_in**3), 0.0, 1.0)
    return WindTrace(ramp, delta, 1.0)


def _norm_cdf(x):
    from scipy.special import ndtr

    return ndtr(x)
