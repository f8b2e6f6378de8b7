"""Compiled inner loops for the trajectory simulators.

Kept in one module so the numba import cost is paid once and the pure-Python
API modules stay importable without triggering compilation.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def embedded_chain(pcum, u, s0):
    """Jump-chain states driven by presampled uniforms.

    pcum holds cumulative next-state probabilities per row (self excluded).
    Returns len(u) + 1 states starting at s0.
    """
    m = u.size
    out = np.empty(m + 1, np.int64)
    out[0] = s0
    s = s0
    for k in range(m):
        s = np.searchsorted(pcum[s], u[k], side="right")
        if s >= pcum.shape[1]:
            s = pcum.shape[1] - 1
        out[k + 1] = s
    return out


@njit(cache=True)
def fluid_queue_sim(
    pcum, rates, drift, buf, horizon, batch_len, u_hold, u_jump, state, level, t, bt
):
    """Advance the fluid-queue simulation through one chunk of uniforms.

    bt accumulates per-(batch, state) time spent saturated: at level 0 while
    the drift is <= 0 or at level ``buf`` while the drift is >= 0 (a zero-drift
    state parked on a boundary counts for both, matching the limiting
    distribution's boundary atoms).  Returns the carried (state, level, t).
    """
    n_batches = bt.shape[0]
    for k in range(u_hold.size):
        if t >= horizon:
            break
        tau = -np.log(u_hold[k]) / rates[state]
        if t + tau > horizon:
            tau = horizon - t
        batch = int(t / batch_len)
        if batch >= n_batches:
            batch = n_batches - 1
        d = drift[state]
        if d > 0.0:
            hit = (buf - level) / d
            if tau > hit:
                bt[batch, state] += tau - hit
                level = buf
            else:
                level += d * tau
        elif d < 0.0:
            hit = level / (-d)
            if tau > hit:
                bt[batch, state] += tau - hit
                level = 0.0
            else:
                level += d * tau
        else:
            if level <= 0.0 or level >= buf:
                bt[batch, state] += tau
        t += tau
        state = np.searchsorted(pcum[state], u_jump[k], side="right")
        if state >= pcum.shape[1]:
            state = pcum.shape[1] - 1
    return state, level, t


@njit(cache=True)
def dispatch_loop(
    w,
    q,
    b,
    delta,
    rho_c,
    rho_d,
    kappa,
    kappa_prime,
    surplus_external,
    shortfall_external,
):
    """Balancing-policy dispatch over a sampled trace.

    Starts from an empty store.  Returns (penalty, revenue, shortfall_ext,
    surplus_ext, final_soc): penalties/revenues are price-weighted totals,
    the *_ext totals are external-side imbalance energy.
    """
    x = 0.0
    penalty = 0.0
    revenue = 0.0
    shortfall_ext = 0.0
    surplus_ext = 0.0
    for t in range(w.size):
        diff = w[t] - q
        if diff > 0.0:
            xn = x + rho_c * delta * diff
            if xn > b:
                over = xn - b
                ext = over / rho_c
                surplus_ext += ext
                revenue += kappa_prime * (ext if surplus_external else over)
                xn = b
            x = xn
        elif diff < 0.0:
            xn = x - delta * (-diff) / rho_d
            if xn < 0.0:
                deficit = -xn
                ext = deficit * rho_d
                shortfall_ext += ext
                penalty += kappa * (ext if shortfall_external else deficit)
                xn = 0.0
            x = xn
    return penalty, revenue, shortfall_ext, surplus_ext, x
