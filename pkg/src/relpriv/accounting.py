"""Renyi-divergence privacy accounting for subsampled Gaussian steps.

Tracks, per order alpha on a fixed grid, the accumulated divergence of T
Poisson-subsampled Gaussian mechanisms with sampling ratio q and noise
multiplier sigma, then converts to (epsilon, delta) by minimizing

    eps(alpha) = rdp(alpha) + ln((alpha-1)/alpha) - (ln delta + ln alpha)/(alpha-1)

over the grid. Per-order values for integer alpha >= 2 use the closed
binomial sum

    rdp(alpha) = ln( sum_{j=0..alpha} C(alpha,j) (1-q)^(alpha-j) q^j
                     exp(j(j-1)/(2 sigma^2)) ) / (alpha - 1)

evaluated in log space. Fractional grid orders below 2 reuse the value at
ceil(alpha), which upper-bounds them (divergence is non-decreasing in the
order), so every reported epsilon stays a valid bound. The resulting
guarantees are correct but slightly looser than numerical-composition
accountants; reports should always carry the accountant kind.

Example:

    state = compose(fresh_state(), q=0.01, sigma=0.8, steps=1000)
    eps, order = to_epsilon(state, delta=1e-5)
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

from relpriv.errors import CalibrationError, ConfigError

DEFAULT_ORDERS: tuple = (1.25, 1.5, 1.75) + tuple(float(a) for a in range(2, 257))

DEFAULT_SIGMA_BOUNDS = (0.05, 1000.0)


@dataclass(frozen=True)
class AccountantState:
    """Composition history plus derived per-order accumulators.

    Steps are coalesced per exact (q, sigma) pair and the accumulators are
    products steps * per_order, which keeps composition additivity exact:
    accounting T1 then T2 steps of one mechanism equals accounting T1 + T2
    at once, bit for bit.
    """

    orders: tuple
    history: tuple  # (q, sigma, steps), steps coalesced per (q, sigma)

    @property
    def rdp(self) -> np.ndarray:
        total = np.zeros(len(self.orders))
        for q, sigma, steps in self.history:
            total += steps * np.array(
                [rdp_subsampled_gaussian(q, sigma, a) for a in self.orders]
            )
        return total


def fresh_state(orders=DEFAULT_ORDERS) -> AccountantState:
    orders = tuple(float(a) for a in orders)
    if any(a <= 1.0 for a in orders):
        raise ConfigError("all orders must exceed 1")
    return AccountantState(orders=orders, history=())


def rdp_subsampled_gaussian(q: float, sigma: float, order: float) -> float:
    """Per-step divergence of one subsampled Gaussian release at one order."""
    if not 0.0 <= q <= 1.0:
        raise ConfigError(f"sampling ratio {q} must lie in [0, 1]")
    if sigma <= 0.0:
        raise ConfigError("noise multiplier must be positive for accounting")
    if order <= 1.0:
        raise ConfigError("order must exceed 1")
    alpha = int(math.ceil(order))  # fractional orders use the integer bound above them
    if q == 0.0:
        return 0.0
    if q == 1.0:
        return alpha / (2.0 * sigma * sigma)
    js = np.arange(alpha + 1, dtype=np.float64)
    log_binom = gammaln(alpha + 1) - gammaln(js + 1) - gammaln(alpha - js + 1)
    log_terms = (
        log_binom
        + js * math.log(q)
        + (alpha - js) * math.log1p(-q)
        + js * (js - 1.0) / (2.0 * sigma * sigma)
    )
    return float(logsumexp(log_terms)) / (alpha - 1.0)


def compose(state: AccountantState, q: float, sigma: float, steps: int) -> AccountantState:
    """Account for `steps` further subsampled Gaussian releases."""
    if steps < 0:
        raise ConfigError("step count must be non-negative")
    if steps == 0:
        return state
    rdp_subsampled_gaussian(q, sigma, state.orders[0])  # validate (q, sigma) now
    merged = []
    seen = False
    for hq, hsigma, hsteps in state.history:
        if hq == q and hsigma == sigma:
            merged.append((hq, hsigma, hsteps + steps))
            seen = True
        else:
            merged.append((hq, hsigma, hsteps))
    if not seen:
        merged.append((q, sigma, steps))
    return AccountantState(orders=state.orders, history=tuple(merged))


def to_epsilon(state: AccountantState, delta: float):
    """Convert accumulated divergence to (epsilon, best order).

    An empty history (or all-zero accumulators) is a no-op mechanism and
    reports epsilon 0 with no distinguished order.
    """
    if not 0.0 < delta < 1.0:
        raise ConfigError(f"delta {delta} must lie in (0, 1)")
    rdp = state.rdp
    if not state.history or not rdp.any():
        return 0.0, None
    orders = np.array(state.orders)
    candidates = (
        rdp
        + np.log((orders - 1.0) / orders)
        - (math.log(delta) + np.log(orders)) / (orders - 1.0)
    )
    idx = int(np.argmin(candidates))
    return max(0.0, float(candidates[idx])), float(orders[idx])


def epsilon_for(
    q: float, sigma: float, steps: int, delta: float, orders=DEFAULT_ORDERS
):
    """Epsilon of a uniform run: steps releases at fixed (q, sigma)."""
    return to_epsilon(compose(fresh_state(orders), q, sigma, steps), delta)


def calibrate_sigma(
    target_epsilon: float,
    delta: float,
    q: float,
    steps: int,
    *,
    orders=DEFAULT_ORDERS,
    sigma_bounds=DEFAULT_SIGMA_BOUNDS,
    epsilon_tol: float = 0.01,
    sigma_tol: float = 1e-4,
) -> float:
    """Smallest noise multiplier meeting the target epsilon, by bisection.

    Stops once the achieved epsilon is within epsilon_tol of the target or
    the sigma bracket has shrunk to sigma_tol. Raises CalibrationError when
    the target is infeasible within the sigma bounds.
    """
    if target_epsilon <= 0.0:
        raise ConfigError("target epsilon must be positive")
    lo, hi = sigma_bounds
    if not 0.0 < lo < hi:
        raise ConfigError("invalid sigma bounds")

    def achieved(sigma: float) -> float:
        return epsilon_for(q, sigma, steps, delta, orders)[0]

    if achieved(lo) <= target_epsilon:
        return lo
    eps_hi = achieved(hi)
    if eps_hi > target_epsilon:
        raise CalibrationError(
            f"target epsilon {target_epsilon} infeasible: even sigma {hi} "
            f"only reaches epsilon {eps_hi:.4f}"
        )
    eps_feasible = eps_hi
    while hi - lo > sigma_tol:
        mid = 0.5 * (lo + hi)
        eps_mid = achieved(mid)
        if eps_mid <= target_epsilon:
            hi = mid
            eps_feasible = eps_mid
            if target_epsilon - eps_feasible <= epsilon_tol:
                break
        else:
            lo = mid
    return hi
