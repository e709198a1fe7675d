"""Renyi-DP accounting for the Poisson-subsampled Gaussian mechanism.

Only integer orders are supported, which keeps the binomial expansion of the
subsampled Gaussian's moment exact.  Conversion to (epsilon, delta) uses the
classic ``rdp + log(1/delta) / (order - 1)`` bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import ParameterError

DEFAULT_ORDERS = tuple(range(2, 65)) + (80, 96, 128, 256, 512)


class InfeasibleBudget(ValueError):
    """The requested epsilon cannot be reached with the given parameters."""


class BudgetExhausted(RuntimeError):
    pass


def rdp_gaussian(sigma_ratio: float, order: float) -> float:
    if sigma_ratio <= 0:
        raise ParameterError(f"sigma_ratio must be > 0, got {sigma_ratio}")
    if order <= 1:
        raise ParameterError(f"order must be > 1, got {order}")
    return order / (2.0 * sigma_ratio**2)


def _log_binom(n: int, k: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def rdp_subsampled_gaussian(q: float, sigma_ratio: float, order: int) -> float:
    """RDP at integer ``order`` of one Poisson-subsampled Gaussian release."""
    if not 0.0 <= q <= 1.0:
        raise ParameterError(f"q must lie in [0, 1], got {q}")
    if sigma_ratio <= 0:
        raise ParameterError(f"sigma_ratio must be > 0, got {sigma_ratio}")
    if int(order) != order or order < 2:
        raise ParameterError(f"order must be an integer >= 2, got {order}")
    a = int(order)
    if q == 0.0:
        return 0.0
    if q == 1.0:
        return rdp_gaussian(sigma_ratio, a)
    logq, log1mq = math.log(q), math.log1p(-q)
    inv2s2 = 1.0 / (2.0 * sigma_ratio**2)
    terms = np.array(
        [
            _log_binom(a, j) + j * logq + (a - j) * log1mq + j * (j - 1) * inv2s2
            for j in range(a + 1)
        ]
    )
    m = terms.max()
    log_moment = m + math.log(math.fsum(np.exp(terms - m)))
    # log_moment >= 0 mathematically; clamp rounding below zero
    return max(log_moment, 0.0) / (a - 1)


def compose(per_step_rdp, steps: int) -> np.ndarray:
    if steps < 0:
        raise ParameterError(f"steps must be >= 0, got {steps}")
    return np.asarray(per_step_rdp, dtype=np.float64) * steps


@dataclass(frozen=True)
class PrivacySpending:
    epsilon: float
    delta: float
    optimal_order: int


@dataclass
class RdpLedger:
    """Per-order RDP of a run of identical subsampled-Gaussian steps."""

    q: float
    sigma_ratio: float
    orders: tuple = DEFAULT_ORDERS
    steps: int = 0
    per_step: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.orders:
            raise ParameterError("order grid is empty")
        self.orders = tuple(int(a) for a in self.orders)
        if list(self.orders) != sorted(set(self.orders)):
            raise ParameterError("orders must be strictly ascending")
        if self.sigma_ratio == math.inf or self.q == 0.0:
            self.per_step = np.zeros(len(self.orders))
        else:
            self.per_step = np.array(
                [rdp_subsampled_gaussian(self.q, self.sigma_ratio, a) for a in self.orders]
            )

    @property
    def rdp(self) -> np.ndarray:
        return compose(self.per_step, self.steps)

    def record_step(self, n: int = 1) -> None:
        self.steps += n

    def spending(self, delta: float) -> PrivacySpending:
        return rdp_to_eps(self, delta)


def rdp_to_eps(ledger, delta: float, orders=None) -> PrivacySpending:
    """Tightest classic conversion over the order grid.

    ``ledger`` is an :class:`RdpLedger` or a per-order rdp vector (then
    ``orders`` is required).
    """
    if not 0.0 < delta < 1.0:
        raise ParameterError(f"delta must lie in (0, 1), got {delta}")
    if isinstance(ledger, RdpLedger):
        rdp, orders = ledger.rdp, ledger.orders
    else:
        rdp = np.asarray(ledger, dtype=np.float64)
    if orders is None or len(orders) == 0:
        raise ParameterError("order grid is empty")
    orders_arr = np.asarray(orders, dtype=np.float64)
    eps = rdp + math.log(1.0 / delta) / (orders_arr - 1.0)
    i = int(np.argmin(eps))  # first minimum -> smallest order on ties
    return PrivacySpending(float(eps[i]), delta, int(orders_arr[i]))


def epsilon_for_training(q, sigma_ratio, steps, delta, orders=DEFAULT_ORDERS) -> PrivacySpending:
    ledger = RdpLedger(q, sigma_ratio, orders, steps=int(steps))
    return rdp_to_eps(ledger, delta)


def conversion_floor(delta, orders=DEFAULT_ORDERS) -> float:
    return rdp_to_eps(np.zeros(len(orders)), delta, orders).epsilon


# ---------------------------------------------------------------------------
# inversion


def _bisect(f, lo, hi, increasing, target, iters=100, integer=False):
    """Find x in [lo, hi] with f(x) closest to target from the safe side."""
    for _ in range(iters):
        if integer and hi - lo <= 1:
            break
        mid = (lo + hi) // 2 if integer else 0.5 * (lo + hi)
        v = f(mid)
        if (v > target) == increasing:
            hi = mid
        else:
            lo = mid
    return lo if integer else hi if not increasing else lo


def solve_noise_multiplier(q, steps, delta, target_eps, orders=DEFAULT_ORDERS,
                           lo=0.1, hi=100.0) -> float:
    """Smallest noise multiplier whose epsilon does not exceed ``target_eps``."""
    floor = conversion_floor(delta, orders)
    if target_eps <= floor:
        raise InfeasibleBudget(
            f"infeasible: target epsilon {target_eps} is at or below the conversion floor {floor:.5f}"
        )
    f = lambda s: epsilon_for_training(q, s, steps, delta, orders).epsilon  # noqa: E731
    while f(hi) > target_eps:
        hi *= 2
        if hi > 1e6:
            raise InfeasibleBudget("infeasible: no noise multiplier reaches the target epsilon")
    if f(lo) <= target_eps:
        return lo
    return _bisect(f, lo, hi, increasing=False, target=target_eps)


def solve_steps(q, sigma_ratio, delta, target_eps, orders=DEFAULT_ORDERS,
                max_steps=10**9) -> int:
    """Largest step count whose epsilon does not exceed ``target_eps``."""
    floor = conversion_floor(delta, orders)
    if target_eps <= floor:
        raise InfeasibleBudget(
            f"infeasible: target epsilon {target_eps} is at or below the conversion floor {floor:.5f}"
        )
    f = lambda n: epsilon_for_training(q, sigma_ratio, n, delta, orders).epsilon  # noqa: E731
    if f(1) > target_eps:
        raise InfeasibleBudget("infeasible: a single step already exceeds the target epsilon")
    hi = 2
    while f(hi) <= target_eps:
        hi *= 2
        if hi > max_steps:
            return max_steps
    return _bisect(f, 1, hi, increasing=True, target=target_eps, integer=True)


def solve_sampling_probability(sigma_ratio, steps, delta, target_eps,
                               orders=DEFAULT_ORDERS) -> float:
    """Largest q whose epsilon does not exceed ``target_eps``."""
    floor = conversion_floor(delta, orders)
    if target_eps <= floor:
        raise InfeasibleBudget(
            f"infeasible: target epsilon {target_eps} is at or below the conversion floor {floor:.5f}"
        )
    f = lambda q: epsilon_for_training(q, sigma_ratio, steps, delta, orders).epsilon  # noqa: E731
    if f(1.0) <= target_eps:
        return 1.0
    return _bisect(f, 0.0, 1.0, increasing=True, target=target_eps)
