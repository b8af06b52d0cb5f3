"""Renyi-DP accounting for the Poisson-subsampled Gaussian mechanism."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence
import warnings

import numpy as np
from scipy import special

from .numerics import ContractViolation

DEFAULT_ORDERS: tuple[int, ...] = tuple(range(2, 65)) + (128, 256)

SIGMA_MIN = 0.3
SIGMA_MAX = 1e4


class InfinitePrivacyLoss(ValueError):
    """Sampling with zero noise has unbounded privacy loss."""


class CalibrationInfeasible(ValueError):
    """No noise multiplier in the search bracket meets the target budget."""

    def __init__(self, epsilon_target: float, floor: float):
        super().__init__(
            f"target epsilon={epsilon_target:g} is infeasible; the smallest "
            f"achievable epsilon at sigma={SIGMA_MAX:g} is {floor:.6g}"
        )
        self.epsilon_target = epsilon_target
        self.floor = floor


@dataclass
class PrivacySpec:
    epsilon: float
    delta: float
    clip_norm: float
    sigma: float
    q: float
    steps: int
    orders: tuple[int, ...] = DEFAULT_ORDERS

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise ContractViolation("epsilon must be positive")
        if not 0 < self.delta < 1:
            raise ContractViolation("delta must lie in (0, 1)")
        if not self.clip_norm > 0:
            raise ContractViolation("clip_norm must be positive")
        if not self.sigma >= 0:
            raise ContractViolation("sigma must be non-negative")
        if not 0 <= self.q <= 1:
            raise ContractViolation("q must lie in [0, 1]")
        if self.steps < 1:
            raise ContractViolation("steps must be at least 1")

    def check_delta(self, n: int) -> None:
        if self.delta >= 1.0 / n:
            warnings.warn(
                f"delta={self.delta:g} is not below 1/n={1.0 / n:g}", stacklevel=2
            )

    @classmethod
    def calibrated(cls, epsilon, delta, clip_norm, q, steps, orders=DEFAULT_ORDERS):
        sigma = calibrate_sigma(epsilon, delta, q, steps, orders)
        return cls(epsilon, delta, clip_norm, sigma, q, steps, tuple(orders))


@dataclass
class RdpCurve:
    """Per-order RDP values of a (possibly composed) mechanism."""

    orders: tuple[int, ...]
    values: np.ndarray = field(repr=False)

    def compose(self, times: int) -> "RdpCurve":
        return RdpCurve(self.orders, self.values * times)


def _log_comb(n: int, k: np.ndarray) -> np.ndarray:
    return special.gammaln(n + 1) - special.gammaln(k + 1) - special.gammaln(n - k + 1)


def _log_expm1(x: np.ndarray) -> np.ndarray:
    small = x < 30
    out = np.empty_like(x)
    out[small] = np.log(np.expm1(x[small]))
    big = x[~small]
    out[~small] = big + np.log1p(-np.exp(-big))
    return out


def rdp_subsampled_gaussian(q: float, sigma: float, alpha: int) -> float:
    """RDP of order ``alpha`` for one step of the subsampled Gaussian mechanism.

    Evaluates (1/(α-1)) log Σ_j C(α,j) (1-q)^(α-j) q^j exp(j(j-1)/(2σ²)) in
    log space. Integer orders only.
    """
    if int(alpha) != alpha or alpha < 2:
        raise ContractViolation(f"alpha must be an integer >= 2, got {alpha}")
    if not 0 <= q <= 1:
        raise ContractViolation(f"q must lie in [0, 1], got {q}")
    if sigma < 0:
        raise ContractViolation("sigma must be non-negative")
    alpha = int(alpha)
    if q == 0:
        return 0.0
    if sigma == 0:
        raise InfinitePrivacyLoss("sigma=0 with q>0 has infinite privacy loss")
    if q == 1:
        return alpha / (2 * sigma**2)
    # A = 1 + Σ_{j>=2} pmf_j · expm1(j(j-1)/(2σ²)); summing the excess over 1
    # keeps full relative precision when the privacy loss is tiny.
    j = np.arange(2, alpha + 1, dtype=np.float64)
    log_pmf = _log_comb(alpha, j) + j * math.log(q) + (alpha - j) * math.log1p(-q)
    c = j * (j - 1) / (2 * sigma**2)
    log_excess = special.logsumexp(log_pmf + _log_expm1(c))
    log_a = np.logaddexp(0.0, log_excess)
    return max(float(log_a) / (alpha - 1), 0.0)


def rdp_curve(q: float, sigma: float, orders: Sequence[int] = DEFAULT_ORDERS) -> RdpCurve:
    orders = tuple(int(a) for a in orders)
    return RdpCurve(orders, np.array([rdp_subsampled_gaussian(q, sigma, a) for a in orders]))


def compose_and_convert_with_order(curve: RdpCurve, steps: int, delta: float) -> tuple[float, int]:
    if not curve.orders:
        raise ContractViolation("empty RDP order grid")
    if steps < 1:
        raise ContractViolation("steps must be at least 1")
    if not 0 < delta < 1:
        raise ContractViolation("delta must lie in (0, 1)")
    orders = np.asarray(curve.orders, dtype=np.float64)
    eps = steps * curve.values + math.log(1 / delta) / (orders - 1)
    i = int(np.argmin(eps))
    return float(eps[i]), int(curve.orders[i])


def compose_and_convert(curve: RdpCurve, steps: int, delta: float) -> float:
    """Epsilon after ``steps`` identical steps: min_α [T ε_α + ln(1/δ)/(α-1)]."""
    return compose_and_convert_with_order(curve, steps, delta)[0]


def epsilon_for(sigma: float, q: float, steps: int, delta: float,
                orders: Sequence[int] = DEFAULT_ORDERS) -> float:
    if steps == 0:
        return 0.0
    return compose_and_convert(rdp_curve(q, sigma, orders), steps, delta)


def calibrate_sigma(epsilon_target: float, delta: float, q: float, steps: int,
                    orders: Sequence[int] = DEFAULT_ORDERS) -> float:
    """Smallest noise multiplier in [0.3, 1e4] whose accounted epsilon meets the target.

    Bisection keeps ``hi`` feasible throughout, so the returned value always
    satisfies the budget; it stops once the accounted epsilon is within
    1e-4 relative of the target (or the bracket has collapsed).
    """
    if not epsilon_target > 0:
        raise ContractViolation("epsilon_target must be positive")

    def acc(s):
        return epsilon_for(s, q, steps, delta, orders)

    floor = acc(SIGMA_MAX)
    if floor > epsilon_target:
        raise CalibrationInfeasible(epsilon_target, floor)
    lo, hi = SIGMA_MIN, SIGMA_MAX
    if acc(lo) <= epsilon_target:
        return lo
    for _ in range(200):
        if epsilon_target - acc(hi) <= 1e-4 * epsilon_target:
            break
        mid = math.sqrt(lo * hi)
        if acc(mid) <= epsilon_target:
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1e-12 * hi:
            break
    return hi
