"""Empirical tail-risk measures over a growing return series.

VaR uses the empirical CDF ``F(x) = #{k <= t : X_k <= x} / t`` and picks the
smallest observed return whose CDF strictly exceeds ``alpha``. CVaR adds the
scaled sum of losses beyond the VaR that was in force at each earlier period
(the running VaR, not the current one). ICVaR is the period-over-period
change of CVaR, defined as 0 on the first period.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Sequence

from .errors import InsufficientData


@dataclass(frozen=True)
class RiskParams:
    alpha: float = 0.05
    lam: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")


def quantile_rank(alpha: float, t: int) -> int:
    """1-based rank ``m`` of the order statistic picked by the VaR rule.

    ``m`` is the smallest integer with ``m / t > alpha``, evaluated in the
    same floating-point arithmetic as the CDF comparison itself.
    """
    m = int(math.floor(alpha * t)) + 1
    while m > 1 and (m - 1) / t > alpha:
        m -= 1
    while m / t <= alpha:
        m += 1
    return m


def _check_prefix(X: Sequence[float], t: int | None) -> int:
    n = len(X)
    t = n if t is None else t
    if t < 1 or t > n:
        raise InsufficientData(f"need 1 <= t <= {n}, got t={t}")
    return t


def empirical_var(X: Sequence[float], alpha: float, t: int | None = None) -> float:
    """VaR of the first ``t`` returns (defaults to all of them)."""
    t = _check_prefix(X, t)
    prefix = sorted(X[:t])
    return -prefix[quantile_rank(alpha, t) - 1]


def cvar(X: Sequence[float], alpha: float, t: int | None = None) -> float:
    t = _check_prefix(X, t)
    series = RiskSeries(alpha)
    for x in X[:t]:
        series.append(x)
    return series.running_cvar[-1]


def icvar(X: Sequence[float], alpha: float, t: int | None = None) -> float:
    t = _check_prefix(X, t)
    if t == 1:
        return 0.0
    return cvar(X, alpha, t) - cvar(X, alpha, t - 1)


def risk_adjusted_reward(delta_p: float, icvar_value: float, lam: float, scaling: float = 1.0) -> float:
    return scaling * (delta_p - lam * icvar_value)


@dataclass
class RiskSeries:
    """Return series with cached running VaR/CVaR, updated one period at a time."""

    alpha: float
    returns: list[float] = field(default_factory=list)
    running_var: list[float] = field(default_factory=list)
    running_cvar: list[float] = field(default_factory=list)
    _sorted: list[float] = field(default_factory=list, repr=False)
    _excess: float = field(default=0.0, repr=False)

    def __len__(self) -> int:
        return len(self.returns)

    def clear(self) -> None:
        self.returns.clear()
        self.running_var.clear()
        self.running_cvar.clear()
        self._sorted.clear()
        self._excess = 0.0

    def append(self, x: float) -> float:
        """Add ``X_t`` and return ``ICVaR_t``."""
        x = float(x)
        if not math.isfinite(x):
            from .errors import NumericError
            raise NumericError(f"non-finite return {x}")
        self.returns.append(x)
        bisect.insort(self._sorted, x)
        t = len(self.returns)
        var_t = -self._sorted[quantile_rank(self.alpha, t) - 1]
        self._excess += max(-x - var_t, 0.0)
        cvar_t = var_t + self._excess / (self.alpha * t)
        self.running_var.append(var_t)
        self.running_cvar.append(cvar_t)
        return self.icvar(t)

    def icvar(self, t: int | None = None) -> float:
        t = len(self.returns) if t is None else t
        if t < 1 or t > len(self.returns):
            raise InsufficientData(f"no ICVaR at t={t}")
        if t == 1:
            return 0.0
        return self.running_cvar[t - 1] - self.running_cvar[t - 2]
