"""Parallel index sub-strategy producing the trend index and trading limits.

The sub-strategy trades only a market index against cash, pays no fees and
is long-only. Its position ratio ``TR_t = W_t V_t / T_t`` gauges the market
trend; its virtual performance sets the short cap ``u`` and buy limit ``v``
used by the main environment.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Protocol, Sequence

import numpy as np

U_SUSPENDED = 0.0
U_DEFAULT = 1e4
U_BEAR = 1e5
V_DEFAULT = 1.0
V_RESTRICTED = 0.2
GAIN_TRIGGER = 0.05
LOSS_TRIGGER = -0.05


@dataclass(frozen=True)
class TrendSignal:
    tr: float
    u: float = U_DEFAULT
    v: float = V_DEFAULT
    sub_cum_return: float = 0.0
    sub_avg_return: float = 0.0
    sub_total_asset: float = float("nan")


@dataclass(frozen=True)
class TrendEnvState:
    cash: float
    index_shares: float
    index_price: float
    t: int = 0

    @property
    def total(self) -> float:
        return self.cash + self.index_shares * self.index_price


def update_short_cap(signal: TrendSignal) -> float:
    if signal.sub_cum_return >= GAIN_TRIGGER:
        return U_SUSPENDED
    if signal.sub_avg_return <= LOSS_TRIGGER:
        return U_BEAR
    return U_DEFAULT


def update_buy_limit(signal: TrendSignal) -> float:
    return V_RESTRICTED if signal.sub_cum_return <= LOSS_TRIGGER else V_DEFAULT


def trend_step(action: float, state: TrendEnvState, price: float,
               reward_scaling: float = 1.0) -> tuple[float, float, TrendEnvState]:
    """One fee-free index trade at ``price``; returns ``(tr, reward, new_state)``.

    ``action`` is a share volume: negative sells (up to the holding), positive
    buys (up to what cash affords).
    """
    if price <= 0:
        raise ValueError("index price must be positive")
    prev_total = state.total
    cash, shares = state.cash, state.index_shares
    if action < 0:
        sold = min(shares, -action)
        shares -= sold
        cash += price * sold
    elif action > 0:
        bought = min(cash / price, action)
        shares += bought
        cash -= price * bought
        if cash < 0:  # rounding residue of an all-in buy
            cash = 0.0
    new = TrendEnvState(cash, shares, price, state.t + 1)
    total = new.total
    reward = (total - prev_total) * reward_scaling
    tr = shares * price / total if total > 0 else 0.0
    return min(max(tr, 0.0), 1.0), reward, new


class TrendPolicy(Protocol):
    def __call__(self, history: np.ndarray) -> float: ...


@dataclass
class MomentumTrendAgent:
    """All-in when the index rose over the last ``lookback`` periods, else all-out.

    Until ``lookback`` moves are observed the agent assumes an uptrend.
    """

    lookback: int = 5

    def __call__(self, history: np.ndarray) -> float:
        if len(history) <= self.lookback:
            return np.inf
        return np.inf if history[-1] > history[-1 - self.lookback] else -np.inf


class TrendSource(Protocol):
    def reset(self) -> TrendSignal: ...
    def step(self, t: int) -> TrendSignal: ...


class ParallelTrend:
    """Runs the sub-strategy in lock-step with the main environment.

    ``step(t)`` lets the policy act on index closes up to ``t - 1`` and
    executes at the period-``t`` close, so the trend signal used for trading
    at ``t`` carries no look-ahead.
    """

    def __init__(self, index_prices: Sequence[float], policy: TrendPolicy | None = None,
                 initial_cash: float = 1e6, reward_scaling: float = 1e-4,
                 adaptive: bool = True, u: float = U_DEFAULT, v: float = V_DEFAULT):
        self.prices = np.asarray(index_prices, dtype=np.float64)
        if self.prices.ndim != 1 or len(self.prices) == 0 or np.any(self.prices <= 0):
            raise ValueError("index prices must be a non-empty positive vector")
        self.policy = policy or MomentumTrendAgent()
        self.initial_cash = float(initial_cash)
        self.reward_scaling = reward_scaling
        self.adaptive = adaptive
        self.u0, self.v0 = float(u), float(v)
        self.reset()

    def reset(self) -> TrendSignal:
        self.state = TrendEnvState(self.initial_cash, 0.0, float(self.prices[0]), 0)
        self.returns: list[float] = []
        self.rewards: list[float] = []
        self.signal = TrendSignal(0.0, self.u0, self.v0, 0.0, 0.0, self.initial_cash)
        self.trace = [self.signal]
        return self.signal

    def step(self, t: int) -> TrendSignal:
        if t != self.state.t + 1:
            raise ValueError(f"trend source at t={self.state.t} asked for t={t}")
        action = float(self.policy(self.prices[:t]))
        prev_total = self.state.total
        tr, reward, self.state = trend_step(action, self.state, float(self.prices[t]), self.reward_scaling)
        total = self.state.total
        self.returns.append(total / prev_total - 1.0)
        self.rewards.append(reward)
        sig = TrendSignal(tr, self.u0, self.v0,
                          total / self.initial_cash - 1.0,
                          float(np.mean(self.returns)), total)
        if self.adaptive:
            sig = replace(sig, u=update_short_cap(sig), v=update_buy_limit(sig))
        self.signal = sig
        self.trace.append(sig)
        return sig


class FixedTrend:
    """Trend source with a preset TR (scalar or per-period sequence) and fixed limits."""

    def __init__(self, tr: float | Sequence[float] = 1.0, u: float = U_DEFAULT, v: float = V_DEFAULT):
        self.tr = tr
        self.u, self.v = float(u), float(v)
        self.reset()

    def _tr_at(self, t: int) -> float:
        if np.ndim(self.tr) == 0:
            return float(self.tr)
        return float(self.tr[t])

    def reset(self) -> TrendSignal:
        self.signal = TrendSignal(self._tr_at(0), self.u, self.v)
        self.trace = [self.signal]
        return self.signal

    def step(self, t: int) -> TrendSignal:
        tr = self._tr_at(t)
        if not 0.0 <= tr <= 1.0:
            raise ValueError(f"trend index {tr} outside [0, 1]")
        self.signal = TrendSignal(tr, self.u, self.v)
        self.trace.append(self.signal)
        return self.signal

