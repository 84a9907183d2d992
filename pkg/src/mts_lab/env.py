"""Portfolio trading environment with fee accounting and trend-gated shorting.

Each ``step`` runs one trend sub-step, then all sell legs (ascending stock
index) followed by all buy legs, every trade executing at the period's
adjusted close. Shorts open only through the sell leg and are capped at
``u (1 - TR_t) / V`` shares per transaction; buys in one step share a
fee-inclusive budget of ``v A_t TR_t`` where ``A_t`` is the cash after sells.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .data import Panel, build_state
from .errors import DimensionError, InsufficientData, NumericError, StepAfterDone
from .risk import RiskParams, RiskSeries, risk_adjusted_reward
from .trend import FixedTrend, ParallelTrend, TrendSignal, TrendSource


@dataclass(frozen=True)
class EnvConfig:
    fee_rate: float = 0.001
    initial_cash: float = 1e6
    hmax: float = 100.0
    reward_scaling: float = 1e-4
    risk: RiskParams = field(default_factory=RiskParams)
    short_cap_u: float = 1e4
    buy_limit_v: float = 1.0
    short_mode: str = "enabled"
    adaptive_limits: bool = True
    random_init: bool = False

    def __post_init__(self):
        if not 0.0 <= self.fee_rate < 1.0:
            raise ValueError("fee_rate must lie in [0, 1)")
        if self.initial_cash <= 0:
            raise ValueError("initial_cash must be positive")
        if not 0.0 <= self.buy_limit_v <= 1.0:
            raise ValueError("buy_limit_v must lie in [0, 1]")
        if self.short_cap_u < 0:
            raise ValueError("short_cap_u must be non-negative")
        if self.short_mode not in ("enabled", "disabled"):
            raise ValueError("short_mode must be 'enabled' or 'disabled'")
        if self.hmax <= 0:
            raise ValueError("hmax must be positive")

    @property
    def short_enabled(self) -> bool:
        return self.short_mode == "enabled"


@dataclass
class PortfolioState:
    cash: float
    shares: np.ndarray
    prices: np.ndarray
    t: int = 0

    def copy(self) -> "PortfolioState":
        return PortfolioState(self.cash, self.shares.copy(), self.prices.copy(), self.t)


@dataclass
class StepResult:
    state: np.ndarray
    reward: float
    done: bool
    info: dict

    def __iter__(self) -> Iterator:
        return iter((self.state, self.reward, self.done, self.info))


def portfolio_value(state: PortfolioState) -> float:
    return float(state.cash + np.dot(state.shares, state.prices))


def delta_p(prev: PortfolioState, curr: PortfolioState, sold: np.ndarray, bought: np.ndarray,
            fee_rate: float) -> float:
    """Change in value from holding ``W_{t-1}`` across the price move, less fees."""
    sold, bought = np.asarray(sold, float), np.asarray(bought, float)
    n = len(prev.shares)
    if not (len(curr.prices) == len(prev.prices) == len(sold) == len(bought) == n):
        raise DimensionError("misaligned vectors in delta_p")
    return float(np.dot(prev.shares, curr.prices - prev.prices)
                 - fee_rate * np.dot(bought + sold, curr.prices))


def sell_leg(holding: float, c_k: float, price: float, tr: float, u: float,
             short_enabled: bool = True) -> tuple[float, float]:
    """Shares sold for a negative trade ``c_k`` and the part of it that is short.

    Returns ``(shares_sold, shorted)``.
    """
    long_part = max(holding, 0.0)
    allowance = u * (1.0 - tr) / price if short_enabled else 0.0
    sold = min(long_part + allowance, -c_k)
    sold = max(sold, 0.0)
    return sold, max(0.0, sold - long_part)


def buy_cap(cash: float, tr: float, v: float) -> float:
    """Cash that the buy legs of one step may spend, fees included."""
    return max(v * cash * tr, 0.0)


def buy_leg(c_k: float, price: float, fee_rate: float, budget: float) -> float:
    """Shares bought for a positive trade ``c_k`` within a fee-inclusive budget."""
    return max(min(budget / (price * (1.0 + fee_rate)), c_k), 0.0)


class TradingEnv:
    """Gym-style environment over a :class:`~mts_lab.data.Panel`.

    ``reset(seed)`` returns the initial state vector; ``step(action)`` takes
    share volumes (positive buy, negative sell, clipped to ``±hmax``) and
    returns a :class:`StepResult` that also unpacks as
    ``(state, reward, done, info)``.
    """

    def __init__(self, panel: Panel, config: EnvConfig | None = None, trend: TrendSource | None = None):
        if len(panel) == 0:
            raise InsufficientData("empty feature panel")
        self.panel = panel
        self.config = config or EnvConfig()
        if trend is None:
            cfg = self.config
            if panel.index_prices is not None:
                trend = ParallelTrend(panel.index_prices, initial_cash=cfg.initial_cash,
                                      reward_scaling=cfg.reward_scaling, adaptive=cfg.adaptive_limits,
                                      u=cfg.short_cap_u, v=cfg.buy_limit_v)
            else:
                trend = FixedTrend(1.0, cfg.short_cap_u, cfg.buy_limit_v)
        self.trend = trend
        self.n = panel.n_stocks
        self.risk = RiskSeries(self.config.risk.alpha)
        self.state: PortfolioState | None = None
        self.done = True

    @property
    def last_t(self) -> int:
        return len(self.panel) - 1

    def observation(self) -> np.ndarray:
        s = self.state
        return build_state(s.cash, s.shares, self.panel.features[s.t])

    def reset(self, seed: int | None = None) -> np.ndarray:
        cfg = self.config
        if cfg.random_init:
            rng = np.random.default_rng(seed)
            shares = rng.integers(0, int(cfg.hmax) + 1, self.n).astype(np.float64)
        else:
            shares = np.zeros(self.n)
        self.state = PortfolioState(float(cfg.initial_cash), shares, self.panel.prices[0].astype(np.float64), 0)
        self.risk.clear()
        self.signal: TrendSignal = self.trend.reset()
        self.done = len(self.panel) < 2
        self.equity = [portfolio_value(self.state)]
        self.rewards: list[float] = []
        self.trace: list[dict] = [self._trace_row(0.0, 0.0)]
        return self.observation()

    def _trace_row(self, reward: float, icvar: float) -> dict:
        s = self.state
        sig = self.signal
        return {
            "t": s.t, "date": self.panel.dates[s.t].isoformat(), "cash": s.cash,
            "total_asset": portfolio_value(s), "reward": reward, "icvar": icvar,
            "tr": sig.tr, "u": sig.u, "v": sig.v, "shares": s.shares.copy(),
        }

    def limits(self, signal: TrendSignal) -> tuple[float, float]:
        cfg = self.config
        if cfg.adaptive_limits:
            u, v = signal.u, signal.v
        else:
            u, v = cfg.short_cap_u, cfg.buy_limit_v
        return (u if cfg.short_enabled else 0.0), v

    def step(self, action) -> StepResult:
        if self.state is None or self.done:
            raise StepAfterDone("episode finished; call reset()")
        cfg = self.config
        trade = np.asarray(action, dtype=np.float64).reshape(-1)
        if trade.shape != (self.n,):
            raise DimensionError(f"action has {trade.size} entries for {self.n} stocks")
        if not np.all(np.isfinite(trade)):
            raise NumericError("non-finite action")
        trade = np.clip(trade, -cfg.hmax, cfg.hmax)

        prev = self.state
        t = prev.t + 1
        self.signal = sig = self.trend.step(t)
        u, v = self.limits(sig)
        tr = sig.tr
        prices = self.panel.prices[t].astype(np.float64)
        vol = self.panel.volumes[t]
        tradable = (vol > 0) & np.isfinite(vol)

        cash = prev.cash
        shares = prev.shares.copy()
        sold = np.zeros(self.n)
        bought = np.zeros(self.n)
        shorted = np.zeros(self.n)
        for k in np.flatnonzero((trade < 0) & tradable):
            s, sh = sell_leg(shares[k], trade[k], prices[k], tr, u, cfg.short_enabled)
            shares[k] -= s
            cash += prices[k] * s * (1.0 - cfg.fee_rate)
            sold[k], shorted[k] = s, sh

        cash_after_sells = cash
        budget = budget0 = buy_cap(cash, tr, v)
        for k in np.flatnonzero((trade > 0) & tradable):
            b = buy_leg(trade[k], prices[k], cfg.fee_rate, budget)
            cost = prices[k] * b * (1.0 + cfg.fee_rate)
            budget = max(budget - cost, 0.0)
            shares[k] += b
            cash -= cost
            bought[k] = b
        if cash < 0.0:
            # only reachable through rounding of an exhausted budget
            cash = 0.0

        curr = PortfolioState(cash, shares, prices, t)
        dp = delta_p(prev, curr, sold, bought, cfg.fee_rate)
        prev_total = portfolio_value(prev)
        total = portfolio_value(curr)
        if prev_total <= 0 or not np.isfinite(total):
            raise NumericError(f"portfolio value {prev_total} -> {total} at t={t}")
        period_return = total / prev_total - 1.0
        icv = self.risk.append(period_return)
        reward = risk_adjusted_reward(dp, icv, cfg.risk.lam, cfg.reward_scaling)

        self.state = curr
        self.done = t >= self.last_t
        self.equity.append(total)
        self.rewards.append(reward)
        self.trace.append(self._trace_row(reward, icv))
        info = {
            "t": t, "total_asset": total, "period_return": period_return, "delta_p": dp,
            "shares_sold": sold, "shares_bought": bought, "shorted": shorted, "icvar": icv,
            "tr": tr, "u": u, "v": v, "cash_after_sells": cash_after_sells, "buy_budget": budget0,
        }
        return StepResult(self.observation(), reward, self.done, info)

    def write_trace(self, path: str | Path) -> None:
        """Episode trace CSV: t, date, cash, total_asset, reward, icvar, tr, u, v, shares per stock."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "date", "cash", "total_asset", "reward", "icvar", "tr", "u", "v"]
                       + [f"shares_{tk}" for tk in self.panel.tickers])
            for r in self.trace:
                w.writerow([r["t"], r["date"], repr(float(r["cash"])), repr(float(r["total_asset"])),
                            repr(float(r["reward"])), repr(float(r["icvar"])), repr(float(r["tr"])),
                            repr(float(r["u"])), repr(float(r["v"]))]
                           + [repr(float(x)) for x in r["shares"]])
