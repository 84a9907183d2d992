"""Synthetic markets in the ingestion schema.

Every generator returns ``days + 1`` bars: a base day at position 0 followed
by ``days`` daily moves, so ``decline5`` over 100 days ends at
``p0 * 0.95**100``. The last series is the market index.
"""

from __future__ import annotations

import datetime as dt

import numpy as np

from .data import BarSeries

KINDS = ("decline5", "rise5", "weekend_effect", "flat", "trending")
DEFAULT_START = dt.date(2019, 1, 7)  # a Monday, so position % 5 == 0 falls on Mondays


def business_days(start: dt.date, count: int) -> list[dt.date]:
    out = []
    d = start
    while len(out) < count:
        if d.weekday() < 5:
            out.append(d)
        d += dt.timedelta(days=1)
    return out


def month_starts(dates: list[dt.date]) -> np.ndarray:
    """Boolean mask of the first trading day of each month (position 0 excluded)."""
    mask = np.zeros(len(dates), dtype=bool)
    for p in range(1, len(dates)):
        mask[p] = dates[p].month != dates[p - 1].month
    return mask


def shock_positions(dates: list[dt.date]) -> np.ndarray:
    p = np.arange(len(dates))
    return (p % 5 == 0) | month_starts(dates)


def series_from_closes(ticker: str, dates: list[dt.date], closes: np.ndarray,
                       volume: float = 1e6) -> BarSeries:
    closes = np.asarray(closes, dtype=np.float64)
    opens = np.concatenate([closes[:1], closes[:-1]])
    return BarSeries(ticker, list(dates), opens, np.maximum(opens, closes), np.minimum(opens, closes),
                     closes, np.full(len(closes), float(volume)))


def generate(kind: str, days: int, seed: int = 0, n_stocks: int = 5, p0: float = 100.0,
             start: dt.date = DEFAULT_START, index_ticker: str = "DJI",
             shock_scale: float = 0.02, drift: float = 0.004, noise: float = 0.003) -> list[BarSeries]:
    if kind not in KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}; choose from {KINDS}")
    if days < 2:
        raise ValueError("days must be >= 2")
    dates = business_days(start, days + 1)
    p = np.arange(days + 1)
    rng = np.random.default_rng(seed)
    if kind in ("decline5", "rise5", "flat"):
        factor = {"decline5": 0.95, "rise5": 1.05, "flat": 1.0}[kind]
        path = p0 * factor ** p.astype(np.float64)
        stocks = [path.copy() for _ in range(n_stocks)]
        index = path.copy()
    elif kind == "weekend_effect":
        hit = shock_positions(dates)
        stocks = []
        for _ in range(n_stocks):
            eps = rng.normal(0.0, shock_scale, days + 1)
            stocks.append(np.where(hit, p0 * (1.0 + eps), p0))
        index = np.mean(stocks, axis=0)
    else:  # trending: alternating up/down drifts with small noise
        stocks = []
        for k in range(n_stocks):
            mu = drift if k % 2 == 0 else -drift
            steps = mu + noise * rng.standard_normal(days)
            stocks.append(p0 * np.exp(np.concatenate([[0.0], np.cumsum(steps)])))
        index = np.mean(stocks, axis=0)
    out = [series_from_closes(f"SYN{k}", dates, c) for k, c in enumerate(stocks)]
    out.append(series_from_closes(index_ticker, dates, index))
    return out
