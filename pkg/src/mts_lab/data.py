"""OHLCV ingestion, technical indicators and state assembly.

Every indicator value at bar ``i`` depends only on the bars
``i - warmup .. i``; nothing carries state from earlier bars. This keeps
outputs shift-equivariant (prepending history never changes later values)
at the cost of using finite-window variants of the exponential averages.
"""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, InsufficientHistory, MalformedData, NotFound

CSV_COLUMNS = ("date", "ticker", "open", "high", "low", "close", "adjclose", "volume")

FEATURE_FIELDS = ("W", "V", "BOLL", "CCI", "RSI", "TR", "DMI", "MACD", "MFI")
N_FEATURES = len(FEATURE_FIELDS)

# relative tolerance under which a rolling dispersion counts as zero
_FLAT_TOL = 1e-12
_PRICE_TOL = 1e-9


@dataclass(frozen=True)
class Bar:
    date: dt.date
    open: float
    high: float
    low: float
    close: float
    volume: float


@dataclass
class BarSeries:
    """Daily bars for one ticker, stored column-wise."""

    ticker: str
    dates: list[dt.date]
    open: np.ndarray
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    volume: np.ndarray

    def __post_init__(self):
        for name in ("open", "high", "low", "close", "volume"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n = len(self.dates)
        if any(len(getattr(self, k)) != n for k in ("open", "high", "low", "close", "volume")):
            raise DimensionError(f"{self.ticker}: column lengths differ")
        for a, b in zip(self.dates, self.dates[1:]):
            if b <= a:
                raise MalformedData(f"{self.ticker}: dates not strictly increasing at {b}")

    def __len__(self) -> int:
        return len(self.dates)

    def __iter__(self) -> Iterator[Bar]:
        for i, d in enumerate(self.dates):
            yield Bar(d, self.open[i], self.high[i], self.low[i], self.close[i], self.volume[i])

    @property
    def bars(self) -> list[Bar]:
        return list(self)

    def take(self, idx: Sequence[int] | np.ndarray) -> "BarSeries":
        idx = np.asarray(idx, dtype=int)
        return BarSeries(
            self.ticker,
            [self.dates[i] for i in idx],
            self.open[idx],
            self.high[idx],
            self.low[idx],
            self.close[idx],
            self.volume[idx],
        )


@dataclass(frozen=True)
class IndicatorParams:
    boll_window: int = 20
    boll_k: float = 2.0
    cci_window: int = 20
    rsi_window: int = 14
    dmi_window: int = 14
    macd_fast: int = 12
    macd_slow: int = 26
    macd_signal: int = 9
    mfi_window: int = 14

    def __post_init__(self):
        for name in ("boll_window", "cci_window", "rsi_window", "dmi_window",
                     "macd_fast", "macd_slow", "macd_signal", "mfi_window"):
            if int(getattr(self, name)) < 2:
                raise ValueError(f"{name} must be >= 2")
        if self.macd_fast >= self.macd_slow:
            raise ValueError("macd_fast must be < macd_slow")

    @property
    def warmup(self) -> int:
        """Number of leading bars without a full set of indicators.

        ADX averages ``dmi_window`` DX values, each built from
        ``dmi_window`` bar-to-bar moves, so it looks back ``2*dmi_window - 1``
        bars; that usually dominates.
        """
        return max(
            self.boll_window - 1,
            self.cci_window - 1,
            self.rsi_window,
            1,
            2 * self.dmi_window - 1,
            self.macd_slow - 1,
            self.mfi_window,
        )


def _parse_date(s: str) -> dt.date:
    try:
        return dt.date.fromisoformat(s.strip())
    except ValueError as exc:
        raise MalformedData(f"bad date {s!r}") from exc


def load_ohlcv(path: str | Path, tickers: Sequence[str],
               params: IndicatorParams | None = None) -> list[BarSeries]:
    """Read a long-format CSV and return one aligned BarSeries per ticker.

    The ``close`` column of the result is the adjusted close; open/high/low
    are rescaled by ``adjclose / close`` so each bar stays internally
    consistent. Series are restricted to the dates common to all tickers.
    """
    path = Path(path)
    if not path.is_file():
        raise NotFound(f"data file {path} does not exist")
    wanted = list(dict.fromkeys(tickers))
    rows: dict[str, list[tuple]] = {t: [] for t in wanted}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in CSV_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise MalformedData(f"{path}: missing columns {missing}")
        for line_no, rec in enumerate(reader, start=2):
            t = rec["ticker"].strip()
            if t not in rows:
                continue
            try:
                vals = tuple(float(rec[k]) for k in ("open", "high", "low", "close", "adjclose", "volume"))
            except (TypeError, ValueError) as exc:
                raise MalformedData(f"{path}:{line_no}: non-numeric field") from exc
            rows[t].append((_parse_date(rec["date"]), *vals))

    absent = [t for t in wanted if not rows[t]]
    if absent:
        raise NotFound(f"tickers not in {path}: {absent}")

    series = []
    for t in wanted:
        recs = rows[t]
        for a, b in zip(recs, recs[1:]):
            if b[0] <= a[0]:
                kind = "duplicate" if b[0] == a[0] else "non-monotone"
                raise MalformedData(f"{t}: {kind} date {b[0]}")
        arr = np.array([r[1:] for r in recs], dtype=np.float64)
        o, h, l, c, adj, vol = arr.T
        if np.any(c <= 0) or np.any(adj <= 0):
            raise MalformedData(f"{t}: non-positive close")
        if np.any(vol < 0):
            raise MalformedData(f"{t}: negative volume")
        scale = adj / c
        o, h, l = o * scale, h * scale, l * scale
        tol = _PRICE_TOL * np.maximum(np.abs(h), 1.0)
        if np.any(h + tol < np.maximum(o, adj)) or np.any(l - tol > np.minimum(o, adj)):
            raise MalformedData(f"{t}: high/low inconsistent with open/close")
        series.append(BarSeries(t, [r[0] for r in recs], o, h, l, adj, vol))

    common = set(series[0].dates)
    for s in series[1:]:
        common &= set(s.dates)
    aligned = []
    for s in series:
        idx = [i for i, d in enumerate(s.dates) if d in common]
        aligned.append(s.take(idx))

    need = (params or IndicatorParams()).warmup + 1
    if len(common) < need:
        raise InsufficientHistory(f"{len(common)} aligned rows, need at least {need}")
    return aligned


def write_ohlcv(path: str | Path, series: Sequence[BarSeries]) -> None:
    """Write series in the ingestion schema (close and adjclose identical)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for s in series:
            for b in s:
                w.writerow([b.date.isoformat(), s.ticker] +
                           [repr(float(x)) for x in (b.open, b.high, b.low, b.close, b.close, b.volume)])


# ---------------------------------------------------------------- indicators

def _windows(x: np.ndarray, n: int) -> np.ndarray:
    """Row ``j`` is ``x[j : j + n]``."""
    return sliding_window_view(x, n)


def _ema_last(windows: np.ndarray, span: int) -> np.ndarray:
    """EMA of each row, seeded with the row's first value, evaluated at its end."""
    a = 2.0 / (span + 1.0)
    out = windows[:, 0].copy()
    for j in range(1, windows.shape[1]):
        out = a * windows[:, j] + (1.0 - a) * out
    return out


def _ratio_index(pos: np.ndarray, neg: np.ndarray) -> np.ndarray:
    """100 - 100/(1 + pos/neg) with 100 when only gains and 50 when neither."""
    out = np.full(pos.shape, 50.0)
    has_neg = neg > 0
    out[has_neg] = 100.0 - 100.0 / (1.0 + pos[has_neg] / neg[has_neg])
    out[~has_neg & (pos > 0)] = 100.0
    return out


def compute_indicators(series: BarSeries, params: IndicatorParams | None = None) -> np.ndarray:
    """Feature rows ``[W, V, BOLL, CCI, RSI, TR, DMI, MACD, MFI]`` per bar after warmup.

    Returns an array of shape ``(len(series) - warmup, 9)``; row ``r``
    belongs to bar ``warmup + r``. ``W`` is left at 0.
    """
    p = params or IndicatorParams()
    w = p.warmup
    n = len(series)
    if n <= w:
        raise InsufficientHistory(f"{series.ticker}: {n} bars, need more than {w}")
    c, h, l, v = series.close, series.high, series.low, series.volume
    m = n - w  # number of output rows
    out = np.zeros((m, N_FEATURES))
    out[:, 1] = c[w:]

    # Bollinger %B over the last boll_window closes
    cw = _windows(c, p.boll_window)[-m:]
    mid = cw.mean(axis=1)
    sd = cw.std(axis=1)
    flat = sd <= _FLAT_TOL * np.abs(mid)
    width = 2.0 * p.boll_k * np.where(flat, 1.0, sd)
    lower = mid - p.boll_k * sd
    out[:, 2] = np.where(flat, 0.5, (c[w:] - lower) / width)

    # CCI on typical price
    tp = (h + l + c) / 3.0
    tw = _windows(tp, p.cci_window)[-m:]
    sma = tw.mean(axis=1)
    mad = np.abs(tw - sma[:, None]).mean(axis=1)
    flat = mad <= _FLAT_TOL * np.abs(sma)
    out[:, 3] = np.where(flat, 0.0, (tp[w:] - sma) / (0.015 * np.where(flat, 1.0, mad)))

    # RSI with simple averages of the last rsi_window moves
    d = np.diff(c)
    dw = _windows(d, p.rsi_window)[-m:]
    gain = np.maximum(dw, 0.0).mean(axis=1)
    loss = np.maximum(-dw, 0.0).mean(axis=1)
    out[:, 4] = _ratio_index(gain, loss)

    # true range of the bar itself
    prev_c = c[:-1]
    tr = np.maximum.reduce([h[1:] - l[1:], np.abs(h[1:] - prev_c), np.abs(l[1:] - prev_c)])
    out[:, 5] = tr[-m:]

    # ADX: mean of the last dmi_window DX values
    up = h[1:] - h[:-1]
    down = l[:-1] - l[1:]
    plus_dm = np.where((up > down) & (up > 0), up, 0.0)
    minus_dm = np.where((down > up) & (down > 0), down, 0.0)
    k = p.dmi_window
    s_plus = _windows(plus_dm, k).sum(axis=1)
    s_minus = _windows(minus_dm, k).sum(axis=1)
    s_tr = _windows(tr, k).sum(axis=1)
    safe_tr = np.where(s_tr > 0, s_tr, 1.0)
    di_plus = np.where(s_tr > 0, 100.0 * s_plus / safe_tr, 0.0)
    di_minus = np.where(s_tr > 0, 100.0 * s_minus / safe_tr, 0.0)
    di_sum = di_plus + di_minus
    dx = np.where(di_sum > 0, 100.0 * np.abs(di_plus - di_minus) / np.where(di_sum > 0, di_sum, 1.0), 0.0)
    out[:, 6] = _windows(dx, k).mean(axis=1)[-m:]

    # MACD line from EMAs run over the trailing macd_slow closes
    mw = _windows(c, p.macd_slow)[-m:]
    out[:, 7] = _ema_last(mw, p.macd_fast) - _ema_last(mw, p.macd_slow)

    # MFI over the last mfi_window typical-price moves
    flow = tp[1:] * v[1:]
    dtp = np.diff(tp)
    pos = _windows(np.where(dtp > 0, flow, 0.0), p.mfi_window)[-m:].sum(axis=1)
    neg = _windows(np.where(dtp < 0, flow, 0.0), p.mfi_window)[-m:].sum(axis=1)
    out[:, 8] = _ratio_index(pos, neg)
    return out


def build_state(cash: float, shares: Sequence[float] | np.ndarray, features: np.ndarray) -> np.ndarray:
    """Flatten ``[A_t, f_1, ..., f_n]`` with each stock's W slot set to its holdings."""
    shares = np.asarray(shares, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != N_FEATURES:
        raise DimensionError(f"features must be (n, {N_FEATURES}), got {features.shape}")
    if shares.shape != (features.shape[0],):
        raise DimensionError(f"{shares.shape[0] if shares.ndim else 0} share counts for {features.shape[0]} stocks")
    f = features.copy()
    f[:, 0] = shares
    state = np.empty(1 + f.size)
    state[0] = cash
    state[1:] = f.ravel()
    return state


def n_stocks_from_state(state: np.ndarray) -> int:
    size = np.shape(state)[-1]
    if (size - 1) % N_FEATURES:
        raise DimensionError(f"state length {size} is not 1 + {N_FEATURES}n")
    return (size - 1) // N_FEATURES


# ---------------------------------------------------------------- panels

@dataclass
class Panel:
    """Aligned multi-stock data starting at the first fully-featured day."""

    dates: list[dt.date]
    tickers: list[str]
    prices: np.ndarray      # (T, n) adjusted closes
    volumes: np.ndarray     # (T, n)
    features: np.ndarray    # (T, n, 9)
    index_prices: np.ndarray | None = None
    index_ticker: str | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.dates)

    @property
    def n_stocks(self) -> int:
        return len(self.tickers)

    def slice_dates(self, start: dt.date | None, end: dt.date | None) -> "Panel":
        idx = [i for i, d in enumerate(self.dates)
               if (start is None or d >= start) and (end is None or d <= end)]
        if not idx:
            from .errors import InsufficientData
            raise InsufficientData(f"no rows between {start} and {end}")
        sl = slice(idx[0], idx[-1] + 1)
        return Panel(
            self.dates[sl], list(self.tickers), self.prices[sl], self.volumes[sl], self.features[sl],
            None if self.index_prices is None else self.index_prices[sl], self.index_ticker, dict(self.meta),
        )


def build_panel(series: Sequence[BarSeries], params: IndicatorParams | None = None,
                index: BarSeries | None = None) -> Panel:
    """Compute indicators for aligned series and drop the warmup prefix."""
    p = params or IndicatorParams()
    if not series:
        raise DimensionError("no series")
    n = len(series[0])
    if any(len(s) != n or s.dates != series[0].dates for s in series):
        raise DimensionError("series are not aligned")
    if index is not None and index.dates != series[0].dates:
        raise DimensionError("index series not aligned with stocks")
    feats = np.stack([compute_indicators(s, p) for s in series], axis=1)
    w = p.warmup
    return Panel(
        dates=series[0].dates[w:],
        tickers=[s.ticker for s in series],
        prices=np.stack([s.close[w:] for s in series], axis=1),
        volumes=np.stack([s.volume[w:] for s in series], axis=1),
        features=feats,
        index_prices=None if index is None else index.close[w:].copy(),
        index_ticker=None if index is None else index.ticker,
        meta={"warmup": w},
    )
