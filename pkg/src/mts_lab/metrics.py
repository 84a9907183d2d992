"""Performance metrics of a daily equity curve and comparison reports.

Annual risk-free rate / minimum acceptable return are converted to a daily
rate as ``(1 + annual) ** (1 / 252) - 1``; Sharpe and Sortino are annualised
by ``sqrt(252)``. Standard deviations are population (``ddof=0``).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateMetric, DimensionError

TRADING_DAYS = 252
DEFAULT_ANNUAL_RATE = 0.03
METRIC_NAMES = ("cumulative_return", "sharpe", "omega", "sortino")
_ZERO_TOL = 1e-14


def daily_rate(annual: float) -> float:
    return (1.0 + annual) ** (1.0 / TRADING_DAYS) - 1.0


def _curve(values: Sequence[float]) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or len(v) < 2:
        raise DimensionError("equity curve needs at least two values")
    if not np.all(np.isfinite(v)) or np.any(v <= 0):
        raise DimensionError("equity curve values must be finite and positive")
    return v


def period_returns(values: Sequence[float]) -> np.ndarray:
    v = _curve(values)
    return v[1:] / v[:-1] - 1.0


def cumulative_return(values: Sequence[float]) -> float:
    v = _curve(values)
    return float((v[-1] - v[0]) / v[0])


def sharpe(values: Sequence[float], rf_annual: float = DEFAULT_ANNUAL_RATE) -> float:
    r = period_returns(values)
    excess = r.mean() - daily_rate(rf_annual)
    sd = r.std()
    if sd <= _ZERO_TOL * max(1.0, abs(r.mean())):
        if abs(excess) < _ZERO_TOL:
            return 0.0
        raise DegenerateMetric("zero return variance")
    return float(excess / sd * math.sqrt(TRADING_DAYS))


def sortino(values: Sequence[float], mar_annual: float = DEFAULT_ANNUAL_RATE) -> float:
    r = period_returns(values)
    mar = daily_rate(mar_annual)
    below = r[r < mar]
    if len(below) == 0:
        raise DegenerateMetric("no returns below the minimum acceptable return")
    downside = math.sqrt(float(np.sum((below - mar) ** 2)) / len(r))
    if downside == 0.0:
        raise DegenerateMetric("zero downside deviation")
    return float((r.mean() - mar) / downside * math.sqrt(TRADING_DAYS))


def omega(values: Sequence[float], threshold_annual: float = DEFAULT_ANNUAL_RATE) -> float:
    r = period_returns(values)
    thr = daily_rate(threshold_annual)
    losses = float(np.sum(np.maximum(thr - r, 0.0)))
    if losses == 0.0:
        raise DegenerateMetric("no returns below the threshold")
    return float(np.sum(np.maximum(r - thr, 0.0)) / losses)


@dataclass
class MetricsReport:
    cumulative_return: float | None
    sharpe: float | None
    omega: float | None
    sortino: float | None
    risk_free_annual: float = DEFAULT_ANNUAL_RATE
    mar_annual: float = DEFAULT_ANNUAL_RATE
    degenerate: list[str] = field(default_factory=list)
    periods: int = 0

    @classmethod
    def from_curve(cls, values: Sequence[float], rf_annual: float = DEFAULT_ANNUAL_RATE,
                   mar_annual: float = DEFAULT_ANNUAL_RATE) -> "MetricsReport":
        out, degenerate = {}, []
        fns = {
            "cumulative_return": lambda: cumulative_return(values),
            "sharpe": lambda: sharpe(values, rf_annual),
            "omega": lambda: omega(values, mar_annual),
            "sortino": lambda: sortino(values, mar_annual),
        }
        for name, fn in fns.items():
            try:
                out[name] = fn()
            except DegenerateMetric:
                out[name] = None
                degenerate.append(name)
        return cls(**out, risk_free_annual=rf_annual, mar_annual=mar_annual,
                   degenerate=degenerate, periods=len(values) - 1)

    def values(self) -> dict[str, float | None]:
        return {k: getattr(self, k) for k in METRIC_NAMES}

    def to_dict(self) -> dict:
        return {**self.values(), "risk_free_annual": self.risk_free_annual, "mar_annual": self.mar_annual,
                "degenerate": list(self.degenerate), "periods": self.periods}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**{k: d.get(k) for k in METRIC_NAMES},
                   risk_free_annual=d.get("risk_free_annual", DEFAULT_ANNUAL_RATE),
                   mar_annual=d.get("mar_annual", DEFAULT_ANNUAL_RATE),
                   degenerate=list(d.get("degenerate", [])), periods=int(d.get("periods", 0)))


# Published results of the full model and its ablations, kept for side-by-side reports.
REFERENCE_RESULTS: dict[str, dict[str, float]] = {
    "Dataset 1 (2019)": {"cumulative_return": 0.5203, "sharpe": 2.6872, "omega": 1.5941, "sortino": 4.0677},
    "Dataset 2 (2020)": {"cumulative_return": 0.2793, "sharpe": 0.7920, "omega": 1.1561, "sortino": 1.2282},
    "Dataset 3 (2021)": {"cumulative_return": 0.2964, "sharpe": 1.4722, "omega": 1.2729, "sortino": 2.2665},
    "Dataset 4 (2022)": {"cumulative_return": 0.2642, "sharpe": 0.7117, "omega": 1.1480, "sortino": 1.2091},
    "Dataset 5 (2023)": {"cumulative_return": 0.2671, "sharpe": 0.9517, "omega": 1.1837, "sortino": 1.4831},
    "2019-2023": {"cumulative_return": 2.2739, "sharpe": 0.9149, "omega": 1.1875, "sortino": 1.3319},
    "Dataset 1 no_icvar": {"cumulative_return": 0.4697, "sharpe": 2.4197, "omega": 1.5146, "sortino": 3.6508},
    "Dataset 1 no_timeaware": {"cumulative_return": 0.2763, "sharpe": 1.4617, "omega": 1.2767, "sortino": 2.0362},
    "Dataset 1 no_short": {"cumulative_return": 0.4280, "sharpe": 2.2459, "omega": 1.4772, "sortino": 3.3669},
}


def _fmt(x: float | None) -> str:
    return "n/a" if x is None else f"{x:.4f}"


def format_table(rows: dict[str, dict[str, float | None]]) -> str:
    """Aligned-column text table, one row per label."""
    labels = list(rows)
    width = max([len("label")] + [len(s) for s in labels])
    head = f"{'label':<{width}}  " + "  ".join(f"{m:>17}" for m in METRIC_NAMES)
    lines = [head, "-" * len(head)]
    for label in labels:
        lines.append(f"{label:<{width}}  " + "  ".join(f"{_fmt(rows[label].get(m)):>17}" for m in METRIC_NAMES))
    return "\n".join(lines)


def report_json(rows: dict[str, MetricsReport], include_reference: bool = False,
                extra: dict | None = None) -> str:
    """Deterministic JSON document: sorted keys, no timestamps."""
    doc: dict = {"runs": {k: v.to_dict() for k, v in rows.items()}, **(extra or {})}
    if include_reference:
        doc["reference"] = REFERENCE_RESULTS
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def parse_report(text: str) -> dict:
    doc = json.loads(text)
    doc["runs"] = {k: MetricsReport.from_dict(v) for k, v in doc.get("runs", {}).items()}
    return doc
