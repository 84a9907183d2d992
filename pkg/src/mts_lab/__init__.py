"""Portfolio management lab: trading environment with trend-gated short selling,
incremental CVaR risk penalty, time-aware attention policy and PPO trainer."""

from .data import IndicatorParams, Panel, build_panel, build_state, compute_indicators, load_ohlcv
from .env import EnvConfig, TradingEnv
from .errors import (ConfigError, DataError, DegenerateMetric, DimensionError, MTSError, NumericError,
                     StepAfterDone)
from .metrics import MetricsReport, cumulative_return, omega, sharpe, sortino
from .risk import RiskParams, RiskSeries, cvar, empirical_var, icvar
from .timenet import AttentionConfig, TimeAwareAttention, attention_backward, attention_forward
from .trend import FixedTrend, MomentumTrendAgent, ParallelTrend

__version__ = "0.1.0"
