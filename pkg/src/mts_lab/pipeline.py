"""Experiment plumbing shared by the command-line front end.

Builds panels, environments and agents from a :class:`RunConfig`, runs
backtests / training / ablations, and writes all artefacts under the
configured output directory.
"""

from __future__ import annotations

import csv
import datetime as dt
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import plotting
from .agent import (Agent, Policy, PolicyConfig, PPOAgent, TrainConfig, Trainer, evaluate,
                    make_heuristic)
from .checkpoint import atomic_write_text, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import BarSeries, Panel, build_panel, load_ohlcv
from .env import EnvConfig, TradingEnv
from .errors import ConfigError
from .metrics import METRIC_NAMES, MetricsReport, format_table, report_json
from .risk import RiskParams
from .synthetic import generate
from .trend import FixedTrend, ParallelTrend

log = logging.getLogger(__name__)

VARIANTS = ("full", "no_icvar", "no_timeaware", "no_short")


# ---------------------------------------------------------------- building blocks

def load_market(cfg: RunConfig) -> tuple[list[BarSeries], BarSeries | None]:
    kind = cfg["data.synthetic"]
    if kind:
        try:
            series = generate(kind, cfg["data.synthetic_days"], seed=cfg.seed,
                              n_stocks=cfg["data.synthetic_stocks"],
                              start=dt.date.fromisoformat(cfg["data.synthetic_start"]),
                              index_ticker=cfg["data.index"] or "DJI")
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return series[:-1], series[-1]
    tickers = cfg["data.tickers"]
    if not tickers:
        raise ConfigError("data.tickers must list at least one ticker")
    index = cfg["data.index"]
    loaded = load_ohlcv(cfg["data.path"], list(tickers) + ([index] if index else []))
    return (loaded[:-1], loaded[-1]) if index else (loaded, None)


def market_panel(cfg: RunConfig) -> Panel:
    stocks, index = load_market(cfg)
    return build_panel(stocks, index=index)


def split_panel(cfg: RunConfig, panel: Panel) -> tuple[Panel, Panel]:
    d = cfg.dates()
    train = panel.slice_dates(d["train_start"], d["train_end"]) if (d["train_start"] or d["train_end"]) else panel
    test = panel.slice_dates(d["test_start"], d["test_end"]) if (d["test_start"] or d["test_end"]) else panel
    return train, test


def env_config(cfg: RunConfig, variant: str = "full") -> EnvConfig:
    e = cfg.section("env")
    lam = 0.0 if variant == "no_icvar" else cfg["risk.lam"]
    try:
        return EnvConfig(
            fee_rate=e["fee_rate"], initial_cash=e["initial_cash"], hmax=e["hmax"],
            reward_scaling=e["reward_scaling"], risk=RiskParams(cfg["risk.alpha"], lam),
            short_cap_u=e["short_cap_u"], buy_limit_v=e["buy_limit_v"],
            short_mode="disabled" if variant == "no_short" else e["short_mode"],
            adaptive_limits=e["adaptive_limits"], random_init=e["random_init"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def make_env(cfg: RunConfig, panel: Panel, variant: str = "full") -> TradingEnv:
    ec = env_config(cfg, variant)
    if cfg["env.trend"] == "fixed" or panel.index_prices is None:
        trend = FixedTrend(cfg["env.fixed_tr"], ec.short_cap_u, ec.buy_limit_v)
    else:
        trend = ParallelTrend(panel.index_prices, initial_cash=ec.initial_cash,
                              reward_scaling=ec.reward_scaling, adaptive=ec.adaptive_limits,
                              u=ec.short_cap_u, v=ec.buy_limit_v)
    return TradingEnv(panel, ec, trend)


def policy_config(cfg: RunConfig, n_stocks: int, variant: str = "full") -> PolicyConfig:
    m = cfg.section("model")
    try:
        return PolicyConfig(n_stocks=n_stocks, hmax=cfg["env.hmax"], window=m["window"], memory=m["memory"],
                            heads=m["heads"], head_dim=m["head_dim"], hidden=m["hidden"],
                            time_aware=m["time_aware"] and variant != "no_timeaware",
                            mask_mode=m["mask_mode"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def train_config(cfg: RunConfig) -> TrainConfig:
    t = cfg.section("train")
    try:
        return TrainConfig(clip_ratio=t["clip_ratio"], gamma=t["gamma"], gae_lambda=t["gae_lambda"], lr=t["lr"],
                           epochs_per_update=t["epochs_per_update"], rollout_len=t["rollout_len"],
                           minibatch_size=t["minibatch_size"], seed=cfg.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------- training

def write_train_log(path: Path, rows: list[dict]) -> None:
    lines = [",".join(Trainer.LOG_FIELDS)]
    for r in rows:
        lines.append(",".join(str(r["update"]) if k == "update" else repr(float(r[k])) for k in Trainer.LOG_FIELDS))
    atomic_write_text(path, "\n".join(lines) + "\n")


def train_policy(cfg: RunConfig, panel: Panel, variant: str = "full", out_dir: Path | None = None,
                 resume: Path | None = None, updates: int | None = None) -> Trainer:
    """Train for ``updates`` (default ``train.updates``) more updates; checkpoint after each one."""
    env = make_env(cfg, panel, variant)
    policy = Policy(policy_config(cfg, panel.n_stocks, variant), seed=cfg.seed)
    trainer = Trainer(policy, train_config(cfg))
    if resume is not None:
        arrays, meta = load_checkpoint(resume)
        trainer.load_state(arrays, meta)
    ckpt = None if out_dir is None else out_dir / cfg["train.checkpoint"]
    for _ in range(cfg["train.updates"] if updates is None else updates):
        row = trainer.step(env)
        log.info("update %d policy_loss=%.6g value_loss=%.6g mean_return=%.6g",
                 row["update"], row["policy_loss"], row["value_loss"], row["mean_return"])
        if ckpt is not None:
            arrays, meta = trainer.state()
            meta["variant"] = variant
            save_checkpoint(ckpt, arrays, meta)
            write_train_log(out_dir / "train_log.csv", trainer.log)
    return trainer


def load_policy(path: str | Path) -> Policy:
    arrays, meta = load_checkpoint(path)
    policy = Policy(PolicyConfig(**meta["policy_config"]))
    policy.load_state_dict(arrays)
    return policy


def build_agent(cfg: RunConfig, train: Panel, variant: str, out_dir: Path) -> tuple[Agent, dict]:
    kind = cfg["agent.kind"]
    n = train.n_stocks
    pcfg = policy_config(cfg, n, variant)
    info = {"agent": kind, "variant": variant, "policy_parameters": Policy(pcfg, seed=0).num_parameters()}
    if kind != "ppo":
        return make_heuristic(kind, n, cfg["env.hmax"], cfg.seed), info
    if cfg["agent.checkpoint"]:
        policy = load_policy(cfg["agent.checkpoint"])
        info["policy_parameters"] = policy.num_parameters()
    else:
        policy = train_policy(cfg, train, variant, out_dir).policy
    return PPOAgent(policy, deterministic=True), info


# ---------------------------------------------------------------- outputs

def _f(x: float) -> str:
    return repr(float(x))


def write_equity_csv(path: Path, panel: Panel, equity: np.ndarray) -> None:
    rows = ["t,date,total_asset,index"]
    for t, (d, v) in enumerate(zip(panel.dates, equity)):
        idx = "" if panel.index_prices is None else _f(panel.index_prices[t])
        rows.append(f"{t},{d.isoformat()},{_f(v)},{idx}")
    atomic_write_text(path, "\n".join(rows) + "\n")


def write_trend_csv(path: Path, env: TradingEnv) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "date", "tr", "u", "v", "sub_cum_return", "sub_avg_return", "sub_total_asset"])
        for t, sig in enumerate(env.trend.trace):
            w.writerow([t, env.panel.dates[t].isoformat(), _f(sig.tr), _f(sig.u), _f(sig.v),
                        _f(sig.sub_cum_return), _f(sig.sub_avg_return), _f(sig.sub_total_asset)])


@dataclass
class BacktestResult:
    variant: str
    equity: np.ndarray
    report: MetricsReport
    info: dict
    out_dir: Path


def run_backtest(cfg: RunConfig, variant: str = "full", out_dir: Path | None = None) -> BacktestResult:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    out_dir = cfg.output_dir if out_dir is None else out_dir
    cfg.check_paths()
    panel = market_panel(cfg)
    train, test = split_panel(cfg, panel)
    agent, info = build_agent(cfg, train, variant, out_dir)
    env = make_env(cfg, test, variant)
    equity = evaluate(agent, env, seed=cfg.seed)
    report = MetricsReport.from_curve(equity, cfg["metrics.risk_free_annual"], cfg["metrics.mar_annual"])
    info.update({"test_start": test.dates[0].isoformat(), "test_end": test.dates[-1].isoformat(),
                 "train_start": train.dates[0].isoformat(), "train_end": train.dates[-1].isoformat(),
                 "seed": cfg.seed})
    if test.index_prices is not None:
        info["index_cumulative_return"] = float(test.index_prices[-1] / test.index_prices[0] - 1.0)

    out_dir.mkdir(parents=True, exist_ok=True)
    write_equity_csv(out_dir / "equity.csv", test, equity)
    atomic_write_text(out_dir / "metrics.json", report_json({variant: report}, extra={"info": info}))
    write_trend_csv(out_dir / "trend_trace.csv", env)
    env.write_trace(out_dir / "episode_trace.csv")
    cfg.write_echo(out_dir / "config.toml")
    if cfg["output.figures"]:
        curves = {f"{info['agent']} ({variant})": equity}
        if test.index_prices is not None:
            curves[test.index_ticker or "index"] = test.index_prices
        plotting.plot_equity(out_dir / "equity.svg", test.dates, curves)
        tr = [s.tr for s in env.trend.trace]
        plotting.plot_trend(out_dir / "trend.svg", test.dates, tr,
                            [s.u for s in env.trend.trace], [s.v for s in env.trend.trace])
    return BacktestResult(variant, equity, report, info, out_dir)


def run_ablation(cfg: RunConfig, variants: list[str]) -> dict[str, BacktestResult]:
    results = {}
    for v in variants:
        results[v] = run_backtest(cfg, v, cfg.output_dir / v)
    reports = {v: r.report for v, r in results.items()}
    rows = {v: r.values() for v, r in reports.items()}
    params = {v: r.info["policy_parameters"] for v, r in results.items()}
    text = format_table(rows) + "\n\npolicy parameters: " + ", ".join(f"{v}={p}" for v, p in params.items()) + "\n"
    atomic_write_text(cfg.output_dir / "ablation.txt", text)
    atomic_write_text(cfg.output_dir / "ablation.json", report_json(reports, extra={"policy_parameters": params}))
    if cfg["output.figures"]:
        plotting.plot_metrics_bars(cfg.output_dir / "ablation.svg", rows, METRIC_NAMES)
    return results
