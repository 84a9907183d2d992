"""End-to-end acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line (with its runtime) that is printed in the
pytest terminal summary; run ``pytest tests/test_acceptance.py -v`` to see
just these.
"""

import json
import re
import time

import numpy as np
import pytest

from mts_lab.agent import Policy, PolicyConfig, PPOAgent, RandomAgent, TrainConfig, Trainer, evaluate
from mts_lab.cli import main
from mts_lab.config import RunConfig
from mts_lab.data import build_panel
from mts_lab.env import EnvConfig, TradingEnv
from mts_lab.metrics import MetricsReport, daily_rate, omega, period_returns
from mts_lab.pipeline import run_backtest
from mts_lab.risk import RiskParams, RiskSeries
from mts_lab.synthetic import generate
from mts_lab.tensor import numerical_grad
from mts_lab.timenet import (AttentionConfig, TimeAwareAttention, attention_backward, attention_forward,
                             monthly_mask, time_feature_embedding, weekly_mask)
from mts_lab.trend import FixedTrend, ParallelTrend, TrendSignal, update_buy_limit, update_short_cap

from conftest import grad_errors, random_series


def flat_market_panel(n=5, days=40):
    s = generate("flat", days, n_stocks=n)
    return build_panel(s[:-1], index=s[-1])


def test_01_accounting_conservation(criterion):
    with criterion(1, "accounting conservation, 1000 random sequences", budget_s=10):
        panel = flat_market_panel()
        rng = np.random.default_rng(1)
        free = TradingEnv(panel, EnvConfig(fee_rate=0.0, adaptive_limits=False), FixedTrend(0.5))
        paid = TradingEnv(panel, EnvConfig(fee_rate=0.001, adaptive_limits=False), FixedTrend(0.5))
        for _ in range(1000):
            tr = float(rng.uniform(0, 1))
            free.trend = FixedTrend(tr)
            paid.trend = FixedTrend(tr)
            free.reset(), paid.reset()
            for _ in range(int(rng.integers(1, 9))):
                action = rng.uniform(-150, 150, 5) * (rng.uniform(size=5) < 0.7)
                a = free.step(action).info["total_asset"]
                before = paid.equity[-1]
                info = paid.step(action).info
                assert abs(a - free.equity[0]) <= 1e-9 * free.equity[0]
                traded = np.any(info["shares_sold"] + info["shares_bought"] > 0)
                assert info["total_asset"] < before if traded else info["total_asset"] == before


def test_02_delta_p_identity(criterion):
    with criterion(2, "ΔP identity over a 252-day random backtest"):
        stocks = [random_series(280, seed=k, ticker=f"S{k}") for k in range(5)]
        panel = build_panel(stocks, index=random_series(280, seed=50, ticker="IDX"))
        panel = panel.slice_dates(panel.dates[0], panel.dates[252])
        env = TradingEnv(panel, EnvConfig(hmax=500))
        env.reset()
        rng = np.random.default_rng(2)
        prev, steps = env.equity[0], 0
        while not env.done:
            info = env.step(rng.uniform(-500, 500, 5)).info
            diff = info["total_asset"] - prev
            assert abs(info["delta_p"] - diff) <= 1e-9 * abs(diff)
            prev, steps = info["total_asset"], steps + 1
        assert steps == 252


def _oracle_var(prefix, alpha):
    """Smallest observed return whose empirical CDF strictly exceeds alpha, negated."""
    xs = np.sort(prefix)
    cdf = np.searchsorted(xs, xs, side="right") / len(xs)
    return -xs[np.argmax(cdf > alpha)]


def test_03_risk_engine_oracle(criterion):
    with criterion(3, "risk engine vs literal recomputation, 100 series", budget_s=30):
        rng = np.random.default_rng(3)
        for _ in range(100):
            X = rng.normal(0, 0.02, int(rng.integers(1, 501)))
            alpha = float(rng.choice([0.01, 0.05, 0.1, 0.25]))
            rs = RiskSeries(alpha)
            icv = [rs.append(x) for x in X]
            var = np.array([_oracle_var(X[:t], alpha) for t in range(1, len(X) + 1)])
            excess = np.maximum(-X - var, 0.0)
            for t in range(1, len(X) + 1):
                cvar_t = var[t - 1] + np.sum(excess[:t]) / (alpha * t)
                assert abs(rs.running_var[t - 1] - var[t - 1]) <= 1e-12
                assert abs(rs.running_cvar[t - 1] - cvar_t) <= 1e-12 * max(1.0, abs(cvar_t))
            assert abs(sum(icv) - (rs.running_cvar[-1] - rs.running_cvar[0])) <= 1e-12 * max(1.0, abs(rs.running_cvar[-1]))
            assert all(c >= v for c, v in zip(rs.running_cvar, rs.running_var))


def _random_steps(env, rng, steps, check):
    done_steps = 0
    while done_steps < steps:
        env.reset(int(rng.integers(1 << 30)))
        while not env.done and done_steps < steps:
            cash = env.state.cash
            info = env.step(rng.uniform(-env.config.hmax, env.config.hmax, env.n)).info
            check(env, info, cash)
            done_steps += 1


def test_04_short_and_buy_caps(criterion):
    with criterion(4, "short and buy caps over 10,000 random steps"):
        rng = np.random.default_rng(4)
        stocks = [random_series(300, seed=10 + k, ticker=f"S{k}") for k in range(4)]
        panel = build_panel(stocks, index=random_series(300, seed=77, ticker="IDX"))
        cfg = EnvConfig(hmax=2000, initial_cash=1e5, random_init=True)

        def caps(env, info, _):
            V = env.state.prices
            assert np.all(info["shorted"] <= info["u"] * (1 - info["tr"]) / V + 1e-9)
            spent = float(np.sum(info["shares_bought"] * V) * (1 + cfg.fee_rate))
            assert spent <= info["v"] * info["cash_after_sells"] * info["tr"] * (1 + 1e-12) + 1e-9
            assert env.state.cash >= 0

        _random_steps(TradingEnv(panel, cfg), rng, 10_000, caps)

        def no_shorts(env, info, _):
            assert np.all(info["shorted"] == 0)

        _random_steps(TradingEnv(panel, cfg, FixedTrend(1.0)), rng, 2_000, no_shorts)

        def long_only(env, info, _):
            assert np.all(env.state.shares >= 0)

        disabled = EnvConfig(hmax=2000, initial_cash=1e5, random_init=True, short_mode="disabled")
        _random_steps(TradingEnv(panel, disabled, FixedTrend(0.0)), rng, 2_000, long_only)


def test_05_limit_rules(criterion):
    with criterion(5, "short cap / buy limit rule table, boundaries inclusive"):
        u = lambda cum, avg: update_short_cap(TrendSignal(0.5, sub_cum_return=cum, sub_avg_return=avg))
        v = lambda cum: update_buy_limit(TrendSignal(0.5, sub_cum_return=cum))
        assert u(0.05, 0.0) == 0.0 and u(0.06, -0.2) == 0.0
        assert u(0.0, -0.05) == 1e5 and u(-0.3, -0.07) == 1e5
        assert u(0.0, -0.0499) == 1e4 and u(0.0499, 0.0) == 1e4
        assert v(-0.05) == 0.2 and v(-0.10) == 0.2
        assert v(-0.0499) == 1.0 and v(0.0) == 1.0


def test_06_synthetic_decline(criterion, tmp_path, capsys):
    with criterion(6, "decline market: index -99.41%, max-short gains, long-only loses >= 40%", budget_s=20):
        assert main(["synthetic", "decline5", "--days", "100", "--output-dir", str(tmp_path)]) == 0
        pct = float(re.search(r"cumulative return (-?[\d.]+)%", capsys.readouterr().out).group(1))
        assert abs(pct - (-99.41)) <= 0.05

        base = [("data.synthetic", "decline5"), ("data.synthetic_days", 100), ("env.hmax", 1e6),
                ("env.short_cap_u", 1e5), ("env.adaptive_limits", False), ("output.figures", False)]
        short = RunConfig.from_sources(overrides=base + [("agent.kind", "max_short")])
        gain = run_backtest(short, "full", tmp_path / "short").report.cumulative_return
        long_cfg = RunConfig.from_sources(overrides=base + [("agent.kind", "buy_and_hold")])
        loss = run_backtest(long_cfg, "no_short", tmp_path / "long").report.cumulative_return
        print(f"max-short cumulative return {gain:+.4f}, long-only {loss:+.4f}")
        assert gain > 0
        assert loss <= -0.40


def test_07_attention_gradient_check(criterion):
    with criterion(7, "attention gradients vs central differences (B=1, T=3, tau=2, H=2, D=4)", budget_s=60):
        cfg = AttentionConfig(input_dim=6, output_dim=3, heads=2, head_dim=4, seq_len=3, memory=2)
        model = TimeAwareAttention(cfg, seed=7)
        model.params["w_c"].data = np.array([0.3, -0.2, 0.5])
        rng = np.random.default_rng(7)
        X, M = rng.normal(size=(1, 3, 6)), rng.normal(size=(1, 2, 6))
        G = rng.normal(size=(1, 3, 3))
        attention_forward(X, M, model)
        grads = attention_backward(model, G)

        def f():
            return float(np.sum(model.forward(X, M).data * G))

        targets = {**{k: t.data for k, t in model.params.items()}, "X": X, "M": M}
        report = []
        for name, arr in targets.items():
            elem, norm = grad_errors(grads[name], numerical_grad(f, arr, h=1e-5))
            report.append(f"{name}: {elem:.1e}/{norm:.1e}")
            assert elem < 1e-4 and norm < 1e-4, (name, elem, norm)
        print("max relative error (elementwise/norm): " + ", ".join(report))


def test_08_causality_and_masks(criterion):
    with criterion(8, "causal independence, mod-5/mod-21 masks, period-5 embedding"):
        cfg = AttentionConfig(input_dim=6, output_dim=3, heads=2, head_dim=4, seq_len=6, memory=3)
        model = TimeAwareAttention(cfg, seed=8)
        rng = np.random.default_rng(8)
        X, M = rng.normal(size=(2, 6, 6)), rng.normal(size=(2, 3, 6))
        base = model.forward(X, M).data
        for j in range(6):
            Xp = X.copy()
            Xp[:, j] += rng.normal(size=(2, 6))
            out = model.forward(Xp, M).data
            assert np.max(np.abs(out[:, :j] - base[:, :j]), initial=0.0) <= 1e-12
        for D in range(1, 513):
            d = np.arange(D)
            assert np.array_equal(weekly_mask(D), (d % 5 == 0).astype(float))
            assert np.array_equal(monthly_mask(D), (d % 21 == 0).astype(float))
        for stride in (1, 5):
            week = time_feature_embedding(400, 16, stride=stride)[:, -4:-2]
            step = 5 if stride == 1 else 1
            assert np.max(np.abs(week[step:] - week[:-step])) <= 1e-12


def _metric_oracles(curve, annual=0.03):
    rate = (1 + annual) ** (1 / 252) - 1
    r = [curve[i + 1] / curve[i] - 1 for i in range(len(curve) - 1)]
    n = len(r)
    mean = sum(r) / n
    sd = (sum((x - mean) ** 2 for x in r) / n) ** 0.5
    down = (sum((x - rate) ** 2 for x in r if x < rate) / n) ** 0.5
    return {
        "cumulative_return": (curve[-1] - curve[0]) / curve[0],
        "sharpe": (mean - rate) / sd * 252 ** 0.5,
        "sortino": (mean - rate) / down * 252 ** 0.5,
        "omega": sum(x - rate for x in r if x > rate) / sum(rate - x for x in r if x < rate),
    }


def test_09_metric_oracles(criterion):
    with criterion(9, "metric oracles, scale invariance and Omega identity on 100 curves"):
        rng = np.random.default_rng(9)
        for _ in range(100):
            n = int(rng.integers(20, 400))
            curve = 1e6 * np.cumprod(np.r_[1.0, 1 + rng.normal(rng.uniform(-0.002, 0.002), 0.01, n)])
            got = MetricsReport.from_curve(curve).values()
            scaled = MetricsReport.from_curve(curve * float(rng.uniform(0.01, 100))).values()
            for k, want in _metric_oracles(list(curve)).items():
                assert got[k] == pytest.approx(want, rel=1e-9, abs=1e-12)
                assert scaled[k] == pytest.approx(got[k], rel=1e-9, abs=1e-12)
            excess = np.mean(period_returns(curve)) - daily_rate(0.03)
            assert (omega(curve) > 1) == (excess > 0)


def _cumret(curve):
    return curve[-1] / curve[0] - 1.0


@pytest.mark.slow
def test_10_learning_smoke(criterion):
    with criterion(10, "PPO beats the random agent on a 2-asset trending market in >= 4/5 seeds", budget_s=600):
        wins = []
        for seed in range(5):
            s = generate("trending", 90, seed=seed, n_stocks=2)
            panel = build_panel(s[:-1], index=s[-1])
            cfg = EnvConfig(hmax=1000)
            make = lambda: TradingEnv(panel, cfg, FixedTrend(0.5))
            policy = Policy(PolicyConfig(n_stocks=2, hmax=1000), seed=seed)
            before = _cumret(evaluate(PPOAgent(policy), make()))
            Trainer(policy, TrainConfig(seed=seed)).train(make(), 50)
            after = _cumret(evaluate(PPOAgent(policy), make()))
            rand = np.mean([_cumret(evaluate(RandomAgent(2, 1000, seed=k), make())) for k in range(5)])
            print(f"seed {seed}: before {before:+.4f} after {after:+.4f} random {rand:+.4f}")
            wins.append(after > rand and after > before)
        assert sum(wins) >= 4, wins


def test_11_backtest_determinism(criterion, tmp_path):
    with criterion(11, "backtest rerun gives byte-identical metrics JSON and equity CSV"):
        cfg = tmp_path / "run.toml"
        cfg.write_text("""
seed = 11
[data]
synthetic = "trending"
synthetic_days = 120
synthetic_stocks = 3
[split]
train_end = "2019-04-30"
test_start = "2019-05-01"
[model]
window = 4
memory = 2
head_dim = 4
hidden = 8
[train]
updates = 3
rollout_len = 64
minibatch_size = 32
""")
        for name in ("first", "second"):
            assert main(["backtest", "-c", str(cfg), "--output-dir", str(tmp_path / name)]) == 0
        for f in ("metrics.json", "equity.csv"):
            assert (tmp_path / "first" / f).read_bytes() == (tmp_path / "second" / f).read_bytes()
        assert json.loads((tmp_path / "first" / "metrics.json").read_text())["info"]["agent"] == "ppo"
