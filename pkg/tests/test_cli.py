import csv
import datetime as dt
import json
import time

import numpy as np
import pytest

from mts_lab.cli import main, split_overrides
from mts_lab.config import RunConfig, parse_override_value
from mts_lab.data import load_ohlcv
from mts_lab.errors import ConfigError
from mts_lab.synthetic import month_starts

SMALL_PPO = """
seed = 3
[data]
synthetic = "trending"
synthetic_days = 80
synthetic_stocks = 2
[split]
train_end = "2019-03-29"
test_start = "2019-04-01"
[model]
window = 4
memory = 2
head_dim = 4
hidden = 8
[train]
updates = 2
rollout_len = 32
minibatch_size = 16
epochs_per_update = 2
"""


def write_config(tmp_path, text=SMALL_PPO, name="run.toml"):
    path = tmp_path / name
    path.write_text(text)
    return path


def run(*argv):
    return main([str(a) for a in argv])


# ---------------------------------------------------------------- config

def test_override_parsing():
    assert split_overrides(["--risk.alpha", "0.1", "--env.short_mode=disabled"]) == [
        ("risk.alpha", 0.1), ("env.short_mode", "disabled")]
    assert parse_override_value("true") is True and parse_override_value("abc") == "abc"
    with pytest.raises(ConfigError):
        split_overrides(["--risk.alpha"])


def test_config_rejects_unknown_and_mistyped_keys():
    with pytest.raises(ConfigError):
        RunConfig.from_sources(overrides=[("data.synthetic", "flat"), ("risk.beta", 1.0)])
    with pytest.raises(ConfigError):
        RunConfig.from_sources(overrides=[("data.synthetic", "flat"), ("model.window", "eight")])


def test_seed_falls_back_to_environment():
    cfg = RunConfig.from_sources(overrides=[("data.synthetic", "flat")], env={"MTS_LAB_SEED": "17"})
    assert cfg.seed == 17
    assert RunConfig.from_sources(overrides=[("data.synthetic", "flat")], env={}).seed == 0


def test_dataset1_split_accepted(tmp_path):
    text = f"""
[data]
synthetic = "rise5"
synthetic_days = 1100
synthetic_start = "2015-11-02"
[split]
train_start = "2016-01-01"
train_end = "2018-12-31"
test_start = "2019-01-01"
test_end = "2019-12-31"
[agent]
kind = "buy_and_hold"
[output]
dir = "{tmp_path / 'out'}"
figures = false
"""
    assert run("backtest", "-c", write_config(tmp_path, text)) == 0
    info = json.loads((tmp_path / "out" / "metrics.json").read_text())["info"]
    assert info["test_start"].startswith("2019-01") and info["test_end"].startswith("2019-12")
    assert info["train_start"].startswith("2016-01") and info["train_end"].startswith("2018-12")


def test_test_start_before_train_end_is_config_error(tmp_path, capsys):
    cfg = write_config(tmp_path)
    rc = run("backtest", "-c", cfg, "--split.test_start", "2019-02-01", "--output-dir", tmp_path / "o")
    assert rc == 2
    assert "must precede" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_unknown_variant_is_usage_error(tmp_path):
    assert run("ablate", "-c", write_config(tmp_path), "--variants", "full,bogus") == 2


# ---------------------------------------------------------------- synthetic

def test_synthetic_decline(tmp_path, capsys):
    assert run("synthetic", "decline5", "--days", 100, "--output-dir", tmp_path) == 0
    assert "-99.407947%" in capsys.readouterr().out
    series = load_ohlcv(tmp_path / "decline5.csv", ["SYN0", "DJI"])
    assert series[1].close[-1] == pytest.approx(100 * 0.95 ** 100, rel=1e-12)


def test_synthetic_flat_metrics_trivial(tmp_path):
    out = tmp_path / "flat"
    text = f"""
[data]
synthetic = "flat"
synthetic_days = 60
[agent]
kind = "hold"
[output]
dir = "{out}"
figures = false
"""
    assert run("backtest", "-c", write_config(tmp_path, text)) == 0
    runs = json.loads((out / "metrics.json").read_text())["runs"]
    assert runs["full"]["cumulative_return"] == 0


def test_weekend_effect_positional_audit(tmp_path):
    assert run("synthetic", "weekend_effect", "--days", 300, "--seed", 11, "--output-dir", tmp_path) == 0
    with (tmp_path / "weekend_effect.csv").open() as fh:
        rows = [r for r in csv.DictReader(fh) if r["ticker"] == "SYN0"]
    dates = [dt.date.fromisoformat(r["date"]) for r in rows]
    close = np.array([float(r["close"]) for r in rows])
    allowed = (np.arange(len(rows)) % 5 == 0) | month_starts(dates)
    shocked = close != 100.0
    assert shocked.sum() > 50
    assert not np.any(shocked & ~allowed)


def test_synthetic_rejects_short_market(tmp_path):
    assert run("synthetic", "flat", "--days", 1, "--output-dir", tmp_path) == 2


# ---------------------------------------------------------------- pipeline

def test_backtest_outputs_and_determinism(tmp_path):
    cfg = write_config(tmp_path)
    for name in ("a", "b"):
        assert run("backtest", "-c", cfg, "--output-dir", tmp_path / name) == 0
    for f in ("metrics.json", "equity.csv", "trend_trace.csv", "equity.svg", "trend.svg", "train_log.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_config_echo_reproduces_run(tmp_path):
    cfg = write_config(tmp_path)
    assert run("backtest", "-c", cfg, "--risk.lam", 0.3, "--output-dir", tmp_path / "a") == 0
    echo = tmp_path / "a" / "config.toml"
    assert "lam = 0.3" in echo.read_text()
    assert run("backtest", "-c", echo, "--output-dir", tmp_path / "b") == 0
    assert (tmp_path / "a" / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()


def test_train_is_quick_and_resumable(tmp_path):
    cfg = write_config(tmp_path)
    t0 = time.perf_counter()
    assert run("train", "-c", cfg, "--train.updates", 1, "--output-dir", tmp_path / "t") == 0
    assert time.perf_counter() - t0 < 60
    ckpt = tmp_path / "t" / "checkpoint.json"
    assert run("train", "-c", cfg, "--train.updates", 2, "--output-dir", tmp_path / "t", "--resume", ckpt) == 0
    with (tmp_path / "t" / "train_log.csv").open() as fh:
        updates = [int(r["update"]) for r in csv.DictReader(fh)]
    assert updates == [1, 2, 3]

    assert run("train", "-c", cfg, "--train.updates", 3, "--output-dir", tmp_path / "s") == 0
    assert (tmp_path / "s" / "train_log.csv").read_text() == (tmp_path / "t" / "train_log.csv").read_text()


def test_missing_data_fails_without_checkpoint(tmp_path):
    text = f"""
[data]
path = "{tmp_path / 'nope.csv'}"
tickers = ["A"]
"""
    rc = run("train", "-c", write_config(tmp_path, text), "--output-dir", tmp_path / "t")
    assert rc == 3
    assert not (tmp_path / "t" / "checkpoint.json").exists()


def test_backtest_from_checkpoint(tmp_path):
    cfg = write_config(tmp_path)
    assert run("train", "-c", cfg, "--output-dir", tmp_path / "t") == 0
    ckpt = tmp_path / "t" / "checkpoint.json"
    assert run("backtest", "-c", cfg, "--agent.checkpoint", ckpt, "--output-dir", tmp_path / "b") == 0
    assert not (tmp_path / "b" / "checkpoint.json").exists()


def test_no_icvar_reward_is_scaled_delta_p(tmp_path):
    from mts_lab import pipeline

    cfg = RunConfig.from_sources(write_config(tmp_path))
    env = pipeline.make_env(cfg, pipeline.market_panel(cfg), "no_icvar")
    env.reset()
    rng = np.random.default_rng(0)
    while not env.done:
        r = env.step(rng.uniform(-100, 100, env.n))
        assert r.reward == cfg["env.reward_scaling"] * r.info["delta_p"]


def test_ablation_table_and_parameter_counts(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert run("ablate", "-c", cfg, "--variants", "full,no_timeaware", "--output-dir", tmp_path / "ab",
               "--output.figures", "false") == 0
    doc = json.loads((tmp_path / "ab" / "ablation.json").read_text())
    counts = doc["policy_parameters"]
    assert counts["full"] != counts["no_timeaware"]
    assert "policy parameters: full=" in capsys.readouterr().out


def test_no_short_below_full_on_decline(tmp_path):
    text = f"""
[data]
synthetic = "decline5"
synthetic_days = 100
[env]
hmax = 1e6
short_cap_u = 1e5
adaptive_limits = false
[agent]
kind = "max_short"
[output]
dir = "{tmp_path / 'ab'}"
figures = false
"""
    assert run("ablate", "-c", write_config(tmp_path, text), "--variants", "full,no_short") == 0
    runs = json.loads((tmp_path / "ab" / "ablation.json").read_text())["runs"]
    assert runs["no_short"]["cumulative_return"] < runs["full"]["cumulative_return"]
    assert runs["full"]["cumulative_return"] > 0


def test_report_command(tmp_path, capsys):
    text = SMALL_PPO.replace("[train]", "[agent]\nkind = \"random\"\n[train]")
    assert run("backtest", "-c", write_config(tmp_path, text), "--output-dir", tmp_path / "b") == 0
    capsys.readouterr()
    assert run("report", tmp_path / "b" / "metrics.json", "--reference", "--output-dir", tmp_path / "r") == 0
    out = capsys.readouterr().out
    assert "published Dataset 1 (2019)" in out and "0.5203" in out
    assert json.loads((tmp_path / "r" / "report.json").read_text())["reference"]
    assert run("report", tmp_path / "missing.json") == 3
