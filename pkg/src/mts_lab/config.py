"""Run configuration: TOML file, dotted flag overrides, validation and echo.

Every key has a default below; a file or override may only set known keys.
Values are type-checked against the default (ints are accepted for floats).
Empty strings mean "unset" for optional string keys.
"""

from __future__ import annotations

import copy
import datetime as dt
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import tomli_w

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError, NotFound

SEED_ENV = "MTS_LAB_SEED"

DEFAULTS: dict[str, Any] = {
    "seed": -1,  # -1: fall back to $MTS_LAB_SEED, then 0
    "data": {
        "path": "",
        "tickers": [],
        "index": "DJI",
        "synthetic": "",
        "synthetic_days": 300,
        "synthetic_stocks": 5,
        "synthetic_start": "2019-01-07",
    },
    "split": {"train_start": "", "train_end": "", "test_start": "", "test_end": ""},
    "env": {
        "fee_rate": 0.001,
        "initial_cash": 1e6,
        "hmax": 100.0,
        "reward_scaling": 1e-4,
        "short_cap_u": 1e4,
        "buy_limit_v": 1.0,
        "short_mode": "enabled",
        "adaptive_limits": True,
        "random_init": False,
        "trend": "parallel",
        "fixed_tr": 1.0,
    },
    "risk": {"alpha": 0.05, "lam": 0.1},
    "model": {
        "window": 8,
        "memory": 4,
        "heads": 2,
        "head_dim": 8,
        "hidden": 16,
        "time_aware": True,
        "mask_mode": "additive",
    },
    "train": {
        "updates": 10,
        "clip_ratio": 0.2,
        "gamma": 0.99,
        "gae_lambda": 0.95,
        "lr": 3e-4,
        "epochs_per_update": 4,
        "rollout_len": 256,
        "minibatch_size": 64,
        "checkpoint": "checkpoint.json",
    },
    "agent": {"kind": "ppo", "checkpoint": ""},
    "metrics": {"risk_free_annual": 0.03, "mar_annual": 0.03},
    "output": {"dir": "runs/default", "figures": True},
}

AGENT_KINDS = ("ppo", "hold", "buy_and_hold", "momentum", "max_short", "random")
TREND_KINDS = ("parallel", "fixed")


def _merge(base: dict, update: dict, prefix: str = "") -> None:
    for key, value in update.items():
        name = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {name!r}")
        default = base[key]
        if isinstance(default, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{name!r} must be a table")
            _merge(default, value, name + ".")
        else:
            base[key] = _coerce(name, default, value)


def _coerce(name: str, default: Any, value: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name!r} must be true/false, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name!r} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name!r} must be an integer, got {value!r}")
        return value
    if isinstance(default, str):
        if isinstance(value, (dt.date, dt.datetime)):
            return value.isoformat()
        if not isinstance(value, str):
            raise ConfigError(f"{name!r} must be a string, got {value!r}")
        return value
    if isinstance(default, list):
        if isinstance(value, str):
            value = [v for v in (s.strip() for s in value.split(",")) if v]
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise ConfigError(f"{name!r} must be a list of strings")
        return list(value)
    raise ConfigError(f"unsupported config key {name!r}")


def parse_override_value(raw: str) -> Any:
    """Read ``raw`` as a TOML value; bare words fall back to strings."""
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def nest(dotted: str, value: Any) -> dict:
    out: dict = {}
    cur = out
    parts = dotted.split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return out


def _parse_date(name: str, value: str) -> dt.date | None:
    if not value:
        return None
    try:
        return dt.date.fromisoformat(value)
    except ValueError as exc:
        raise ConfigError(f"{name!r}: bad date {value!r}") from exc


@dataclass
class RunConfig:
    values: dict
    source: Path | None = None

    @classmethod
    def from_sources(cls, path: str | Path | None = None, overrides: Sequence[tuple[str, Any]] = (),
                     env: dict | None = None) -> "RunConfig":
        values = copy.deepcopy(DEFAULTS)
        source = None
        if path:
            source = Path(path)
            if not source.is_file():
                raise ConfigError(f"config file {source} not found")
            try:
                doc = tomllib.loads(source.read_text(encoding="utf-8"))
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{source}: {exc}") from exc
            _merge(values, doc)
        for key, value in overrides:
            _merge(values, nest(key, value))
        cfg = cls(values, source)
        cfg._resolve_seed(os.environ if env is None else env)
        cfg.validate()
        return cfg

    def _resolve_seed(self, env) -> None:
        if self.values["seed"] >= 0:
            return
        raw = env.get(SEED_ENV, "")
        if raw:
            try:
                self.values["seed"] = int(raw)
            except ValueError as exc:
                raise ConfigError(f"{SEED_ENV}={raw!r} is not an integer") from exc
        else:
            self.values["seed"] = 0

    def __getitem__(self, dotted: str) -> Any:
        cur: Any = self.values
        for part in dotted.split("."):
            cur = cur[part]
        return cur

    def section(self, name: str) -> dict:
        return dict(self.values[name])

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    @property
    def output_dir(self) -> Path:
        return Path(self["output.dir"])

    def dates(self) -> dict[str, dt.date | None]:
        return {k: _parse_date(f"split.{k}", v) for k, v in self.values["split"].items()}

    def validate(self) -> None:
        d = self.dates()
        for a, b in (("train_start", "train_end"), ("test_start", "test_end")):
            if d[a] and d[b] and d[a] > d[b]:
                raise ConfigError(f"split.{a} {d[a]} is after split.{b} {d[b]}")
        if d["train_end"] and d["test_start"] and not d["train_end"] < d["test_start"]:
            raise ConfigError(f"split.train_end {d['train_end']} must precede split.test_start {d['test_start']}")
        if self["agent.kind"] not in AGENT_KINDS:
            raise ConfigError(f"agent.kind must be one of {AGENT_KINDS}")
        if self["env.trend"] not in TREND_KINDS:
            raise ConfigError(f"env.trend must be one of {TREND_KINDS}")
        if self["seed"] < 0:
            raise ConfigError("seed must be non-negative")
        if not self["data.path"] and not self["data.synthetic"]:
            raise ConfigError("set data.path or data.synthetic")
        _parse_date("data.synthetic_start", self["data.synthetic_start"])

    def check_paths(self) -> None:
        """Referenced input files must exist (data errors, not config errors)."""
        for key in ("data.path", "agent.checkpoint"):
            p = self[key]
            if p and not Path(p).is_file():
                raise NotFound(f"{key} = {p!r} does not exist")

    def to_toml(self) -> str:
        return tomli_w.dumps(self.values)

    def write_echo(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_toml(), encoding="utf-8")
        return path
