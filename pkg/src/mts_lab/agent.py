"""Policy/value network on the attention core, a clipped-surrogate trainer, and baselines.

The policy reads a rolling window of environment states (signed-log scaled),
runs them through :class:`~mts_lab.timenet.TimeAwareAttention` and maps the
last query's features to Gaussian action means and a state value. Actions are
``hmax * tanh(u)`` with ``u`` drawn from the Gaussian.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import tensor as tn
from .data import N_FEATURES, n_stocks_from_state
from .env import TradingEnv
from .errors import DimensionError, NumericError
from .tensor import Adam, Tensor
from .timenet import AttentionConfig, TimeAwareAttention

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
_LOG_2PI = math.log(2.0 * math.pi)


def signed_log(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.log1p(np.abs(x))


# ---------------------------------------------------------------- policy network

@dataclass(frozen=True)
class PolicyConfig:
    n_stocks: int
    hmax: float = 100.0
    window: int = 8
    memory: int = 4
    heads: int = 2
    head_dim: int = 8
    hidden: int = 16
    time_aware: bool = True
    mask_mode: str = "additive"
    log_std_init: float = -0.5
    zero_heads: bool = False

    @property
    def state_dim(self) -> int:
        return 1 + N_FEATURES * self.n_stocks

    def attention(self) -> AttentionConfig:
        return AttentionConfig(input_dim=self.state_dim, output_dim=self.hidden, heads=self.heads,
                               head_dim=self.head_dim, seq_len=self.window, memory=self.memory,
                               time_aware=self.time_aware, mask_mode=self.mask_mode)


@dataclass(frozen=True)
class PolicyOutput:
    mean: np.ndarray
    log_std: np.ndarray
    value: float


class Policy:
    def __init__(self, config: PolicyConfig, seed: int = 0):
        self.config = c = config
        rng = np.random.default_rng(seed)
        self.core = TimeAwareAttention(c.attention(), rng)
        bound = 1.0 / math.sqrt(c.hidden)
        if c.zero_heads:
            mean_w, value_w = np.zeros((c.n_stocks, c.hidden)), np.zeros((1, c.hidden))
        else:
            mean_w = rng.uniform(-bound, bound, (c.n_stocks, c.hidden)) * 0.1
            value_w = rng.uniform(-bound, bound, (1, c.hidden))
        self.heads = {
            "mean_W": tn.parameter(mean_w, "mean_W"),
            "mean_b": tn.parameter(np.zeros(c.n_stocks), "mean_b"),
            "value_W": tn.parameter(value_w, "value_W"),
            "value_b": tn.parameter(np.zeros(1), "value_b"),
            "log_std": tn.parameter(np.full(c.n_stocks, c.log_std_init), "log_std"),
        }

    def parameters(self) -> list[Tensor]:
        return self.core.parameters() + list(self.heads.values())

    def num_parameters(self) -> int:
        return self.core.num_parameters() + int(sum(t.size for t in self.heads.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"core.{k}": v for k, v in self.core.state_dict().items()}
        out.update({f"head.{k}": t.data.copy() for k, t in self.heads.items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.core.load_state_dict({k[5:]: v for k, v in state.items() if k.startswith("core.")})
        for k, t in self.heads.items():
            arr = np.asarray(state[f"head.{k}"], dtype=np.float64)
            if arr.shape != t.shape:
                raise DimensionError(f"head {k}: shape {arr.shape} vs {t.shape}")
            t.data = arr.copy()

    def forward(self, X: np.ndarray, M: np.ndarray | None = None) -> tuple[Tensor, Tensor, Tensor]:
        """Batched pass: ``X`` is ``B x T x state_dim`` raw states; returns (mean, log_std, value)."""
        X = signed_log(np.asarray(X, dtype=np.float64))
        M = None if M is None else signed_log(np.asarray(M, dtype=np.float64))
        feats = self.core.forward(X, M)[:, -1]
        h = self.heads
        mean = tn.linear(feats, h["mean_W"], h["mean_b"])
        value = tn.linear(feats, h["value_W"], h["value_b"]).reshape(-1)
        log_std = tn.clip(h["log_std"], LOG_STD_MIN, LOG_STD_MAX)
        return mean, log_std, value

    def policy_forward(self, window: np.ndarray, memory: np.ndarray | None = None) -> PolicyOutput:
        window = np.asarray(window, dtype=np.float64)
        if window.ndim != 2 or window.shape[1] != self.config.state_dim:
            raise DimensionError(f"state window must be T x {self.config.state_dim}, got {window.shape}")
        if window.shape[0] > self.config.window:
            raise DimensionError(f"window of {window.shape[0]} exceeds configured {self.config.window}")
        with tn.no_grad():
            mean, log_std, value = self.forward(window[None], None if memory is None else memory[None])
        return PolicyOutput(mean.data[0].copy(), log_std.data.copy(), float(value.data[0]))


class StateWindow:
    """Rolling buffer of the most recent ``memory + window`` states, zero-padded at the front."""

    def __init__(self, window: int, memory: int, state_dim: int):
        self.window, self.memory, self.state_dim = window, memory, state_dim
        self.buf = np.zeros((memory + window, state_dim))

    def reset(self, state: np.ndarray | None = None) -> None:
        self.buf[:] = 0.0
        if state is not None:
            self.push(state)

    def push(self, state: np.ndarray) -> None:
        state = np.asarray(state, dtype=np.float64)
        if state.shape != (self.state_dim,):
            raise DimensionError(f"state has shape {state.shape}, expected ({self.state_dim},)")
        self.buf = np.roll(self.buf, -1, axis=0)
        self.buf[-1] = state

    def split(self) -> tuple[np.ndarray, np.ndarray]:
        return self.buf[self.memory:].copy(), self.buf[:self.memory].copy()


# ---------------------------------------------------------------- action distribution

def gaussian_log_prob(u: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> float:
    z = (u - mean) / np.exp(log_std)
    return float(np.sum(-0.5 * z * z - log_std - 0.5 * _LOG_2PI))


def squash_log_det(u: np.ndarray, hmax: float) -> float:
    """``sum log |d(hmax tanh u)/du|``, written to stay finite for large ``|u|``."""
    u = np.asarray(u, dtype=np.float64)
    log_sech2 = 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))
    return float(np.sum(math.log(hmax) + log_sech2))


def sample_action(output: PolicyOutput, rng: np.random.Generator, hmax: float
                  ) -> tuple[np.ndarray, np.ndarray, float]:
    """Returns ``(action, pre_squash_sample, log_prob)``; the log-density is that of the action."""
    std = np.exp(output.log_std)
    u = output.mean + std * rng.standard_normal(output.mean.shape)
    log_prob = gaussian_log_prob(u, output.mean, output.log_std) - squash_log_det(u, hmax)
    return hmax * np.tanh(u), u, log_prob


def _gaussian_log_prob_t(u: np.ndarray, mean: Tensor, log_std: Tensor) -> Tensor:
    z = (tn.as_tensor(u) - mean) / tn.exp(log_std)
    return (z * z * -0.5 - log_std - 0.5 * _LOG_2PI).sum(axis=-1)


# ---------------------------------------------------------------- trajectories and advantages

@dataclass
class Trajectory:
    states: list[np.ndarray] = field(default_factory=list)   # (memory + window) x state_dim
    actions: list[np.ndarray] = field(default_factory=list)  # pre-squash samples
    rewards: list[float] = field(default_factory=list)
    values: list[float] = field(default_factory=list)
    log_probs: list[float] = field(default_factory=list)
    dones: list[bool] = field(default_factory=list)
    last_value: float = 0.0

    def __len__(self) -> int:
        return len(self.rewards)

    def validate(self) -> None:
        n = len(self.rewards)
        if not all(len(x) == n for x in (self.states, self.actions, self.values, self.log_probs, self.dones)):
            raise DimensionError("trajectory fields have unequal lengths")
        if not np.all(np.isfinite(self.rewards)):
            raise NumericError("non-finite reward in trajectory")


def compute_gae(rewards: Sequence[float], values: Sequence[float], dones: Sequence[bool],
                last_value: float, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalised advantage estimates and value targets; ``dones[t]`` ends the episode after step t."""
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    d = np.asarray(dones, dtype=bool)
    adv = np.zeros_like(r)
    running = 0.0
    for t in range(len(r) - 1, -1, -1):
        nonterminal = 0.0 if d[t] else 1.0
        next_v = last_value if t == len(r) - 1 else v[t + 1]
        delta = r[t] + gamma * next_v * nonterminal - v[t]
        running = delta + gamma * lam * nonterminal * running
        adv[t] = running
    return adv, adv + v


@dataclass(frozen=True)
class TrainConfig:
    clip_ratio: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    lr: float = 3e-4
    epochs_per_update: int = 4
    rollout_len: int = 256
    minibatch_size: int = 64
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    max_grad_norm: float | None = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.clip_ratio < 1.0:
            raise ValueError("clip_ratio must lie in (0, 1)")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must lie in [0, 1]")
        if self.lr <= 0 or self.epochs_per_update < 1 or self.rollout_len < 1 or self.minibatch_size < 1:
            raise ValueError("lr, epochs, rollout_len and minibatch_size must be positive")


def ppo_loss(policy: Policy, states: np.ndarray, actions: np.ndarray, old_log_probs: np.ndarray,
             advantages: np.ndarray, returns: np.ndarray, config: TrainConfig) -> tuple[Tensor, dict]:
    """Clipped surrogate plus value regression on one minibatch.

    ``old_log_probs`` are Gaussian log-densities of the pre-squash samples;
    the squash correction depends only on the sample and cancels in the ratio.
    """
    c = policy.config
    mean, log_std, value = policy.forward(states[:, c.memory:], states[:, :c.memory])
    new_lp = _gaussian_log_prob_t(actions, mean, log_std)
    ratio = tn.exp(new_lp - old_log_probs)
    eps = config.clip_ratio
    surr1 = ratio * advantages
    surr2 = tn.clip(ratio, 1.0 - eps, 1.0 + eps) * advantages
    per_sample = tn.minimum(surr1, surr2)
    policy_loss = -per_sample.mean()
    err = value - returns
    value_loss = (err * err).mean()
    loss = policy_loss + config.value_coef * value_loss
    entropy = (log_std + 0.5 * (1.0 + _LOG_2PI)).sum()
    if config.entropy_coef:
        loss = loss - config.entropy_coef * entropy
    log_ratio = new_lp.data - old_log_probs
    diag = {
        "policy_loss": float(policy_loss.data),
        "value_loss": float(value_loss.data),
        "kl": float(np.mean(np.exp(log_ratio) - 1.0 - log_ratio)),
        "clip_fraction": float(np.mean(np.abs(ratio.data - 1.0) > eps)),
        "entropy": float(entropy.data),
        "per_sample": per_sample.data.copy(),
        "ratio": ratio.data.copy(),
    }
    return loss, diag


def ppo_update(policy: Policy, optimizer: Adam, traj: Trajectory, config: TrainConfig,
               rng: np.random.Generator) -> dict:
    traj.validate()
    if len(traj) == 0:
        raise DimensionError("empty trajectory")
    adv, ret = compute_gae(traj.rewards, traj.values, traj.dones, traj.last_value,
                           config.gamma, config.gae_lambda)
    sd = adv.std()
    if sd > 1e-8:
        adv = (adv - adv.mean()) / sd
    states = np.stack(traj.states)
    actions = np.stack(traj.actions)
    c = policy.config
    # Gaussian part of the stored log-probs (undo the squash term)
    old_lp = np.array([lp + squash_log_det(a, c.hmax) for lp, a in zip(traj.log_probs, traj.actions)])
    n = len(traj)
    totals = {"policy_loss": 0.0, "value_loss": 0.0, "kl": 0.0, "clip_fraction": 0.0}
    batches = 0
    for _ in range(config.epochs_per_update):
        order = rng.permutation(n)
        for start in range(0, n, config.minibatch_size):
            idx = order[start:start + config.minibatch_size]
            loss, diag = ppo_loss(policy, states[idx], actions[idx], old_lp[idx], adv[idx], ret[idx], config)
            if not np.isfinite(loss.data):
                raise NumericError("non-finite PPO loss")
            optimizer.zero_grad()
            loss.backward()
            if not all(p.grad is None or np.all(np.isfinite(p.grad)) for p in optimizer.params):
                raise NumericError("non-finite gradient")
            optimizer.step()
            for k in totals:
                totals[k] += diag[k]
            batches += 1
    return {k: v / batches for k, v in totals.items()}


# ---------------------------------------------------------------- agents

class Agent(Protocol):
    def reset(self) -> None: ...
    def act(self, state: np.ndarray) -> np.ndarray: ...


class PPOAgent:
    """Acts with a :class:`Policy`; ``deterministic`` uses the mean action."""

    def __init__(self, policy: Policy, deterministic: bool = True, rng: np.random.Generator | None = None):
        self.policy = policy
        c = policy.config
        self.window = StateWindow(c.window, c.memory, c.state_dim)
        self.deterministic = deterministic
        self.rng = rng or np.random.default_rng(0)
        self.last: dict | None = None

    def reset(self) -> None:
        self.window.reset()

    def act(self, state: np.ndarray) -> np.ndarray:
        self.window.push(state)
        X, M = self.window.split()
        out = self.policy.policy_forward(X, M)
        hmax = self.policy.config.hmax
        if self.deterministic:
            u, lp = out.mean, float("nan")
            action = hmax * np.tanh(u)
        else:
            action, u, lp = sample_action(out, self.rng, hmax)
        self.last = {"window": self.window.buf.copy(), "u": u, "log_prob": lp, "value": out.value}
        return action


def _prices(state: np.ndarray) -> np.ndarray:
    n = n_stocks_from_state(state)
    return np.asarray(state[1:]).reshape(n, N_FEATURES)[:, 1].copy()


@dataclass
class HoldAgent:
    n_stocks: int
    hmax: float = 100.0

    def reset(self) -> None:
        pass

    def act(self, state: np.ndarray) -> np.ndarray:
        return np.zeros(self.n_stocks)


@dataclass
class BuyAndHoldAgent:
    """Buys ``hmax`` of every stock each step until the buy budget runs out."""

    n_stocks: int
    hmax: float = 100.0

    def reset(self) -> None:
        pass

    def act(self, state: np.ndarray) -> np.ndarray:
        return np.full(self.n_stocks, self.hmax)


@dataclass
class MaxShortAgent:
    """Sells ``hmax`` of every stock each step, shorting as far as the cap allows."""

    n_stocks: int
    hmax: float = 100.0

    def reset(self) -> None:
        pass

    def act(self, state: np.ndarray) -> np.ndarray:
        return np.full(self.n_stocks, -self.hmax)


@dataclass
class MomentumAgent:
    """Trades ``hmax`` in the direction of each stock's ``lookback``-day price change."""

    n_stocks: int
    hmax: float = 100.0
    lookback: int = 5
    history: list = field(default_factory=list, repr=False)

    def reset(self) -> None:
        self.history.clear()

    def act(self, state: np.ndarray) -> np.ndarray:
        self.history.append(_prices(state))
        if len(self.history) <= self.lookback:
            return np.zeros(self.n_stocks)
        return self.hmax * np.sign(self.history[-1] - self.history[-1 - self.lookback])


@dataclass
class RandomAgent:
    n_stocks: int
    hmax: float = 100.0
    seed: int = 0

    def __post_init__(self):
        self.reset()

    def reset(self) -> None:
        self.rng = np.random.default_rng(self.seed)

    def act(self, state: np.ndarray) -> np.ndarray:
        return self.rng.uniform(-1.0, 1.0, self.n_stocks) * self.hmax


HEURISTICS = {
    "hold": HoldAgent,
    "buy_and_hold": BuyAndHoldAgent,
    "momentum": MomentumAgent,
    "max_short": MaxShortAgent,
    "random": RandomAgent,
}


def make_heuristic(name: str, n_stocks: int, hmax: float, seed: int = 0) -> Agent:
    if name not in HEURISTICS:
        raise ValueError(f"unknown agent {name!r}; choose from {sorted(HEURISTICS)}")
    if name == "random":
        return RandomAgent(n_stocks, hmax, seed)
    return HEURISTICS[name](n_stocks, hmax)


def evaluate(agent: Agent, env: TradingEnv, seed: int | None = None) -> np.ndarray:
    """Run one full episode and return the equity curve ``T_0 .. T_end``."""
    state = env.reset(seed)
    agent.reset()
    done = env.done
    while not done:
        state, _, done, _ = env.step(agent.act(state))
    return np.asarray(env.equity, dtype=np.float64)


# ---------------------------------------------------------------- training loop

def collect_rollout(env: TradingEnv, agent: PPOAgent, length: int, rng: np.random.Generator) -> Trajectory:
    """``length`` sampled steps, resetting the env (seeded from ``rng``) at each episode start."""
    traj = Trajectory()
    state = env.reset(int(rng.integers(2**31)))
    agent.reset()
    for _ in range(length):
        if env.done:
            state = env.reset(int(rng.integers(2**31)))
            agent.reset()
        action = agent.act(state)
        info = agent.last
        state, reward, done, _ = env.step(action)
        traj.states.append(info["window"])
        traj.actions.append(np.asarray(info["u"], dtype=np.float64))
        traj.rewards.append(float(reward))
        traj.values.append(info["value"])
        traj.log_probs.append(info["log_prob"])
        traj.dones.append(bool(done))
    if env.done:
        traj.last_value = 0.0
    else:
        w = agent.window
        probe = StateWindow(w.window, w.memory, w.state_dim)
        probe.buf = w.buf.copy()
        probe.push(state)
        X, M = probe.split()
        traj.last_value = agent.policy.policy_forward(X, M).value
    return traj


class Trainer:
    """PPO training with exact resume: parameters, Adam moments and RNG state are checkpointed."""

    LOG_FIELDS = ("update", "policy_loss", "value_loss", "kl", "clip_fraction", "mean_return")

    def __init__(self, policy: Policy, config: TrainConfig):
        self.policy = policy
        self.config = config
        self.optimizer = Adam(policy.parameters(), lr=config.lr, max_grad_norm=config.max_grad_norm)
        self.rng = np.random.default_rng(config.seed)
        self.update_index = 0
        self.log: list[dict] = []

    def step(self, env: TradingEnv) -> dict:
        agent = PPOAgent(self.policy, deterministic=False, rng=self.rng)
        traj = collect_rollout(env, agent, self.config.rollout_len, self.rng)
        diag = ppo_update(self.policy, self.optimizer, traj, self.config, self.rng)
        self.update_index += 1
        row = {"update": self.update_index, **diag, "mean_return": float(np.mean(traj.rewards))}
        self.log.append(row)
        return row

    def train(self, env: TradingEnv, updates: int) -> list[dict]:
        return [self.step(env) for _ in range(updates)]

    def state(self) -> tuple[dict[str, np.ndarray], dict]:
        arrays = dict(self.policy.state_dict())
        opt = self.optimizer.state_dict()
        for i, (m, v) in enumerate(zip(opt["m"], opt["v"])):
            arrays[f"adam.m.{i}"] = m
            arrays[f"adam.v.{i}"] = v
        meta = {
            "update_index": self.update_index,
            "adam_t": opt["t"],
            "rng_state": self.rng.bit_generator.state,
            "train_config": asdict(self.config),
            "policy_config": asdict(self.policy.config),
            "log": self.log,
        }
        return arrays, meta

    def load_state(self, arrays: dict[str, np.ndarray], meta: dict) -> None:
        self.policy.load_state_dict(arrays)
        k = len(self.optimizer.params)
        self.optimizer.load_state_dict({"t": meta["adam_t"],
                                        "m": [arrays[f"adam.m.{i}"] for i in range(k)],
                                        "v": [arrays[f"adam.v.{i}"] for i in range(k)]})
        self.rng.bit_generator.state = meta["rng_state"]
        self.update_index = int(meta["update_index"])
        self.log = list(meta.get("log", []))
