"""Time-aware relative multi-head attention over a window of market states.

Pipeline: memory rows are prepended to the input, each row is instance
normalised across features, and a single fused projection yields queries,
keys, time features and values (each softmax-normalised over the head axis).
Content, weekly and monthly scores are blended by a learned 3-way softmax,
then a relatively shifted positional score is added, computed against a
projected calendar embedding. A causal mask lets query ``i`` see only keys
``j <= i + tau``. The output passes through ``tanh(W_out o + b_out)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import BackwardWithoutForward, DimensionError, NumericError
from .tensor import Tensor

WEEK = 5
MONTH = 21
MASK_MODES = ("additive", "literal")


# ---------------------------------------------------------------- embedding and masks

def embedding_frequencies(out_dim: int, stride: int = WEEK) -> np.ndarray:
    """Inverse frequencies ``1 / 10000**(x / out_dim)`` for ``x = 0, stride, 2*stride, ... < out_dim``."""
    if out_dim < 2:
        raise ValueError("out_dim must be >= 2")
    x = np.arange(0, out_dim, stride, dtype=np.float64)
    return 1.0 / (10000.0 ** (x / out_dim))


def embedding_width(out_dim: int, periodic: bool = True, stride: int = WEEK) -> int:
    return 2 * len(embedding_frequencies(out_dim, stride)) + (4 if periodic else 0)


def time_feature_embedding(seq_len: int, out_dim: int, periodic: bool = True,
                           stride: int = WEEK) -> np.ndarray:
    """Calendar-aware sinusoidal embedding with ``seq_len`` rows.

    Row ``i`` encodes position ``p = stride * i``. Columns are
    ``[sin(p f), cos(p f), sin(2 pi p / 5), cos(2 pi p / 5), sin(2 pi p / 21), cos(2 pi p / 21)]``;
    the last four are dropped when ``periodic`` is false. With the default
    stride of 5 the weekly pair is constant (every row sits on a week
    boundary); ``stride=1`` gives one row per trading day.
    """
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    freq = embedding_frequencies(out_dim, stride)
    pos = stride * np.arange(seq_len, dtype=np.float64)
    arg = np.outer(pos, freq)
    cols = [np.sin(arg), np.cos(arg)]
    if periodic:
        w = 2.0 * np.pi / WEEK * pos
        m = 2.0 * np.pi / MONTH * pos
        cols += [np.sin(w)[:, None], np.cos(w)[:, None], np.sin(m)[:, None], np.cos(m)[:, None]]
    return np.concatenate(cols, axis=1)


def weekly_mask(D: int) -> np.ndarray:
    if D < 1:
        raise ValueError("D must be >= 1")
    return (np.arange(D) % WEEK == 0).astype(np.float64)


def monthly_mask(D: int) -> np.ndarray:
    if D < 1:
        raise ValueError("D must be >= 1")
    return (np.arange(D) % MONTH == 0).astype(np.float64)


def causal_mask(T: int, tau: int) -> np.ndarray:
    """``keep[i, j]`` is true iff key ``j`` (memory first) is visible to query ``i``."""
    i = np.arange(T)[:, None]
    j = np.arange(T + tau)[None, :]
    return j <= i + tau


def instance_norm(x, eps: float = 1e-5) -> Tensor:
    """Standardise each row along the last (feature) axis."""
    x = tn.as_tensor(x)
    if x.shape[-1] < 2:
        raise DimensionError("instance norm needs feature dim >= 2")
    centred = x - x.mean(axis=-1, keepdims=True)
    var = (centred * centred).mean(axis=-1, keepdims=True)
    return centred / (var + eps).sqrt()


# ---------------------------------------------------------------- relative shift

def relshift_index(T: int, L: int) -> np.ndarray:
    """Flat source index for each output slot of the pad-reshape-slice shift; -1 marks padding.

    A zero column is prepended to the ``T x L`` score block, the padded
    buffer is re-read as ``(L + 1) x T``, its first row dropped, and the rest
    re-read as ``T x L``.
    """
    padded = np.full((T, L + 1), -1, dtype=np.int64)
    padded[:, 1:] = np.arange(T * L).reshape(T, L)
    return padded.reshape(L + 1, T)[1:].reshape(T, L)


def relative_shift(scores) -> Tensor:
    """Shift ``B x T x L x H`` positional scores from relative to absolute key order."""
    scores = tn.as_tensor(scores)
    if scores.ndim != 4:
        raise DimensionError(f"relative_shift expects B x T x L x H, got {scores.shape}")
    B, T, L, H = scores.shape
    if L < T:
        raise DimensionError("key length must cover the query length")
    moved = scores.transpose(0, 3, 1, 2)  # B H T L
    shifted = tn.gather_last2(moved, relshift_index(T, L))
    return shifted.transpose(0, 2, 3, 1)


# ---------------------------------------------------------------- the network

@dataclass(frozen=True)
class AttentionConfig:
    input_dim: int
    output_dim: int
    heads: int = 2
    head_dim: int = 8
    seq_len: int = 8
    memory: int = 4
    time_aware: bool = True
    mask_mode: str = "additive"
    epsilon: float = 1e-5
    embed_dim: int | None = None
    embed_stride: int = WEEK

    def __post_init__(self):
        for name in ("input_dim", "output_dim", "heads", "head_dim", "seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.input_dim < 2:
            raise ValueError("input_dim must be >= 2 for instance normalisation")
        if self.memory < 0:
            raise ValueError("memory must be >= 0")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}")

    @property
    def width(self) -> int:
        return self.heads * self.head_dim

    @property
    def embedding_out_dim(self) -> int:
        return self.embed_dim if self.embed_dim is not None else max(self.width, 2)

    @property
    def embedding_width(self) -> int:
        return embedding_width(self.embedding_out_dim, self.time_aware, self.embed_stride)

    @property
    def projections(self) -> int:
        return 4 if self.time_aware else 3


def _uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class TimeAwareAttention:
    """Parameters and forward/backward for the time-aware attention block."""

    def __init__(self, config: AttentionConfig, seed: int | np.random.Generator = 0):
        self.config = c = config
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        H, D, I, O, E = c.heads, c.head_dim, c.input_dim, c.output_dim, c.embedding_width
        p = {
            "U": _uniform(rng, (H, D), D),
            "W": _uniform(rng, (H, D), D),
            "Y": _uniform(rng, (H, D), D),
            "W_qkfv": _uniform(rng, (c.projections * H * D, I), I),
            "b_qkfv": _uniform(rng, (c.projections * H * D,), I),
            "W_pos": _uniform(rng, (H * D, E), E),
            "W_out": _uniform(rng, (O, H * D), H * D),
            "b_out": _uniform(rng, (O,), H * D),
        }
        if c.time_aware:
            p["w_c"] = np.zeros(3)
        self.params: dict[str, Tensor] = {k: tn.parameter(v, name=k) for k, v in p.items()}
        self.embedding = time_feature_embedding(c.seq_len + c.memory, c.embedding_out_dim,
                                                periodic=c.time_aware, stride=c.embed_stride)
        if self.embedding.shape[1] != E:
            raise DimensionError("embedding width does not match the position projection")
        self._mask_w = weekly_mask(D)[None, None, None, :]
        self._mask_m = monthly_mask(D)[None, None, None, :]
        self._last: dict | None = None

    # -- parameter access
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise DimensionError(f"{k}: checkpoint shape {arr.shape} vs model {t.shape}")
            t.data = arr.copy()

    # -- forward / backward
    def _check_inputs(self, X: np.ndarray, M: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
        c = self.config
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3 or X.shape[2] != c.input_dim or X.shape[1] < 1 or X.shape[1] > c.seq_len:
            raise DimensionError(f"X must be B x T x {c.input_dim} with 1 <= T <= {c.seq_len}, got {X.shape}")
        B = X.shape[0]
        if M is None:
            M = np.zeros((B, c.memory, c.input_dim))
        M = np.asarray(M, dtype=np.float64)
        if M.shape != (B, c.memory, c.input_dim):
            raise DimensionError(f"M must be {(B, c.memory, c.input_dim)}, got {M.shape}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(M))):
            raise NumericError("non-finite attention input")
        return X, M

    def forward(self, X, M=None, input_grad: bool = False) -> Tensor:
        c = self.config
        X, M = self._check_inputs(X, M)
        B, T, _ = X.shape
        tau, H, D = c.memory, c.heads, c.head_dim
        L = T + tau
        P = self.params
        Xt = Tensor(X, requires_grad=input_grad, name="X")
        Mt = Tensor(M, requires_grad=input_grad and tau > 0, name="M")

        full = tn.concat([Mt, Xt], axis=1) if tau > 0 else Xt
        normed = instance_norm(full, c.epsilon)
        proj = tn.linear(normed, P["W_qkfv"], P["b_qkfv"]).reshape(B, L, c.projections, H, D)
        parts = [tn.softmax(proj[:, :, k], axis=2) for k in range(c.projections)]
        if c.time_aware:
            Q, K, F, V = parts
        else:
            Q, K, V = parts
        Qt = Q[:, L - T:]

        R = tn.linear(self.embedding[:L], P["W_pos"]).reshape(L, H, D)
        S_c = tn.einsum("bihd,bjhd->bijh", Qt + P["U"], K)
        S_p = tn.einsum("bihd,jhd->bijh", Qt + P["Y"], R)
        if c.time_aware:
            Q_w = tn.softmax(Q * self._mask_w, axis=2)[:, L - T:]
            Q_m = tn.softmax(Q * self._mask_m, axis=2)[:, L - T:]
            S_w = tn.einsum("bihd,bjhd->bijh", Q_w, F)
            S_m = tn.einsum("bihd,bjhd->bijh", Q_m, F)
            wc = tn.softmax(P["w_c"], axis=0)
            S = wc[0] * S_c + wc[1] * S_w + wc[2] * S_m + relative_shift(S_p)
        else:
            S = S_c + relative_shift(S_p)
        S = S * (1.0 / math.sqrt(D))

        keep = causal_mask(T, tau)[None, :, :, None]
        if c.mask_mode == "additive":
            weights = tn.softmax(tn.masked_fill(S, keep, -np.inf), axis=2)
        else:
            weights = tn.softmax(tn.softmax(S, axis=2) * keep.astype(np.float64), axis=2)
        O = tn.einsum("bijh,bjhd->bihd", weights, V).reshape(B, T, H * D)
        out = tn.tanh(tn.linear(O, P["W_out"], P["b_out"]))
        if not np.all(np.isfinite(out.data)):
            raise NumericError("non-finite attention output")
        self._last = {"out": out, "X": Xt, "M": Mt, "weights": weights.data}
        return out

    __call__ = forward

    @property
    def last_weights(self) -> np.ndarray | None:
        return None if self._last is None else self._last["weights"]

    def backward(self, upstream) -> dict[str, np.ndarray]:
        """Gradients of ``sum(upstream * output)`` for every parameter and for ``X``/``M``."""
        if self._last is None or not self._last["out"].has_tape:
            raise BackwardWithoutForward("no recorded forward pass")
        out = self._last["out"]
        for t in self.parameters():
            t.grad = None
        out.backward(upstream)
        self._last["out"] = Tensor(out.data)  # the tape is consumed
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self.params.items()}
        for k in ("X", "M"):
            t = self._last[k]
            grads[k] = t.grad if t.grad is not None else np.zeros_like(t.data)
        return grads


def attention_forward(X, M, model: TimeAwareAttention) -> Tensor:
    return model.forward(X, M, input_grad=True)


def attention_backward(model: TimeAwareAttention, upstream) -> dict[str, np.ndarray]:
    return model.backward(upstream)
