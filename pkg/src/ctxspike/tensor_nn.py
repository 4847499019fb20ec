"""Dense numeric kernels used by the context modules.

Everything here is plain float64 numpy. Matrices follow the row-vector
convention ``y = x @ W + b``; recurrent gates use the i, f, g, o order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes do not conform."""


def as_mat(x, name: str = "x") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise DimensionError(f"{name}: expected a matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name}: non-finite entries")
    return a


@dataclass
class WeightBundle:
    """Named parameter map plus the model dimensions it was built for."""

    params: dict[str, np.ndarray]
    d_model: int
    heads: int
    vocab: int
    conv_kernel: int = 3
    hidden: int = 0
    embed_dim: int = 0
    extra: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.heads < 1 or self.d_model % self.heads:
            raise DimensionError(
                f"d_model={self.d_model} not divisible by heads={self.heads}"
            )
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in self.params.items()}

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def get(self, name: str, shape: tuple[int, ...] | None = None) -> np.ndarray:
        try:
            p = self.params[name]
        except KeyError:
            raise KeyError(f"weight bundle is missing {name!r}") from None
        if shape is not None and p.shape != tuple(shape):
            raise DimensionError(f"{name}: expected shape {tuple(shape)}, got {p.shape}")
        return p

    def require(self, names) -> None:
        missing = [n for n in names if n not in self.params]
        if missing:
            raise KeyError(f"weight bundle is missing {', '.join(map(repr, missing))}")

    @property
    def metadata(self) -> dict[str, int]:
        return {
            "d_model": self.d_model,
            "heads": self.heads,
            "vocab": self.vocab,
            "conv_kernel": self.conv_kernel,
            "hidden": self.hidden,
            "embed_dim": self.embed_dim,
        }


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 0.3
    lambda2: float = 0.2
    smoothing_eps: float = 0.1

    def __post_init__(self) -> None:
        if not 0.0 <= self.lambda1 <= 1.0:
            raise ValueError(f"lambda1 must lie in [0, 1], got {self.lambda1}")
        if self.lambda2 < 0.0:
            raise ValueError(f"lambda2 must be non-negative, got {self.lambda2}")
        if not 0.0 <= self.smoothing_eps < 1.0:
            raise ValueError(f"smoothing_eps must lie in [0, 1), got {self.smoothing_eps}")


def linear(x, W, bias=None) -> np.ndarray:
    x = as_mat(x, "x")
    W = as_mat(W, "W")
    if x.shape[1] != W.shape[0]:
        raise DimensionError(f"linear: x is {x.shape} but W is {W.shape}")
    out = x @ W
    if bias is not None:
        b = np.asarray(bias, dtype=np.float64).reshape(-1)
        if b.shape[0] != W.shape[1]:
            raise DimensionError(f"linear: bias has {b.shape[0]} entries, W has {W.shape[1]} columns")
        out = out + b
    return out


def conv1d(x, kernel, bias=None) -> np.ndarray:
    """Same-length 1-D convolution over rows.

    ``kernel`` has shape (k, d_in, d_out) with k odd; tap j reads row
    ``t + j - (k - 1) // 2`` and rows outside the sequence are zero.
    """
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 3:
        raise DimensionError(f"conv1d: kernel must be (k, d_in, d_out), got {kernel.shape}")
    k, d_in, d_out = kernel.shape
    if k % 2 == 0:
        raise ValueError(f"conv1d: kernel size must be odd, got {k}")
    if x.ndim != 2 or x.shape[1] != d_in:
        raise DimensionError(f"conv1d: input {x.shape} does not match kernel {kernel.shape}")
    U = x.shape[0]
    half = (k - 1) // 2
    padded = np.zeros((U + 2 * half, d_in))
    padded[half:half + U] = x
    out = np.zeros((U, d_out))
    for j in range(k):
        out += padded[j:j + U] @ kernel[j]
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64).reshape(-1)
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to stay overflow-free
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def lstm_cell(x, h, c, w_ih, w_hh, b):
    """One LSTM step; returns the new (h, c)."""
    gates = x @ w_ih + h @ w_hh + b
    n = h.shape[-1]
    i = _sigmoid(gates[:n])
    f = _sigmoid(gates[n:2 * n])
    g = np.tanh(gates[2 * n:3 * n])
    o = _sigmoid(gates[3 * n:])
    c = f * c + i * g
    h = o * np.tanh(c)
    return h, c


def lstm_run(xs: np.ndarray, w_ih, w_hh, b):
    n = np.asarray(w_hh).shape[0]
    h = np.zeros(n)
    c = np.zeros(n)
    for x in xs:
        h, c = lstm_cell(x, h, c, w_ih, w_hh, b)
    return h, c


def blstm_features(xs, fwd: tuple, bwd: tuple) -> np.ndarray:
    """Concatenation [h_fwd, c_fwd, h_bwd, c_bwd] at the last step of each direction.

    ``fwd`` and ``bwd`` are (w_ih, w_hh, b) triples.
    """
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[0] == 0:
        raise ValueError("blstm_encode: input sequence must be non-empty")
    hf, cf = lstm_run(xs, *fwd)
    hb, cb = lstm_run(xs[::-1], *bwd)
    return np.concatenate([hf, cf, hb, cb])


def blstm_encode(xs, fwd: tuple, bwd: tuple, w_out, b_out) -> np.ndarray:
    feats = blstm_features(xs, fwd, bwd)
    return linear(feats, w_out, b_out)[0]


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x) -> np.ndarray:
    x = as_mat(x, "x")
    m = np.max(x, axis=1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def multi_head_attention(q, kv, w_q, w_k, w_v, heads: int):
    """Scaled dot-product attention with ``heads`` heads.

    Returns ``(alpha, c)`` where ``alpha`` has shape (heads, U, M) and
    ``c`` is the (U, d_model) concatenation of per-head contexts.
    """
    q = np.asarray(q, dtype=np.float64)
    kv = np.asarray(kv, dtype=np.float64)
    if kv.ndim != 2 or kv.shape[0] == 0:
        raise ValueError("multi_head_attention: key/value set is empty")
    if q.ndim != 2:
        raise DimensionError(f"multi_head_attention: query must be a matrix, got {q.shape}")
    Q = q @ w_q
    K = kv @ w_k
    Vv = kv @ w_v
    d_model = Q.shape[1]
    if d_model % heads or K.shape[1] != d_model or Vv.shape[1] != d_model:
        raise DimensionError("multi_head_attention: projected widths do not split into heads")
    d = d_model // heads
    U, M = Q.shape[0], K.shape[0]
    alpha = np.zeros((heads, U, M))
    c = np.zeros((U, d_model))
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        scores = Q[:, sl] @ K[:, sl].T / math.sqrt(d)
        a = softmax(scores, axis=1) if U else np.zeros((0, M))
        alpha[h] = a
        c[:, sl] = a @ Vv[:, sl]
    return alpha, c


def label_smoothing_loss(logp, targets, eps: float = 0.1) -> float:
    logp = as_mat(logp, "logp")
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    N, V = logp.shape
    if targets.shape[0] != N:
        raise DimensionError(f"label_smoothing_loss: {N} rows but {targets.shape[0]} targets")
    if N == 0:
        return 0.0
    if np.any(targets < 0) or np.any(targets >= V):
        raise IndexError(f"label_smoothing_loss: target out of range [0, {V})")
    rows = np.arange(N)
    tgt = logp[rows, targets]
    off = (logp.sum(axis=1) - tgt) / (V - 1) if V > 1 else np.zeros(N)
    return float(np.mean(-((1.0 - eps) * tgt + eps * off)))


def joint_loss(l_ctc: float, l_att: float, l_bias: float, cfg: LossConfig) -> float:
    """Weighted hybrid loss; ``l_att`` is supplied by an external decoder."""
    return cfg.lambda1 * l_ctc + (1.0 - cfg.lambda1) * l_att + cfg.lambda2 * l_bias
