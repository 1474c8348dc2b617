"""Neural-network operations built on :mod:`soundtag.tensor`.

Layout conventions: images are ``[batch, channel, time, freq]``; sequences
are ``[batch, time, feature]``; dense weights are ``[in, out]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, conv2d, mish, relu  # noqa: F401  (re-exported)

BCE_EPS = 1e-12


@dataclass(frozen=True)
class PoolSpec:
    pool_time: int = 2
    pool_freq: int = 2

    def __post_init__(self):
        if self.pool_time not in (1, 2) or self.pool_freq not in (1, 2):
            raise ValueError(f"pool factors must be 1 or 2, got {self}")


def maxpool2d(x: Tensor, spec: PoolSpec) -> Tensor:
    return T.max_pool2d(x, (spec.pool_time, spec.pool_freq))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel (axis 1) standardization followed by an affine map.

    In training mode the batch statistics are used and the running buffers
    are updated in place by exponential moving average.
    """
    axes = tuple(ax for ax in range(x.ndim) if ax != 1)
    bshape = [1] * x.ndim
    bshape[1] = x.shape[1]
    if training:
        count = x.size // x.shape[1]
        if count < 2:
            raise ValueError("batch_norm in training mode needs more than one value per channel")
        mu = T.mean(x, axes, keepdims=True)
        xc = x - mu
        var = T.mean(xc * xc, axes, keepdims=True)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.data.reshape(-1)
        running_var *= 1.0 - momentum
        running_var += momentum * var.data.reshape(-1) * count / (count - 1)
        xhat = xc / T.sqrt(var + eps)
    else:
        xhat = (x - running_mean.reshape(bshape)) / np.sqrt(running_var.reshape(bshape) + eps)
    return xhat * T.reshape(gamma, bshape) + T.reshape(beta, bshape)


def group_norm(x: Tensor, n_groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample standardization over each channel group (and all spatial cells)."""
    B, C = x.shape[:2]
    if C % n_groups:
        raise ValueError(f"{C} channels not divisible into {n_groups} groups")
    grouped = T.reshape(x, (B, n_groups, -1))
    mu = T.mean(grouped, 2, keepdims=True)
    xc = grouped - mu
    var = T.mean(xc * xc, 2, keepdims=True)
    xhat = T.reshape(xc / T.sqrt(var + eps), x.shape)
    bshape = [1] * x.ndim
    bshape[1] = C
    return xhat * T.reshape(gamma, bshape) + T.reshape(beta, bshape)


@dataclass
class GRUWeights:
    """One direction. Gate order along the last axis is (reset, update, candidate)."""
    w_input: Tensor    # [feat, 3H]
    w_hidden: Tensor   # [H, 3H]
    b_input: Tensor    # [3H]
    b_hidden: Tensor   # [3H]


def gru_direction(x: Tensor, w: GRUWeights, reverse: bool = False) -> Tensor:
    """Run one GRU direction over ``x`` [batch, time, feat] from a zero state.

    The reset gate scales the hidden state before the candidate projection:
    ``n = tanh(x W_in + b_in + (r * h) W_hn + b_hn)``.
    """
    B, steps, _ = x.shape
    H = w.w_hidden.shape[0]
    proj = x @ w.w_input + w.b_input  # [B, time, 3H]
    w_rz = w.w_hidden[:, : 2 * H]
    w_n = w.w_hidden[:, 2 * H:]
    b_rz = w.b_hidden[: 2 * H]
    b_n = w.b_hidden[2 * H:]
    h = Tensor(np.zeros((B, H)))
    outputs: list[Tensor] = [None] * steps  # type: ignore[list-item]
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        p = proj[:, t, :]
        rz = T.sigmoid(p[:, : 2 * H] + h @ w_rz + b_rz)
        r, z = rz[:, :H], rz[:, H:]
        n = T.tanh(p[:, 2 * H:] + (r * h) @ w_n + b_n)
        h = (1.0 - z) * n + z * h
        outputs[t] = h
    return T.stack(outputs, axis=1)


def bigru(x: Tensor, forward: GRUWeights, backward: GRUWeights) -> Tensor:
    """Bidirectional GRU; per-frame outputs are [forward, backward] concatenated."""
    return T.concat([gru_direction(x, forward), gru_direction(x, backward, reverse=True)], axis=2)


@dataclass
class AttentionWeights:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor


def multi_head_self_attention(x: Tensor, w: AttentionWeights, n_heads: int,
                              return_weights: bool = False):
    """Scaled dot-product self-attention with queries, keys and values all from ``x``.

    No positional encoding is added, so the block is permutation-equivariant
    over frames.
    """
    B, steps, d_model = x.shape
    if d_model % n_heads:
        raise ValueError(f"d_model={d_model} not divisible by n_heads={n_heads}")
    d_head = d_model // n_heads

    def heads(t: Tensor) -> Tensor:
        return T.transpose(T.reshape(t, (B, steps, n_heads, d_head)), (0, 2, 1, 3))

    q = heads(x @ w.wq + w.bq)
    k = heads(x @ w.wk + w.bk)
    v = heads(x @ w.wv + w.bv)
    scores = (q @ T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(d_head))
    attn = T.softmax(scores, axis=-1)
    ctx = T.reshape(T.transpose(attn @ v, (0, 2, 1, 3)), (B, steps, d_model))
    out = ctx @ w.wo + w.bo
    return (out, attn) if return_weights else out


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = x @ weight
    return out if bias is None else out + bias


def frame_classifier(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return T.sigmoid(linear(x, weight, bias))


def attention_pool(p: Tensor, z: Tensor) -> Tensor:
    """Pool frame probabilities ``p`` [batch, time, classes] into clip probabilities.

    Each class uses its own softmax-over-time of the logits ``z``, so the
    result is a convex combination of that class's frame probabilities.
    """
    if p.shape[1] == 0:
        raise ValueError("attention_pool over zero frames")
    e = T.exp(z - np.max(z.data, axis=1, keepdims=True))
    # normalise after summing so equal frames pool to their common value
    return T.tsum(p * e, axis=1) / T.tsum(e, axis=1)


def bce_loss(y_hat: Tensor, y, eps: float = BCE_EPS) -> Tensor:
    y = T.as_tensor(y)
    if y_hat.shape != y.shape:
        raise ValueError(f"shape mismatch {y_hat.shape} vs {y.shape}")
    p = T.clip(y_hat, eps, 1.0 - eps)
    ll = y * T.log(p) + (1.0 - y) * T.log(1.0 - p)
    return -T.mean(ll)
