"""Transformer building blocks composed from the autodiff primitives."""

from __future__ import annotations

import math

import numpy as np

from ..errors import ShapeError
from .tensor import (
    Tensor,
    add,
    gelu,
    index_rows,
    layer_norm,
    matmul,
    mul,
    reshape,
    scale,
    softmax,
    transpose,
    tsum,
)

_MASK_VALUE = -1e9


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over all elements of the squared difference; scalar output."""
    pred_t = pred if isinstance(pred, Tensor) else Tensor(pred)
    target_t = target if isinstance(target, Tensor) else Tensor(target)
    if pred_t.shape != target_t.shape:
        raise ShapeError(f"mse: shapes differ: {pred_t.shape} vs {target_t.shape}")
    diff = pred_t - target_t
    return scale(tsum(mul(diff, diff)), 1.0 / pred_t.size)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    # (T, D) -> (H, T, D/H)
    t, d = x.shape
    if d % n_heads != 0:
        raise ShapeError(f"model width {d} not divisible by {n_heads} heads")
    return transpose(reshape(x, (t, n_heads, d // n_heads)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    # (H, T, D/H) -> (T, D)
    h, t, dh = x.shape
    return reshape(transpose(x, (1, 0, 2)), (t, h * dh))


def causal_mask(n: int, dtype=np.float32) -> np.ndarray:
    """Additive (n, n) mask: row i may attend columns <= i."""
    mask = np.zeros((n, n), dtype=dtype)
    mask[np.triu_indices(n, k=1)] = _MASK_VALUE
    return mask


def band_mask(n_queries: int, n_keys: int, first_visible: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Additive (Q, T) mask: query i may attend columns < first_visible[i]."""
    cols = np.arange(n_keys)
    allowed = cols[None, :] < np.asarray(first_visible)[:, None]
    return np.where(allowed, dtype(0.0), dtype(_MASK_VALUE))


def multi_head_attention(
    q_in: Tensor,
    kv_in: Tensor,
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
    n_heads: int,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Attention from a (Q, D) query sequence over a (T, D) key/value sequence.

    ``mask`` is additive, shape (Q, T); masked logits sit at -1e9 so their
    softmax weight underflows to exactly zero.
    """
    q = _split_heads(linear(q_in, wq, bq), n_heads)  # (H, Q, Dh)
    k = _split_heads(linear(kv_in, wk, bk), n_heads)  # (H, T, Dh)
    v = _split_heads(linear(kv_in, wv, bv), n_heads)
    dh = q.shape[-1]
    scores = scale(matmul(q, transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))  # (H, Q, T)
    if mask is not None:
        scores = add(scores, mask)
    attn = softmax(scores)
    return linear(_merge_heads(matmul(attn, v)), wo, bo)


def causal_self_attention(x: Tensor, weights: dict[str, Tensor], n_heads: int) -> Tensor:
    """Self-attention where position j never attends past itself."""
    mask = causal_mask(x.shape[0], dtype=x.dtype.type)
    return multi_head_attention(
        x, x,
        weights["wq"], weights["bq"], weights["wk"], weights["bk"],
        weights["wv"], weights["bv"], weights["wo"], weights["bo"],
        n_heads, mask,
    )


def cross_attention(
    q_in: Tensor, kv_in: Tensor, weights: dict[str, Tensor], n_heads: int, mask: np.ndarray | None = None
) -> Tensor:
    return multi_head_attention(
        q_in, kv_in,
        weights["wq"], weights["bq"], weights["wk"], weights["bk"],
        weights["wv"], weights["bv"], weights["wo"], weights["bo"],
        n_heads, mask,
    )


def affine_layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    return add(mul(layer_norm(x), gain), bias)


def modulate(x: Tensor, shift: Tensor, scale_t: Tensor) -> Tensor:
    """Adaptive layer-norm modulation: x * (1 + scale) + shift."""
    return add(mul(x, add(scale_t, np.asarray(1.0, dtype=x.dtype))), shift)


def chunk_rows(x: Tensor, n_chunks: int) -> list[Tensor]:
    """Split a (P, n_chunks*D) tensor into n_chunks tensors of shape (P, D)."""
    p, total = x.shape
    if total % n_chunks != 0:
        raise ShapeError(f"cannot chunk width {total} into {n_chunks}")
    d = total // n_chunks
    stacked = transpose(reshape(x, (p, n_chunks, d)), (1, 0, 2))  # (n_chunks, P, D)
    return [reshape(index_rows(stacked, np.array([i])), (p, d)) for i in range(n_chunks)]


def sinusoidal_features(steps: np.ndarray, dim: int, dtype=np.float32) -> np.ndarray:
    """Classic fixed sin/cos timestep features, shape (len(steps), dim)."""
    if dim % 2 != 0:
        raise ShapeError("sinusoidal feature dimension must be even")
    steps = np.asarray(steps, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-math.log(10_000.0) * np.arange(half, dtype=np.float64) / half)
    angles = steps * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1).astype(dtype)
