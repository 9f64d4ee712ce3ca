"""Causal multi-head attention over a [memory prefix | context | summary] layout.

Positions on the concatenated axis: the memory prefix sits at -S..-1, context
tokens at 0..W-1 and summary tokens at W..W+U-1. Queries are always the
context and summary tokens; keys are the full concatenation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Module, const, normal
from .tensor import Tensor, DimensionError, embedding, matmul, softmax_rows


@dataclass(frozen=True)
class TokenLayout:
    prefix_len: int  # S: short-term memory tokens (or cached keys)
    ctx_len: int  # W
    summary_len: int  # U

    def __post_init__(self):
        if min(self.prefix_len, self.ctx_len, self.summary_len) < 0:
            raise ValueError(f"negative length in {self}")

    @property
    def n_queries(self) -> int:
        return self.ctx_len + self.summary_len

    @property
    def n_keys(self) -> int:
        return self.prefix_len + self.ctx_len + self.summary_len


def build_mask(layout: TokenLayout, prefix_empty: bool = False) -> np.ndarray:
    """Boolean [(W+U), (S+W+U)] mask, True where query row may attend.

    Every query sees the memory prefix (unless ``prefix_empty``). Context query
    i sees context keys <= i and no summary key. Summary query j sees all
    context keys and summary keys <= j.
    """
    S, W, U = layout.prefix_len, layout.ctx_len, layout.summary_len
    mask = np.zeros((W + U, S + W + U), dtype=bool)
    if not prefix_empty:
        mask[:, :S] = True
    # Context and summary together form one causal sequence after the prefix.
    mask[:, S:] = np.tril(np.ones((W + U, W + U), dtype=bool))
    return mask


def positions(layout: TokenLayout) -> tuple[np.ndarray, np.ndarray]:
    S, W, U = layout.prefix_len, layout.ctx_len, layout.summary_len
    keys = np.arange(-S, W + U)
    return keys[S:], keys


def relative_offsets(layout: TokenLayout, max_offset: int) -> np.ndarray:
    """Clipped key-minus-query offsets, shifted to index a bias table."""
    q_pos, k_pos = positions(layout)
    off = np.clip(k_pos[None, :] - q_pos[:, None], -max_offset, max_offset)
    return off + max_offset


class AttentionParams(Module):
    def __init__(self, dim: int, heads: int, max_offset: int, rng: np.random.Generator,
                 gated: bool = False):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim, self.heads, self.head_dim = dim, heads, dim // heads
        self.max_offset = max_offset
        std = dim ** -0.5
        self.q_proj = normal(rng, (dim, dim), std)
        self.k_proj = normal(rng, (dim, dim), std)
        self.v_proj = normal(rng, (dim, dim), std)
        self.out_proj = normal(rng, (dim, dim), std)
        self.rel_bias = const((2 * max_offset + 1, heads), 0.0)
        if gated:
            self.alpha_logits = const((heads,), 0.0)

    @property
    def gated(self) -> bool:
        return hasattr(self, "alpha_logits")

    def split_heads(self, x: Tensor) -> Tensor:
        """[B, T, dim] -> [B, H, T, hd]"""
        B, T, _ = x.shape
        return x.reshape(B, T, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def merge_heads(self, x: Tensor) -> Tensor:
        B, H, T, hd = x.shape
        return x.transpose(0, 2, 1, 3).reshape(B, T, H * hd)

    def queries(self, x: Tensor) -> Tensor:
        return self.split_heads(matmul(x, self.q_proj))

    def keys(self, x: Tensor) -> Tensor:
        return matmul(x, self.k_proj)

    def values(self, x: Tensor) -> Tensor:
        return matmul(x, self.v_proj)

    def output(self, heads_out: Tensor) -> Tensor:
        return matmul(self.merge_heads(heads_out), self.out_proj)


def relative_bias(layout: TokenLayout, params: AttentionParams) -> Tensor:
    """bias[h, i, j] = table[h, clip(pos_j - pos_i)] as a [H, W+U, S+W+U] tensor."""
    idx = relative_offsets(layout, params.max_offset)
    return embedding(params.rel_bias, idx).transpose(2, 0, 1)


def attend_heads(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None,
                 bias: Tensor | None) -> Tensor:
    """Per-head scaled dot-product attention; q [B,H,Tq,hd], k/v [B,H,Tk,hd]."""
    if k.shape != v.shape:
        raise DimensionError(f"keys {k.shape} and values {v.shape} differ")
    scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(q.shape[-1]))
    if bias is not None:
        if bias.shape != scores.shape[-3:]:
            raise DimensionError(f"bias {bias.shape} vs scores {scores.shape}")
        scores = scores + bias
    if mask is not None and mask.shape != scores.shape[-2:]:
        raise DimensionError(f"mask {mask.shape} vs scores {scores.shape}")
    return matmul(softmax_rows(scores, mask), v)


def attend(queries: Tensor, keys: Tensor, values: Tensor, mask: np.ndarray | None,
           bias: Tensor | None, params: AttentionParams) -> Tensor:
    """Project, attend per head, concatenate heads and out-project.

    Inputs are token tensors [B, T, dim]; ``keys`` and ``values`` are the raw
    tokens the key/value projections are applied to.
    """
    if keys.shape[-2] != values.shape[-2]:
        raise DimensionError(f"{keys.shape[-2]} keys but {values.shape[-2]} values")
    q = params.queries(queries)
    k = params.split_heads(params.keys(keys))
    v = params.split_heads(params.values(values))
    return params.output(attend_heads(q, k, v, mask, bias))


def gated_merge(self_heads: Tensor, cross_heads: Tensor, alpha_logits: Tensor) -> Tensor:
    """sigmoid(a_h) * cross + (1 - sigmoid(a_h)) * self, per head (axis -3)."""
    if self_heads.shape != cross_heads.shape:
        raise DimensionError(f"self {self_heads.shape} vs cross {cross_heads.shape}")
    H = self_heads.shape[-3]
    if alpha_logits.shape != (H,):
        raise DimensionError(f"alpha_logits {alpha_logits.shape} for {H} heads")
    s, c = self_heads.data, cross_heads.data
    a = (1.0 / (1.0 + np.exp(-alpha_logits.data))).reshape(H, 1, 1).astype(s.dtype)
    out = a * c + (1.0 - a) * s
    sum_axes = tuple(i for i in range(s.ndim) if i != s.ndim - 3)

    def bw(g):
        g_alpha = (g * (c - s)).sum(axis=sum_axes) * (a * (1.0 - a)).reshape(H)
        return g * (1.0 - a), g * a, g_alpha

    return Tensor.from_op(out, (self_heads, cross_heads, alpha_logits), bw)
