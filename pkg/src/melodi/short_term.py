"""Short-term layer: recurrent compression of a window into memory tokens.

One layer maps (z_prev, x_in, u_in) to (z_next, x_out, u_out). A pre-norm
transformer block runs over the queries [x_in; u_in] with keys
[z_prev; x_in; u_in]; two token mixers then split the block output into the
summary for the next layer (mix_up) and the memory for the next window
(mix_right).
"""

from __future__ import annotations

import numpy as np

from .attention import (AttentionParams, TokenLayout, attend_heads, build_mask,
                        gated_merge, relative_bias)
from .nn import NO_DROPOUT, DropoutStream, FeedForward, LayerNorm, Module
from .tensor import DimensionError, Parameter, Tensor, concat, get_default_dtype, matmul


class MixerMatrix(Module):
    """A [(W+U) x out_len] matrix mixing tokens per channel."""

    def __init__(self, in_len: int, out_len: int, rng: np.random.Generator | None = None,
                 copy_from: int | None = None, std: float = 0.02):
        w = np.zeros((in_len, out_len))
        if rng is not None:
            w += rng.normal(0.0, std, size=w.shape)
        if copy_from is not None:
            # Route the trailing summary block onto the outputs: identity when
            # out_len equals the block length, contiguous averaging otherwise.
            n_src = in_len - copy_from
            for j in range(out_len):
                lo = j * n_src // out_len
                hi = max((j + 1) * n_src // out_len, lo + 1)
                w[copy_from + lo:copy_from + hi, j] += 1.0 / (hi - lo)
        self.weights = Parameter(w.astype(get_default_dtype()))

    @property
    def in_len(self) -> int:
        return self.weights.shape[0]

    @property
    def out_len(self) -> int:
        return self.weights.shape[1]

    def num_parameters(self) -> int:
        return self.weights.data.size


def token_mix(x_out: Tensor, u_hat: Tensor, mixer: MixerMatrix) -> Tensor:
    """mixer^T @ [x_out; u_hat] along the token axis; channels are untouched."""
    h = concat([x_out, u_hat], axis=-2) if u_hat.shape[-2] else x_out
    if h.shape[-2] != mixer.in_len:
        raise DimensionError(f"mixer expects {mixer.in_len} tokens, got {h.shape[-2]}")
    return matmul(mixer.weights.T, h)


def init_summary(embedding: Parameter, batch: int) -> Tensor:
    """The learned summary embedding, repeated for every batch row."""
    S, dim = embedding.shape
    return Tensor(np.zeros((batch, S, dim), dtype=embedding.dtype)) + embedding


class ShortTermLayer(Module):
    """One layer of the sandwich.

    ``memory`` disables the short-term memory (no attention to z and no
    mixers) for the layer-count ablation. ``branching`` False makes u_out and
    z_next both equal to the block's summary output.
    """

    def __init__(self, dim: int, heads: int, ffn_hidden: int, window: int, short_tokens: int,
                 rng: np.random.Generator, memory: bool = True, branching: bool = True,
                 max_offset: int | None = None, gated: bool = False):
        self.window = window
        self.short_tokens = short_tokens
        self.memory = memory and short_tokens > 0
        self.branching = branching
        if max_offset is None:
            max_offset = window + short_tokens
        self.ln_attn = LayerNorm(dim)
        self.attn = AttentionParams(dim, heads, max_offset, rng, gated=gated)
        self.ln_ffn = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_hidden, rng)
        if self.memory and branching:
            n_in = window + short_tokens
            self.mix_up = MixerMatrix(n_in, short_tokens, rng, copy_from=window)
            self.mix_right = MixerMatrix(n_in, short_tokens, rng, copy_from=window)

    def mixer_parameters(self) -> int:
        return sum(m.num_parameters() for m in vars(self).values() if isinstance(m, MixerMatrix))

    # -- block -----------------------------------------------------------

    def layout(self, x_in: Tensor, u_in: Tensor, z_prev: Tensor | None) -> TokenLayout:
        S = z_prev.shape[-2] if (self.memory and z_prev is not None) else 0
        return TokenLayout(S, x_in.shape[-2], u_in.shape[-2])

    def self_heads(self, hq: Tensor, z_norm: Tensor | None, layout: TokenLayout,
                   z_empty: bool) -> tuple[Tensor, Tensor]:
        """(per-head query projections, per-head self-attention output)."""
        kv = concat([z_norm, hq], axis=-2) if layout.prefix_len else hq
        a = self.attn
        q = a.queries(hq)
        k = a.split_heads(a.keys(kv))
        v = a.split_heads(a.values(kv))
        mask = build_mask(layout, prefix_empty=z_empty)
        return q, attend_heads(q, k, v, mask, relative_bias(layout, a))

    def transformer_block(self, x_in: Tensor, u_in: Tensor, z_prev: Tensor | None,
                          z_empty: bool = False, drop: DropoutStream = NO_DROPOUT,
                          path: str = "", cross_kv: tuple[Tensor, Tensor] | None = None
                          ) -> tuple[Tensor, Tensor]:
        """Returns (x_out, u_hat). z_prev is read-only context for attention.

        ``cross_kv`` holds already-projected memory keys and values [B, M, dim];
        when given, the queries also attend to them without mask or position
        bias and the two results are merged per head by the learned gate.
        """
        W = x_in.shape[-2]
        layout = self.layout(x_in, u_in, z_prev)
        h = concat([x_in, u_in], axis=-2) if layout.summary_len else x_in
        hq = self.ln_attn(h)
        z_norm = self.ln_attn(z_prev) if layout.prefix_len else None
        q, heads = self.self_heads(hq, z_norm, layout, z_empty)
        if cross_kv is not None:
            a = self.attn
            ck, cv = cross_kv
            cross = attend_heads(q, a.split_heads(ck), a.split_heads(cv), None, None)
            heads = gated_merge(heads, cross, a.alpha_logits)
        h = h + drop(self.attn.output(heads), path + ".attn")
        h = h + drop(self.ffn(self.ln_ffn(h)), path + ".ffn")
        if not layout.summary_len:
            return h, h[..., W:W, :]
        return h[..., :W, :], h[..., W:, :]

    def branch(self, x_out: Tensor, u_hat: Tensor) -> tuple[Tensor, Tensor]:
        """(u_out, z_next) from the block outputs."""
        if not self.memory or not self.branching:
            return u_hat, u_hat
        return token_mix(x_out, u_hat, self.mix_up), token_mix(x_out, u_hat, self.mix_right)

    def short_term_step(self, z_prev: Tensor | None, x_in: Tensor, u_in: Tensor,
                        z_empty: bool = False, drop: DropoutStream = NO_DROPOUT,
                        path: str = "") -> tuple[Tensor | None, Tensor, Tensor]:
        if self.memory and self.branching and u_in.shape[-2] != self.short_tokens:
            raise DimensionError(f"summary has {u_in.shape[-2]} tokens, memory {self.short_tokens}")
        x_out, u_hat = self.transformer_block(x_in, u_in, z_prev, z_empty, drop, path)
        u_out, z_next = self.branch(x_out, u_hat)
        return (z_next if self.memory else None), x_out, u_out
