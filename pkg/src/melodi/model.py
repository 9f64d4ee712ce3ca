"""Sandwich assembly, state threading and the baseline memory policies."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionParams, TokenLayout, attend_heads, build_mask, gated_merge, relative_bias
from .config import ModelConfig
from .long_term import KVBlock, LongTermLayer, LongTermMemory, gather_kv
from .nn import NO_DROPOUT, DropoutStream, FeedForward, LayerNorm, Module, normal
from .short_term import MixerMatrix, ShortTermLayer, init_summary
from .tensor import DimensionError, Tensor, concat, embedding, matmul


class BaselineLayer(Module):
    """Transformer-XL layer; with ``memorizing`` it also cross-attends to a
    FIFO of uncompressed per-window KV pairs through the same gate as the
    long-term layer."""

    def __init__(self, dim: int, heads: int, ffn_hidden: int, window: int,
                 rng: np.random.Generator, memorizing: bool = False, max_offset: int | None = None):
        self.window = window
        self.memorizing = memorizing
        self.ln_attn = LayerNorm(dim)
        self.attn = AttentionParams(dim, heads, max_offset or 2 * window, rng, gated=memorizing)
        self.ln_ffn = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_hidden, rng)

    def step(self, x_in: Tensor, cache: tuple[Tensor, Tensor] | None,
             memory: LongTermMemory | None = None, window_index: int = 0,
             drop: DropoutStream = NO_DROPOUT, path: str = ""):
        a = self.attn
        hq = self.ln_attn(x_in)
        k_cur, v_cur = a.keys(hq), a.values(hq)
        if cache is not None:
            k_all, v_all = concat([cache[0], k_cur], axis=-2), concat([cache[1], v_cur], axis=-2)
        else:
            k_all, v_all = k_cur, v_cur
        layout = TokenLayout(0 if cache is None else cache[0].shape[-2], x_in.shape[-2], 0)
        q = a.queries(hq)
        heads = attend_heads(q, a.split_heads(k_all), a.split_heads(v_all),
                             build_mask(layout), relative_bias(layout, a))
        if memory is not None and not memory.empty:
            mk, mv = gather_kv(memory)
            cross = attend_heads(q, a.split_heads(mk), a.split_heads(mv), None, None)
            heads = gated_merge(heads, cross, a.alpha_logits)
        h = x_in + drop(a.output(heads), path + ".attn")
        h = h + drop(self.ffn(self.ln_ffn(h)), path + ".ffn")
        new_cache = (k_cur.detach(), v_cur.detach())
        if memory is not None:
            memory.append(KVBlock(new_cache[0], new_cache[1], window_index))
        return h, new_cache, memory


def xl_policy_step(layer: BaselineLayer, layer_cache, x_in: Tensor, drop=NO_DROPOUT, path=""):
    """Attend over [previous window's KV; current window]; cache becomes the current KV."""
    x_out, cache, _ = layer.step(x_in, layer_cache, None, drop=drop, path=path)
    return x_out, cache


def mt_policy_step(layer: BaselineLayer, mt_memory: LongTermMemory, layer_cache, x_in: Tensor,
                   window_index: int, drop=NO_DROPOUT, path=""):
    """XL self path gated with dense cross-attention to every stored window's KV."""
    x_out, cache, mem = layer.step(x_in, layer_cache, mt_memory, window_index, drop, path)
    return x_out, cache, mem


@dataclass
class ShortTermState:
    z: dict[int, Tensor] = field(default_factory=dict)
    empty: dict[int, bool] = field(default_factory=dict)


@dataclass
class ModelState:
    short: ShortTermState
    long: dict[int, LongTermMemory]
    xl_cache: dict[int, tuple[Tensor, Tensor] | None]
    mt_memory: LongTermMemory | None
    window_counter: int = 0
    batch: int = 1

    def detach(self) -> "ModelState":
        """Cut every autodiff edge back into earlier windows."""
        for i, z in self.short.z.items():
            self.short.z[i] = z.detach()
        for mem in self.long.values():
            for b in mem.queue:
                b.keys, b.values = b.keys.detach(), b.values.detach()
        return self


class Model(Module):
    def __init__(self, config: ModelConfig):
        cfg = config.validate()
        self.config = cfg
        rng = np.random.default_rng(cfg.init_seed)
        max_off = cfg.rel_max_offset or None
        self.embed = normal(rng, (cfg.vocab_size, cfg.dim), cfg.dim ** -0.5)
        layers: list[Module] = []
        short = set(cfg.short_layers)
        for i in range(cfg.n_layers):
            if cfg.memory_policy == "melodi" and i in cfg.long_term_layer_positions:
                layers.append(LongTermLayer(cfg.dim, cfg.heads, cfg.ffn_hidden, cfg.window_len,
                                            cfg.short_tokens, cfg.long_tokens, rng,
                                            memory=i in short, branching=cfg.branching,
                                            copy_short_as_long=cfg.copy_short_as_long,
                                            detach_kv=cfg.detach_long_kv, max_offset=max_off))
            elif cfg.memory_policy == "melodi":
                layers.append(ShortTermLayer(cfg.dim, cfg.heads, cfg.ffn_hidden, cfg.window_len,
                                             cfg.short_tokens, rng, memory=i in short,
                                             branching=cfg.branching, max_offset=max_off))
            elif cfg.memory_policy == "none":
                layers.append(ShortTermLayer(cfg.dim, cfg.heads, cfg.ffn_hidden, cfg.window_len,
                                             0, rng, memory=False, max_offset=max_off))
            else:
                mem = cfg.memory_policy == "memorizing" and i == cfg.long_term_layer_positions[0]
                layers.append(BaselineLayer(cfg.dim, cfg.heads, cfg.ffn_hidden, cfg.window_len,
                                            rng, memorizing=mem, max_offset=max_off))
        self.layers = layers
        self.final_norm = LayerNorm(cfg.dim)
        if cfg.summary_tokens:
            # Separate stream so the layer weights match a summary-free build.
            self.summary = normal(np.random.default_rng([cfg.init_seed, 1]),
                                  (cfg.summary_tokens, cfg.dim), 0.02)
        self.assign_names()

    # -- bookkeeping -----------------------------------------------------

    @property
    def n_long_layers(self) -> int:
        return sum(isinstance(l, LongTermLayer) for l in self.layers)

    @property
    def n_short_layers(self) -> int:
        """Layers whose short-term memory is active (long-term layer included)."""
        return sum(isinstance(l, ShortTermLayer) and l.memory for l in self.layers)

    def mixer_parameters(self) -> int:
        total = 0
        for l in self.layers:
            for m in vars(l).values():
                if isinstance(m, MixerMatrix):
                    total += m.num_parameters()
        return total

    def initial_state(self, batch: int) -> ModelState:
        cfg = self.config
        short = ShortTermState()
        long: dict[int, LongTermMemory] = {}
        xl: dict[int, tuple | None] = {}
        mt = None
        dt = self.embed.dtype
        for i, layer in enumerate(self.layers):
            if isinstance(layer, ShortTermLayer) and layer.memory:
                short.z[i] = Tensor(np.zeros((batch, cfg.short_tokens, cfg.dim), dtype=dt))
                short.empty[i] = True
            if isinstance(layer, LongTermLayer):
                long[i] = layer.new_memory(cfg.q_max)
            if isinstance(layer, BaselineLayer):
                xl[i] = None
                if layer.memorizing:
                    mt = LongTermMemory(cfg.q_max, cfg.window_len, cfg.dim)
        return ModelState(short, long, xl, mt, 0, batch)

    # -- forward ---------------------------------------------------------

    def forward_window(self, state: ModelState, tokens, drop: DropoutStream = NO_DROPOUT
                       ) -> tuple[Tensor, ModelState]:
        """Logits [B, W, vocab] for one window of token ids [B, W]; updates ``state``."""
        cfg = self.config
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None]
        B, W = tokens.shape
        if W != cfg.window_len:
            raise DimensionError(f"window has {W} tokens, model expects {cfg.window_len}")
        if B != state.batch:
            raise DimensionError(f"state batch {state.batch} vs tokens batch {B}")
        k = state.window_counter
        tag = f"w{k}"
        x = drop(embedding(self.embed, tokens), tag + ".embed")
        u = init_summary(self.summary, B) if cfg.summary_tokens else x[:, W:W, :]
        for i, layer in enumerate(self.layers):
            path = f"{tag}.l{i}"
            if isinstance(layer, BaselineLayer):
                if layer.memorizing:
                    x, state.xl_cache[i], state.mt_memory = mt_policy_step(
                        layer, state.mt_memory, state.xl_cache[i], x, k, drop, path)
                else:
                    x, state.xl_cache[i] = xl_policy_step(layer, state.xl_cache[i], x, drop, path)
                continue
            z_prev = state.short.z.get(i)
            z_empty = state.short.empty.get(i, True)
            if isinstance(layer, LongTermLayer):
                z_next, x, u, state.long[i] = layer.long_term_step(
                    state.long[i], z_prev, x, u, z_empty, k, drop, path)
            else:
                z_next, x, u = layer.short_term_step(z_prev, x, u, z_empty, drop, path)
            if z_next is not None:
                state.short.z[i] = z_next
                state.short.empty[i] = False
        state.window_counter = k + 1
        logits = matmul(self.final_norm(x), self.embed.T)
        return logits, state

    def forward_segment(self, segment, reset: bool = True, state: ModelState | None = None,
                        drop: DropoutStream = NO_DROPOUT) -> tuple[Tensor, ModelState]:
        """Logits [B, n_windows, W, vocab] for token ids [B, n_windows, W].

        Short-term memory stays on the autodiff graph across all windows of
        the segment. With ``reset`` False the given state is carried in
        (detached from whatever produced it).
        """
        segment = np.asarray(segment)
        if segment.ndim == 2:
            segment = segment[None]
        B, n_windows, W = segment.shape
        if n_windows < 1:
            raise ValueError("segment needs at least one window")
        if reset or state is None:
            state = self.initial_state(B)
        else:
            state.detach()
        out = []
        for w in range(n_windows):
            logits, state = self.forward_window(state, segment[:, w], drop)
            out.append(logits.reshape(B, 1, W, logits.shape[-1]))
        return concat(out, axis=1), state


def build(config: ModelConfig) -> Model:
    return Model(config)
