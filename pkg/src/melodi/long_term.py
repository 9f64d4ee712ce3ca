"""Long-term layer and its FIFO store of compressed key-value blocks."""

from __future__ import annotations

import copy
import struct
from collections import deque
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

from .nn import NO_DROPOUT, DropoutStream
from .short_term import MixerMatrix, ShortTermLayer, token_mix
from .tensor import DimensionError, Tensor, concat


@dataclass
class KVBlock:
    """Keys and values [B, L, dim] for one window's long-term tokens."""

    keys: Tensor
    values: Tensor
    window_index: int

    def __post_init__(self):
        if self.keys.shape != self.values.shape:
            raise DimensionError(f"keys {self.keys.shape} vs values {self.values.shape}")

    @property
    def n_pairs(self) -> int:
        return self.keys.shape[-2]


class LongTermMemory:
    """FIFO of KV blocks holding at most ``q_max`` windows, oldest first."""

    def __init__(self, q_max: int, n_tokens: int, dim: int):
        if q_max < 1:
            raise ValueError("q_max must be >= 1")
        self.q_max = q_max
        self.n_tokens = n_tokens
        self.dim = dim
        self.queue: deque[KVBlock] = deque()

    def __len__(self) -> int:
        return len(self.queue)

    @property
    def empty(self) -> bool:
        return not self.queue

    @property
    def n_pairs(self) -> int:
        return sum(b.n_pairs for b in self.queue)

    @property
    def capacity_floats(self) -> int:
        return self.n_tokens * 2 * self.dim * self.q_max

    def append(self, block: KVBlock) -> "LongTermMemory":
        if block.keys.shape[-2:] != (self.n_tokens, self.dim):
            raise DimensionError(
                f"block {block.keys.shape} does not match memory geometry ({self.n_tokens}, {self.dim})")
        if self.queue and block.window_index <= self.queue[-1].window_index:
            raise ValueError("window_index must increase")
        self.queue.append(block)
        while len(self.queue) > self.q_max:
            self.queue.popleft()
        return self

    def snapshot(self) -> "LongTermMemory":
        return copy.deepcopy(self)

    def clear(self) -> None:
        self.queue.clear()

    # Snapshot format: little-endian header (magic, L, q_max, dim, count, batch)
    # then per block: int64 window_index, keys, values as float32.
    _MAGIC = b"MLTM"

    def write(self, fh: BinaryIO) -> None:
        batch = self.queue[0].keys.shape[0] if self.queue and self.queue[0].keys.ndim == 3 else 1
        fh.write(self._MAGIC)
        fh.write(struct.pack("<5I", self.n_tokens, self.q_max, self.dim, len(self.queue), batch))
        for b in self.queue:
            fh.write(struct.pack("<q", b.window_index))
            for t in (b.keys, b.values):
                fh.write(np.ascontiguousarray(t.data, dtype="<f4").reshape(batch, -1).tobytes())

    @classmethod
    def read(cls, fh: BinaryIO, dtype=np.float64) -> "LongTermMemory":
        if fh.read(4) != cls._MAGIC:
            raise ValueError("not a long-term memory snapshot")
        n_tokens, q_max, dim, count, batch = struct.unpack("<5I", fh.read(20))
        mem = cls(q_max, n_tokens, dim)
        nbytes = 4 * batch * n_tokens * dim
        for _ in range(count):
            (idx,) = struct.unpack("<q", fh.read(8))
            k, v = (np.frombuffer(fh.read(nbytes), dtype="<f4").reshape(batch, n_tokens, dim)
                    .astype(dtype) for _ in range(2))
            mem.queue.append(KVBlock(Tensor(k), Tensor(v), idx))
        return mem


def gather_kv(memory: LongTermMemory) -> tuple[Tensor, Tensor]:
    """All stored keys and values concatenated in queue order."""
    if memory.empty:
        z = np.zeros((0, memory.dim))
        return Tensor(z), Tensor(z.copy())
    blocks = list(memory.queue)
    return (concat([b.keys for b in blocks], axis=-2),
            concat([b.values for b in blocks], axis=-2))


def compress_to_long_tokens(x_out: Tensor, u_hat: Tensor, mix_long: MixerMatrix) -> Tensor:
    return token_mix(x_out, u_hat, mix_long)


class LongTermLayer(ShortTermLayer):
    """A short-term layer plus gated cross-attention to a compressed KV store."""

    def __init__(self, dim: int, heads: int, ffn_hidden: int, window: int, short_tokens: int,
                 long_tokens: int, rng: np.random.Generator, memory: bool = True,
                 branching: bool = True, copy_short_as_long: bool = False,
                 detach_kv: bool = False, max_offset: int | None = None):
        super().__init__(dim, heads, ffn_hidden, window, short_tokens, rng, memory=memory,
                         branching=branching, max_offset=max_offset, gated=True)
        if copy_short_as_long and long_tokens != short_tokens:
            raise ValueError("copy_short_as_long requires L == S")
        self.long_tokens = long_tokens
        self.copy_short_as_long = copy_short_as_long
        self.detach_kv = detach_kv
        if not copy_short_as_long:
            self.mix_long = MixerMatrix(window + short_tokens, long_tokens, rng, copy_from=window)

    def new_memory(self, q_max: int) -> LongTermMemory:
        return LongTermMemory(q_max, self.long_tokens, self.attn.dim)

    def long_term_step(self, memory: LongTermMemory, z_prev: Tensor | None, x_in: Tensor,
                       u_in: Tensor, z_empty: bool = False, window_index: int | None = None,
                       drop: DropoutStream = NO_DROPOUT, path: str = ""
                       ) -> tuple[Tensor | None, Tensor, Tensor, LongTermMemory]:
        cross_kv = None if memory.empty else gather_kv(memory)
        x_out, u_hat = self.transformer_block(x_in, u_in, z_prev, z_empty, drop, path,
                                              cross_kv=cross_kv)
        u_out, z_next = self.branch(x_out, u_hat)
        if self.copy_short_as_long:
            t = z_next
        else:
            t = compress_to_long_tokens(x_out, u_hat, self.mix_long)
        # Stored tokens go through the same norm and projections as attention inputs.
        tn = self.ln_attn(t)
        k, v = self.attn.keys(tn), self.attn.values(tn)
        if self.detach_kv:
            k, v = k.detach(), v.detach()
        if window_index is None:
            window_index = memory.queue[-1].window_index + 1 if memory.queue else 0
        memory.append(KVBlock(k, v, window_index))
        return (z_next if self.memory else None), x_out, u_out, memory
