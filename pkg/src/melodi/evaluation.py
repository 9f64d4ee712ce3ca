"""Perplexity, memory-footprint accounting and a long-range recall probe."""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from .config import ConfigError, ModelConfig, _format, parse_fields
from .data import PAD, Segment, collate
from .model import Model
from .nn import NO_DROPOUT
from .tensor import Parameter, backward, cross_entropy, get_default_dtype, no_grad, set_default_dtype, zero_grad

# -- perplexity ----------------------------------------------------------------


def _segment_nll(model: Model, segs: Sequence[Segment], state=None, reset=True):
    batch = collate(segs, model.config.window_len)
    logits, state = model.forward_segment(batch.token_ids, reset=reset, state=state)
    n = batch.n_targets
    if n == 0:
        return 0.0, 0, state
    return float(cross_entropy(logits, batch.targets, batch.target_mask).data) * n, n, state


def perplexity_segments(model: Model, segments: Sequence[Segment], batch_size: int = 8) -> float:
    """exp(mean NLL) with every segment starting from a fresh state."""
    total, count = 0.0, 0
    with no_grad():
        for i in range(0, len(segments), batch_size):
            nll, n, _ = _segment_nll(model, segments[i:i + batch_size])
            total += nll
            count += n
    if count == 0:
        raise ValueError("perplexity: no evaluation tokens")
    return math.exp(total / count)


def perplexity(model: Model, eval_segments: Sequence[Segment], carry_state: bool = False,
               batch_size: int = 8) -> float:
    """Token-level perplexity over all unmasked targets.

    With ``carry_state`` the memory state flows from each segment into the
    next segment of the same document (segments are taken in document order).
    """
    if not eval_segments:
        raise ValueError("perplexity: empty evaluation corpus")
    if not carry_state:
        return perplexity_segments(model, eval_segments, batch_size)
    by_doc: dict[int, list[Segment]] = defaultdict(list)
    for s in eval_segments:
        by_doc[s.doc_id].append(s)
    total, count = 0.0, 0
    with no_grad():
        for segs in by_doc.values():
            state = None
            for s in segs:
                nll, n, state = _segment_nll(model, [s], state=state, reset=state is None)
                total += nll
                count += n
    if count == 0:
        raise ValueError("perplexity: no evaluation tokens")
    return math.exp(total / count)


# -- memory accounting -----------------------------------------------------------


@dataclass(frozen=True)
class MemoryReport:
    policy: str
    layers: int
    short_layers: int
    long_layers: int
    S: int
    L: int
    W: int
    q_max: int
    dim: int
    short_floats: int
    long_floats: int

    @property
    def total_floats(self) -> int:
        return self.short_floats + self.long_floats

    def row(self) -> dict:
        d = asdict(self)
        return {"policy": d.pop("policy"), "All": self.total_floats, "Short": self.short_floats,
                "Long": self.long_floats, **{k: v for k, v in d.items()
                                             if k not in ("short_floats", "long_floats")}}


REPORT_COLUMNS = ("name", "policy", "All", "Short", "Long", "layers", "short_layers",
                  "long_layers", "S", "L", "W", "q_max", "dim")


def memory_footprint(config: ModelConfig) -> MemoryReport:
    """Exact float counts of the cross-window state a policy keeps.

    Short-term memory stores tokens (S x dim per enabled layer); long-term
    memory stores key-value pairs (2 floats per channel). Summary tokens live
    inside a window only and are not counted.
    """
    c = config
    N, W, S, L, Q, d = c.n_layers, c.window_len, c.short_tokens, c.long_tokens, c.q_max, c.dim
    n_long = len(c.long_term_layer_positions)
    if c.memory_policy == "melodi":
        n_short = len(c.short_layers) if S else 0
        short = S * d * n_short
        long_ = L * 2 * d * Q * n_long
    elif c.memory_policy == "xl":
        n_short, n_long = N, 0
        short, long_ = W * 2 * d * N, 0
    elif c.memory_policy == "memorizing":
        n_short, n_long = N, 1
        short, long_ = W * 2 * d * N, W * 2 * d * Q
    else:
        n_short, n_long, short, long_ = 0, 0, 0, 0
    return MemoryReport(c.memory_policy, N, n_short, n_long, S, L, W, Q, d, short, long_)


def reports_csv(named: Sequence[tuple[str, MemoryReport]]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for name, rep in named:
        w.writerow({"name": name, **rep.row()})
    return buf.getvalue()


def mixer_parameter_formula(config: ModelConfig) -> int:
    """N_short * 2(W+S)S + N_long * ((W+U)L + 2(W+S)S), branching on, no copying."""
    c = config
    if c.memory_policy != "melodi" or not c.short_tokens:
        return 0
    W, S, L = c.window_len, c.short_tokens, c.long_tokens
    short = set(c.short_layers)
    long_ = set(c.long_term_layer_positions)
    per_short = 2 * (W + S) * S if c.branching else 0
    total = per_short * len(short)
    if not c.copy_short_as_long:
        total += (W + S) * L * len(long_)
    return total


# -- recall probe ------------------------------------------------------------


@dataclass
class ProbeConfig:
    distances: list[int] = field(default_factory=lambda: [0, 1, 4, 16])
    arms: list[str] = field(default_factory=lambda: ["none", "st", "st+lt"])
    window_len: int = 8
    short_tokens: int = 4
    long_tokens: int = 2
    q_max: int = 16
    n_layers: int = 3
    long_layer: int = 1
    dim: int = 32
    heads: int = 2
    ffn_hidden: int = 64
    facts_per_window: int = 3
    n_keys: int = 52
    n_values: int = 8
    steps: int = 2500
    batch_size: int = 16
    lr: float = 0.003
    warmup_steps: int = 100
    eval_samples: int = 256
    seed: int = 0
    dtype: str = "float32"

    # Token ids: PAD, then one fact token per (key, value), one query token
    # per key, one answer token per value.
    @property
    def query0(self) -> int:
        return 1 + self.n_keys * self.n_values

    @property
    def answer0(self) -> int:
        return self.query0 + self.n_keys

    @property
    def vocab_size(self) -> int:
        return self.answer0 + self.n_values

    def problems(self) -> list[str]:
        p = []
        if self.facts_per_window < 1 or self.window_len < self.facts_per_window + 2:
            p.append("window_len must hold facts_per_window facts plus a query and PAD")
        if not self.distances or min(self.distances) < 0:
            p.append("distances must be >= 0")
        elif self.n_keys < self.facts_per_window * (max(self.distances) + 1):
            p.append("n_keys too small for unique keys over the longest distance")
        if self.n_values < 2:
            p.append("n_values must be >= 2")
        for a in self.arms:
            if a not in ("none", "st", "st+lt"):
                p.append(f"unknown arm {a!r}")
        if self.q_max < 1:
            p.append("q_max must be >= 1")
        return p

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "ProbeConfig":
        kw = parse_fields(cls, text)
        for k in ("arms",):
            if k in kw and isinstance(kw[k], str):
                kw[k] = [a.strip() for a in kw[k].split(",") if a.strip()]
        cfg = cls(**kw)
        if cfg.problems():
            raise ConfigError(cfg.problems())
        return cfg


def probe_model_config(cfg: ProbeConfig, arm: str) -> ModelConfig:
    policy = "none" if arm == "none" else "melodi"
    return ModelConfig(
        n_layers=cfg.n_layers, long_term_layer_positions=[cfg.long_layer] if arm == "st+lt" else [],
        dim=cfg.dim, heads=cfg.heads, ffn_hidden=cfg.ffn_hidden, window_len=cfg.window_len,
        short_tokens=cfg.short_tokens, long_tokens=cfg.long_tokens, q_max=cfg.q_max,
        vocab_size=cfg.vocab_size, memory_policy=policy, init_seed=cfg.seed).validate()


def probe_batch(cfg: ProbeConfig, n_windows: int, batch: int, rng: np.random.Generator):
    """Token ids [B, n_windows, W], targets and the query mask.

    Every window opens with ``facts_per_window`` fact tokens, each naming one
    (key, value) pair, and ends with a query token for a key planted in
    window 0 followed by PAD. The target at the query is the answer token of
    that key's value. Keys are unique within a sequence, so the query in
    window d can only be answered by remembering window 0 across d windows of
    distractor facts. One token per fact makes lookup a single content match.
    """
    W, F = cfg.window_len, cfg.facts_per_window
    if cfg.n_keys < F * n_windows:
        raise ValueError(f"n_keys {cfg.n_keys} < {F * n_windows} distinct keys needed")
    keys = np.argsort(rng.random((batch, cfg.n_keys)), axis=1)[:, :F * n_windows]
    vals = rng.integers(0, cfg.n_values, size=(batch, F * n_windows))
    toks = np.full((batch, n_windows, W), PAD, dtype=np.int64)
    toks[:, :, :F] = (1 + keys * cfg.n_values + vals).reshape(batch, n_windows, F)
    pick = rng.integers(0, F, size=(batch, n_windows))
    toks[:, :, W - 2] = cfg.query0 + np.take_along_axis(keys[:, :F], pick, axis=1)
    targets = np.zeros_like(toks)
    targets[:, :, W - 2] = cfg.answer0 + np.take_along_axis(vals[:, :F], pick, axis=1)
    mask = np.zeros(toks.shape, dtype=bool)
    mask[:, :, W - 2] = True
    return toks, targets, mask


def train_probe_arm(cfg: ProbeConfig, arm: str, log=None) -> Model:
    from .training import Adam, TrainConfig, clip_grad_norm, lr_schedule

    model = Model(probe_model_config(cfg, arm))
    opt = Adam(model.parameters(), 0.9, 0.98)
    sched = TrainConfig(steps=cfg.steps, warmup_steps=min(cfg.warmup_steps, cfg.steps),
                        max_lr=cfg.lr, min_lr=cfg.lr / 10)
    rng = np.random.default_rng([cfg.seed, 7])
    n_w = max(cfg.distances) + 1
    params = model.parameters()
    for step in range(cfg.steps):
        toks, tgt, mask = probe_batch(cfg, n_w, cfg.batch_size, rng)
        zero_grad(params)
        logits, _ = model.forward_segment(toks, reset=True)
        value = cross_entropy(logits, tgt, mask)
        backward(value)
        clip_grad_norm(params, 1.0)
        opt.step(lr_schedule(step, sched))
        if log and (step + 1) % 100 == 0:
            log(f"{arm} step {step + 1} loss {float(value.data):.4f}")
    return model


def probe_accuracy(model: Model, cfg: ProbeConfig) -> dict[int, float]:
    """Held-out recall accuracy of the query in window d, for each probed d."""
    rng = np.random.default_rng([cfg.seed, 1000])
    toks, tgt, mask = probe_batch(cfg, max(cfg.distances) + 1, cfg.eval_samples, rng)
    with no_grad():
        logits, _ = model.forward_segment(toks, reset=True, drop=NO_DROPOUT)
    hit = logits.data.argmax(-1) == tgt
    return {d: float(hit[:, d][mask[:, d]].mean()) for d in cfg.distances}


def recall_probe(cfg: ProbeConfig, log=None) -> dict[str, dict[int, float]]:
    """Train one tiny model per arm; accuracy of the recalled value per distance."""
    prev = get_default_dtype()
    set_default_dtype(cfg.dtype)
    try:
        out = {}
        for arm in cfg.arms:
            model = train_probe_arm(cfg, arm, log)
            out[arm] = probe_accuracy(model, cfg)
            if log:
                log(f"{arm}: " + ", ".join(f"d={d}: {a:.3f}" for d, a in out[arm].items()))
        return out
    finally:
        set_default_dtype(prev)
