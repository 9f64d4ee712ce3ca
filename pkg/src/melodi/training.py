"""Auto-regressive training loop: schedule, optimizers, checkpoints, metrics."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint
from .config import ConfigError, ModelConfig, _format, parse_fields
from .data import Segment, WindowBatch, batch_at
from .model import Model
from .nn import DropoutStream
from .tensor import Parameter, backward, cross_entropy, get_default_dtype, set_default_dtype, zero_grad

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "loss", "ppl", "lr", "tokens_per_sec")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 20000
    warmup_steps: int = 1000
    max_lr: float = 0.01
    min_lr: float = 0.001
    dropout: float = 0.05
    batch_size: int = 8
    seed: int = 0
    optimizer: str = "adam"
    grad_clip: float = 1.0
    weight_decay: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    eval_every: int = 0
    checkpoint_every: int = 0
    log_every: int = 1
    segment_len: int = 512
    dtype: str = "float32"
    corpus: str = ""
    eval_corpus: str = ""
    eval_fraction: float = 0.0
    vocab_path: str = ""
    out_dir: str = "runs/default"

    def problems(self) -> list[str]:
        p = []
        if self.steps < 1:
            p.append("steps must be >= 1")
        if not 0 <= self.warmup_steps <= self.steps:
            p.append(f"warmup_steps ({self.warmup_steps}) must lie in [0, steps={self.steps}]")
        if not 0 < self.min_lr <= self.max_lr:
            p.append("need 0 < min_lr <= max_lr")
        if not 0 <= self.dropout < 1:
            p.append("dropout must be in [0, 1)")
        if self.batch_size < 1:
            p.append("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            p.append("optimizer must be adam or sgd")
        if not self.grad_clip > 0:
            p.append("grad_clip must be > 0")
        if self.log_every < 1:
            p.append("log_every must be >= 1")
        if self.dtype not in ("float32", "float64"):
            p.append("dtype must be float32 or float64")
        return p

    def validate(self) -> "TrainConfig":
        p = self.problems()
        if p:
            raise ConfigError(p)
        return self

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))


def split_run_config(text: str) -> tuple[ModelConfig, TrainConfig]:
    """A run file mixes ModelConfig and TrainConfig keys (their names are disjoint)."""
    model_keys = {f.name for f in fields(ModelConfig)}
    m_lines, t_lines = [], []
    for line in text.splitlines():
        key = line.split("#", 1)[0].split("=", 1)[0].strip()
        (m_lines if key in model_keys else t_lines).append(line)
    mcfg = ModelConfig(**parse_fields(ModelConfig, "\n".join(m_lines)))
    tcfg = TrainConfig(**parse_fields(TrainConfig, "\n".join(t_lines)))
    problems = mcfg.problems() + tcfg.problems()
    if problems:
        raise ConfigError(problems)
    return mcfg, tcfg


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to max_lr, then cosine decay to min_lr at ``cfg.steps``."""
    if step < cfg.warmup_steps:
        return cfg.max_lr * (step + 1) / cfg.warmup_steps
    span = cfg.steps - cfg.warmup_steps
    if span <= 0:
        return cfg.max_lr
    frac = min(step - cfg.warmup_steps, span) / span
    return cfg.min_lr + 0.5 * (cfg.max_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * frac))


def loss(logits, targets, loss_mask):
    """Mean token cross-entropy over positions where ``loss_mask`` holds."""
    return cross_entropy(logits, targets, loss_mask)


# -- optimizers -----------------------------------------------------------


class Adam:
    """Adam with decoupled weight decay on matrices (ndim >= 2)."""

    def __init__(self, params: Sequence[Parameter], beta1=0.9, beta2=0.98, eps=1e-8,
                 weight_decay=0.0):
        self.params = [p for p in params if p.trainable]
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[p.name], self.v[p.name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and p.ndim >= 2:
                upd = upd + self.weight_decay * p.data
            p.data -= (lr * upd).astype(p.data.dtype)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"opt.m.{k}": v for k, v in self.m.items()}
        out.update({f"opt.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, records: dict[str, np.ndarray], t: int) -> None:
        for k in self.m:
            self.m[k][...] = records[f"opt.m.{k}"]
            self.v[k][...] = records[f"opt.v.{k}"]
        self.t = t


class SGD:
    def __init__(self, params: Sequence[Parameter], weight_decay=0.0, **_):
        self.params = [p for p in params if p.trainable]
        self.weight_decay = weight_decay
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        for p in self.params:
            if p.grad is None:
                continue
            upd = p.grad + (self.weight_decay * p.data if self.weight_decay and p.ndim >= 2 else 0.0)
            p.data -= (lr * upd).astype(p.data.dtype)

    def state(self) -> dict[str, np.ndarray]:
        return {}

    def load_state(self, records, t: int) -> None:
        self.t = t


def make_optimizer(model: Model, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(model.parameters(), cfg.adam_beta1, cfg.adam_beta2, weight_decay=cfg.weight_decay)
    return SGD(model.parameters(), weight_decay=cfg.weight_decay)


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(scale)
    return total


def batch_loss(model: Model, batch: WindowBatch, drop: DropoutStream | None = None):
    logits, _ = model.forward_segment(batch.token_ids, reset=True,
                                      drop=drop or DropoutStream(0.0))
    return loss(logits, batch.targets, batch.target_mask)


def train_step(model: Model, batch: WindowBatch, opt, step: int, cfg: TrainConfig
               ) -> tuple[float, object]:
    """Forward every segment from a fresh state, backprop, clip, update."""
    drop = DropoutStream(cfg.dropout, cfg.seed, step)
    params = model.parameters()
    zero_grad(params)
    value = batch_loss(model, batch, drop)
    lv = float(value.data)
    if not math.isfinite(lv):
        norms = {p.name: float(np.abs(p.data).max()) for p in params}
        worst = max(norms, key=norms.get)
        raise TrainingError(f"non-finite loss {lv} at step {step}; "
                            f"largest |param| {norms[worst]:.3g} in {worst}")
    backward(value)
    clip_grad_norm(params, cfg.grad_clip)
    opt.step(lr_schedule(step, cfg))
    return lv, opt


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(path: str | Path, model: Model, opt, step: int, extra: dict | None = None):
    records = {name: p.data for name, p in model.named_parameters()}
    records.update(opt.state())
    header = {
        "config_hash": model.config.digest(),
        "config": model.config.to_text(),
        "dtype": str(model.embed.dtype),
        "meta": {"step": step, "optimizer_t": opt.t, "optimizer": type(opt).__name__.lower(),
                 **(extra or {})},
    }
    checkpoint.save(path, records, header)


def load_model(path: str | Path) -> tuple[Model, dict, dict]:
    """(model, records, header) from a checkpoint; parameters restored exactly."""
    records, header = checkpoint.load(path)
    cfg = ModelConfig.from_text(header["config"])
    if cfg.digest() != header["config_hash"]:
        raise ValueError(f"{path}: config hash mismatch")
    prev = get_default_dtype()
    set_default_dtype(header["dtype"])
    try:
        model = Model(cfg)
    finally:
        set_default_dtype(prev)
    for name, p in model.named_parameters():
        if records[name].shape != p.shape:
            raise ValueError(f"{path}: {name} has shape {records[name].shape}, expected {p.shape}")
        p.data[...] = records[name]
    return model, records, header


# -- loop ----------------------------------------------------------------------


class MetricsWriter:
    def __init__(self, path: Path, append: bool = False):
        self.path = path
        new = not (append and path.exists())
        self.fh = path.open("a" if not new else "w", newline="")
        self.writer = csv.writer(self.fh)
        if new:
            self.writer.writerow(METRIC_FIELDS)

    def row(self, step, loss_value, lr, tps):
        ppl = math.exp(min(loss_value, 700.0))
        self.writer.writerow([step, repr(loss_value), repr(ppl), repr(lr), f"{tps:.1f}"])
        self.fh.flush()

    def close(self):
        self.fh.close()


def train(train_cfg: TrainConfig, model_cfg: ModelConfig, segments: Sequence[Segment],
          resume: str | Path | None = None, eval_segments: Sequence[Segment] | None = None,
          on_step: Callable[[int, float], None] | None = None,
          until: int | None = None) -> Model:
    """Train from scratch (or from ``resume``) through ``train_cfg.steps`` steps.

    Writes ``metrics.csv`` (one row per ``log_every`` steps), ``eval.csv`` when
    ``eval_every`` is set, ``ckpt_<step>.bin`` every ``checkpoint_every`` steps
    and ``last.bin`` at the end. ``until`` stops early (after that many steps
    in total) without changing the schedule, which is how interrupted runs
    are reproduced.
    """
    from .evaluation import perplexity_segments

    cfg = train_cfg.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prev_dtype = get_default_dtype()
    set_default_dtype(cfg.dtype)
    try:
        if resume:
            model, records, header = load_model(resume)
            opt = make_optimizer(model, cfg)
            opt.load_state(records, header["meta"]["optimizer_t"])
            start = header["meta"]["step"]
        else:
            model = Model(model_cfg)
            opt = make_optimizer(model, cfg)
            start = 0
        (out / "config.txt").write_text(model.config.to_text() + cfg.to_text())
        metrics = MetricsWriter(out / "metrics.csv", append=bool(resume))
        end = cfg.steps if until is None else min(until, cfg.steps)
        tokens_per_step = cfg.batch_size * cfg.segment_len
        try:
            for step in range(start, end):
                t0 = time.perf_counter()
                batch = batch_at(segments, cfg.batch_size, cfg.seed, model.config.window_len, step)
                lv, opt = train_step(model, batch, opt, step, cfg)
                dt = time.perf_counter() - t0
                done = step + 1
                if done % cfg.log_every == 0:
                    metrics.row(done, lv, lr_schedule(step, cfg), tokens_per_step / max(dt, 1e-9))
                if on_step:
                    on_step(done, lv)
                if cfg.eval_every and eval_segments and done % cfg.eval_every == 0:
                    ppl = perplexity_segments(model, eval_segments, cfg.batch_size)
                    with (out / "eval.csv").open("a") as fh:
                        fh.write(f"{done},{ppl!r}\n")
                    log.info("step %d eval ppl %.4f", done, ppl)
                if cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                    save_checkpoint(out / f"ckpt_{done}.bin", model, opt, done)
            save_checkpoint(out / "last.bin", model, opt, end)
        finally:
            metrics.close()
    finally:
        set_default_dtype(prev_dtype)
    return model
