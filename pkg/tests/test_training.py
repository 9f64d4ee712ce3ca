import csv
import math

import numpy as np
import pytest

from melodi import checkpoint
from melodi.config import ConfigError
from melodi.data import segment_document
from melodi.model import build
from melodi.nn import DropoutStream
from melodi.tensor import Parameter, Tensor, backward
from melodi.training import (SGD, Adam, TrainConfig, TrainingError, batch_loss, clip_grad_norm,
                             load_model, loss, lr_schedule, save_checkpoint, split_run_config,
                             train, train_step)
from melodi.data import collate

from conftest import tiny_config

FULL_SCALE = TrainConfig(steps=20000, warmup_steps=1000, max_lr=0.01, min_lr=0.001)


def closed_form(step, c):
    if step < c.warmup_steps:
        return c.max_lr * (step + 1) / c.warmup_steps
    frac = (step - c.warmup_steps) / (c.steps - c.warmup_steps)
    return c.min_lr + 0.5 * (c.max_lr - c.min_lr) * (1 + math.cos(math.pi * frac))


def test_lr_values():
    assert lr_schedule(0, FULL_SCALE) == pytest.approx(1e-5, abs=1e-12)
    assert lr_schedule(499, FULL_SCALE) == pytest.approx(0.005, abs=1e-12)
    assert lr_schedule(1000, FULL_SCALE) == pytest.approx(0.01, abs=1e-12)
    assert lr_schedule(20000, FULL_SCALE) == pytest.approx(0.001, abs=1e-12)
    assert lr_schedule(10500, FULL_SCALE) == pytest.approx(0.0055, abs=1e-12)


def test_lr_matches_closed_form_everywhere():
    for s in range(0, 20001, 97):
        assert abs(lr_schedule(s, FULL_SCALE) - closed_form(s, FULL_SCALE)) <= 1e-12


def test_lr_continuous_and_monotone_after_warmup():
    assert abs(lr_schedule(999, FULL_SCALE) - lr_schedule(1000, FULL_SCALE)) < 1e-15
    vals = [lr_schedule(s, FULL_SCALE) for s in range(1000, 20001)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


@pytest.mark.parametrize("kw,field", [
    ({"grad_clip": 0.0}, "grad_clip"),
    ({"min_lr": 0.1}, "min_lr"),
    ({"warmup_steps": 30000}, "warmup_steps"),
    ({"optimizer": "adafactor"}, "optimizer"),
])
def test_train_config_rejects(kw, field):
    with pytest.raises(ConfigError, match=field):
        TrainConfig(**kw).validate()


def test_split_run_config():
    m, t = split_run_config("n_layers = 3\nlong_term_layer_positions = 1\nsteps = 7\nwarmup_steps = 2\nmax_lr = 0.5\n")
    assert m.n_layers == 3 and t.steps == 7 and t.max_lr == 0.5


def test_loss_uniform_is_log_v():
    V = 7
    value = loss(Tensor(np.zeros((2, 3, 4, V))), np.ones((2, 3, 4), int), np.ones((2, 3, 4), bool))
    assert float(value.data) == pytest.approx(math.log(V), abs=1e-14)


def test_loss_confident_correct_is_zero():
    logits = np.full((1, 1, 3, 5), -50.0)
    tgt = np.array([[[0, 3, 4]]])
    for i, t in enumerate(tgt[0, 0]):
        logits[0, 0, i, t] = 50.0
    assert float(loss(Tensor(logits), tgt, np.ones_like(tgt, bool)).data) < 1e-40


def test_loss_brute_force_oracle(rng):
    logits = rng.normal(size=(2, 3, 4))
    tgt = rng.integers(0, 4, size=(2, 3))
    mask = rng.random((2, 3)) > 0.3
    mask[0, 0] = True
    total, n = 0.0, 0
    for b in range(2):
        for t in range(3):
            if mask[b, t]:
                row = logits[b, t]
                total += -(row[tgt[b, t]] - math.log(sum(math.exp(v) for v in row)))
                n += 1
    assert float(loss(Tensor(logits), tgt, mask).data) == pytest.approx(total / n, abs=1e-13)


def test_loss_all_masked_raises():
    with pytest.raises(ValueError):
        loss(Tensor(np.zeros((1, 2, 3))), np.zeros((1, 2), int), np.zeros((1, 2), bool))


def test_clip_grad_norm():
    p, q = Parameter(np.zeros(2)), Parameter(np.zeros(1))
    p.grad, q.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm([p, q], 1.0) == pytest.approx(5.0)
    assert np.allclose(np.concatenate([p.grad, q.grad]), [0.6, 0, 0.8])


def test_optimizers_skip_frozen_params():
    p, f = Parameter(np.ones(2)), Parameter(np.ones(2), trainable=False)
    p.name, f.name = "p", "f"
    for opt in (Adam([p, f]), SGD([p, f])):
        p.grad = f.grad = np.ones(2)
        opt.step(0.1)
        assert np.array_equal(f.data, np.ones(2))
    assert not np.array_equal(p.data, np.ones(2))


def test_adam_first_step_is_sign_times_lr():
    p = Parameter(np.zeros(3))
    p.name = "p"
    p.grad = np.array([2.0, -0.5, 1e-3])
    Adam([p]).step(0.1)
    assert np.allclose(p.data, [-0.1, 0.1, -0.1], atol=1e-6)


def _repeat_segments(cfg, n=16, seg_windows=2):
    pattern = np.tile([3, 4, 5, 6, 7], 40)
    return [s for i in range(n) for s in
            segment_document(pattern[i:i + seg_windows * cfg.window_len + 1],
                             seg_windows * cfg.window_len, cfg.window_len, i)[:1]]


def test_train_step_deterministic():
    cfg = tiny_config()
    tc = TrainConfig(steps=5, warmup_steps=1, batch_size=2, dropout=0.1, dtype="float64").validate()
    batch = collate(_repeat_segments(cfg)[:2], cfg.window_len)
    losses = []
    for _ in range(2):
        m = build(cfg)
        opt = Adam(m.parameters())
        losses.append([train_step(m, batch, opt, s, tc)[0] for s in range(3)])
    assert losses[0] == losses[1]


def test_dropout_off_loss_deterministic():
    cfg = tiny_config()
    m = build(cfg)
    batch = collate(_repeat_segments(cfg)[:2], cfg.window_len)
    a = float(batch_loss(m, batch).data)
    b = float(batch_loss(m, batch, DropoutStream(0.0, 9, 9)).data)
    assert a == b


def test_non_finite_loss_aborts():
    cfg = tiny_config()
    m = build(cfg)
    m.embed.data[0, 0] = np.nan
    batch = collate(_repeat_segments(cfg)[:2], cfg.window_len)
    tc = TrainConfig(steps=1, warmup_steps=0).validate()
    with pytest.raises(TrainingError, match="non-finite"):
        train_step(m, batch, Adam(m.parameters()), 0, tc)


def test_loss_decreases_on_repeat_corpus(tmp_path):
    cfg = tiny_config(dim=16, ffn_hidden=32)
    segs = _repeat_segments(cfg)
    seen = []
    tc = TrainConfig(steps=200, warmup_steps=20, max_lr=0.01, min_lr=0.001, batch_size=4,
                     dropout=0.0, segment_len=8, out_dir=str(tmp_path), dtype="float32")
    train(tc, cfg, segs, on_step=lambda s, l: seen.append(l))
    assert len(seen) == 200
    assert np.mean(seen[-20:]) < 0.5 * np.mean(seen[:20])


def test_metrics_rows_and_checkpoints(tmp_path):
    cfg = tiny_config()
    tc = TrainConfig(steps=10, warmup_steps=2, batch_size=2, log_every=3, checkpoint_every=5,
                     segment_len=8, out_dir=str(tmp_path))
    train(tc, cfg, _repeat_segments(cfg))
    with (tmp_path / "metrics.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["step", "loss", "ppl", "lr", "tokens_per_sec"]
    assert [int(r["step"]) for r in rows] == [3, 6, 9]
    for r in rows:
        assert float(r["ppl"]) == pytest.approx(math.exp(float(r["loss"])))
    assert (tmp_path / "ckpt_5.bin").exists() and (tmp_path / "ckpt_10.bin").exists()
    model, _, header = load_model(tmp_path / "last.bin")
    assert header["meta"]["step"] == 10 and header["meta"]["optimizer"] == "adam"
    assert model.config == cfg
    assert (tmp_path / "config.txt").read_text().startswith(cfg.to_text())


def test_checkpoint_round_trip_exact(tmp_path):
    cfg = tiny_config()
    m = build(cfg)
    opt = Adam(m.parameters())
    save_checkpoint(tmp_path / "c.bin", m, opt, 3)
    m2, records, header = load_model(tmp_path / "c.bin")
    assert header["dtype"] == "float64"
    for (n, p), (n2, q) in zip(m.named_parameters(), m2.named_parameters()):
        assert n == n2 and np.array_equal(p.data, q.data)
    assert any(k.startswith("opt.m.") for k in records)


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        checkpoint.load(tmp_path / "x.bin")


def _run(tmp_path, name, until=None, resume=None):
    cfg = tiny_config()
    tc = TrainConfig(steps=100, warmup_steps=10, batch_size=2, dropout=0.1, checkpoint_every=50,
                     segment_len=8, out_dir=str(tmp_path / name))
    losses = {}
    train(tc, cfg, _repeat_segments(cfg), until=until, resume=resume,
          on_step=lambda s, l: losses.__setitem__(s, l))
    return losses


def test_resume_is_bit_identical(tmp_path):
    full = _run(tmp_path, "full")
    _run(tmp_path, "part", until=50)
    resumed = _run(tmp_path, "part", resume=tmp_path / "part" / "ckpt_50.bin")
    assert sorted(resumed) == list(range(51, 101))
    assert all(resumed[s] == full[s] for s in range(51, 101))
