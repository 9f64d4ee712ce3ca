"""Command-line entry point: train, eval, memsize, ablate, probe, validate.

Every command writes its results (CSV or JSON lines) into an output
directory. Without ``--out`` that is ``$MELODI_OUT/<name>`` (default root
``runs``). Usage and configuration errors exit with status 2.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

from .config import ConfigError, ModelConfig
from .data import Vocab, build_vocab, load_corpus, prepare_segments
from .evaluation import ProbeConfig, memory_footprint, perplexity, recall_probe, reports_csv
from .training import TrainConfig, TrainingError, load_model, split_run_config, train

log = logging.getLogger("melodi")

OUT_ENV = "MELODI_OUT"
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def output_dir(args, name: str) -> Path:
    out = Path(args.out) if args.out else Path(os.environ.get(OUT_ENV, "runs")) / name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read(path: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None


# -- corpus preparation -----------------------------------------------------


def _vocab_for(tcfg: TrainConfig, mcfg: ModelConfig, docs, out: Path) -> Vocab:
    if tcfg.vocab_path:
        vocab = Vocab.load(tcfg.vocab_path)
    else:
        vocab = build_vocab(docs, mcfg.vocab_size)
    if vocab.size > mcfg.vocab_size:
        raise ConfigError([f"vocab has {vocab.size} tokens but vocab_size = {mcfg.vocab_size}"])
    vocab.save(out / "vocab.txt")
    return vocab


def prepare_run(mcfg: ModelConfig, tcfg: TrainConfig, out: Path):
    """(train segments, eval segments) for a run, saving the vocab next to it."""
    if not tcfg.corpus:
        raise ConfigError(["corpus is not set"])
    if tcfg.segment_len % mcfg.window_len:
        raise ConfigError([f"segment_len ({tcfg.segment_len}) must be a multiple of "
                           f"window_len ({mcfg.window_len})"])
    docs = load_corpus(tcfg.corpus)
    eval_docs: list[bytes] = []
    if tcfg.eval_corpus:
        eval_docs = load_corpus(tcfg.eval_corpus)
    elif tcfg.eval_fraction > 0:
        n = max(1, int(len(docs) * tcfg.eval_fraction))
        docs, eval_docs = docs[:-n], docs[-n:]
    vocab = _vocab_for(tcfg, mcfg, docs, out)
    train_segs = prepare_segments(docs, vocab, tcfg.segment_len, mcfg.window_len)
    eval_segs = prepare_segments(eval_docs, vocab, tcfg.segment_len, mcfg.window_len)
    return train_segs, eval_segs


def run_training(mcfg: ModelConfig, tcfg: TrainConfig, out: Path, resume: str | None = None):
    out.mkdir(parents=True, exist_ok=True)
    tcfg.out_dir = str(out)
    train_segs, eval_segs = prepare_run(mcfg, tcfg, out)
    model = train(tcfg, mcfg, train_segs, resume=resume, eval_segments=eval_segs or None)
    result = {"run": out.name, "steps": tcfg.steps}
    if eval_segs:
        result["eval_ppl"] = perplexity(model, eval_segs, batch_size=tcfg.batch_size)
    return result


# -- commands ---------------------------------------------------------------


def cmd_train(args) -> int:
    mcfg, tcfg = split_run_config(_read(args.config))
    out = output_dir(args, Path(args.config).stem)
    result = run_training(mcfg, tcfg, out, resume=args.resume)
    _append_jsonl(out / "result.jsonl", result)
    print(json.dumps(result))
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _, _ = load_model(args.checkpoint)
    vocab_path = args.vocab or Path(args.checkpoint).parent / "vocab.txt"
    vocab = Vocab.load(vocab_path)
    W = model.config.window_len
    seg_len = args.segment_len or 8 * W
    if seg_len % W:
        raise UsageError(f"--segment-len {seg_len} is not a multiple of window_len {W}")
    segs = prepare_segments(load_corpus(args.corpus), vocab, seg_len, W)
    ppl = perplexity(model, segs, carry_state=args.carry_state)
    row = {"checkpoint": str(args.checkpoint), "corpus": str(args.corpus),
           "carry_state": args.carry_state, "segment_len": seg_len, "ppl": ppl}
    out = output_dir(args, "eval")
    _append_jsonl(out / "eval.jsonl", row)
    print(json.dumps(row))
    return EXIT_OK


def cmd_memsize(args) -> int:
    named = []
    for path in args.configs:
        mcfg, _ = split_run_config(_read(path))
        named.append((Path(path).stem, memory_footprint(mcfg)))
    text = reports_csv(named)
    out = output_dir(args, "memsize")
    (out / "memsize.csv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def parse_sweep(text: str) -> tuple[str, list[tuple[str, dict[str, str]]]]:
    """Split a sweep file into the base run config and its tagged arms.

    ``sweep.<key> = a | b`` lines define axes; the arms are their Cartesian
    product, each tagged ``key=value[,key=value]``.
    """
    base, axes = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if line.startswith("sweep."):
            key, _, values = line[len("sweep."):].partition("=")
            vals = [v.strip() for v in values.split("|") if v.strip()]
            if not key.strip() or not vals:
                raise ConfigError([f"line {lineno}: expected sweep.<key> = v1 | v2"])
            axes.append((key.strip(), vals))
        else:
            base.append(raw)
    if not axes:
        raise ConfigError(["sweep file has no sweep.<key> lines"])
    arms = []
    for combo in itertools.product(*(vals for _, vals in axes)):
        setting = {k: v for (k, _), v in zip(axes, combo)}
        arms.append((",".join(f"{k}={v}" for k, v in setting.items()), setting))
    return "\n".join(base), arms


def resolve_arm(base: str, setting: dict[str, str]) -> tuple[ModelConfig, TrainConfig]:
    overrides = "\n".join(f"{k} = {v}" for k, v in setting.items())
    return split_run_config(base + "\n" + overrides)


def _run_arm(job):
    base, tag, setting, out = job
    mcfg, tcfg = resolve_arm(base, setting)
    return {"tag": tag, **run_training(mcfg, tcfg, Path(out))}


def cmd_ablate(args) -> int:
    base, arms = parse_sweep(_read(args.sweep))
    for _, setting in arms:
        resolve_arm(base, setting)  # fail fast on any invalid arm
    out = output_dir(args, Path(args.sweep).stem)
    jobs = [(base, tag, setting, str(out / tag)) for tag, setting in arms]
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            results = list(pool.map(_run_arm, jobs))
    else:
        results = [_run_arm(j) for j in jobs]
    for r in results:
        _append_jsonl(out / "ablate.jsonl", r)
        print(json.dumps(r))
    return EXIT_OK


def cmd_probe(args) -> int:
    cfg = ProbeConfig.from_text(_read(args.config))
    out = output_dir(args, Path(args.config).stem)
    (out / "probe_config.txt").write_text(cfg.to_text())
    acc = recall_probe(cfg, log=log.info)
    lines = ["arm,distance,accuracy"]
    lines += [f"{arm},{d},{a!r}" for arm, per in acc.items() for d, a in per.items()]
    text = "\n".join(lines) + "\n"
    (out / "probe.csv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_validate(args) -> int:
    mcfg, tcfg = split_run_config(_read(args.config))
    sys.stdout.write(mcfg.to_text() + tcfg.to_text())
    return EXIT_OK


def _append_jsonl(path: Path, row: dict) -> None:
    with path.open("a") as fh:
        fh.write(json.dumps(row) + "\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="melodi", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<name>)")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("train", cmd_train, "train one model from a run config")
    sp.add_argument("config")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp = add("eval", cmd_eval, "perplexity of a checkpoint on a corpus")
    sp.add_argument("checkpoint")
    sp.add_argument("corpus")
    sp.add_argument("--carry-state", action="store_true",
                    help="carry memory across segments of a document")
    sp.add_argument("--vocab", help="vocab file (default: vocab.txt beside the checkpoint)")
    sp.add_argument("--segment-len", type=int, default=0)
    sp = add("memsize", cmd_memsize, "exact memory footprint of configs as CSV")
    sp.add_argument("configs", nargs="+")
    sp = add("ablate", cmd_ablate, "train every arm of a sweep config")
    sp.add_argument("sweep")
    sp.add_argument("--workers", type=int, default=1)
    sp = add("probe", cmd_probe, "long-range recall probe")
    sp.add_argument("config")
    sp = add("validate", cmd_validate, "check a run config and print it resolved")
    sp.add_argument("config")
    return p


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(str(exc))
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        sys.stderr.write("invalid config:\n" + "".join(f"  {p}\n" for p in exc.problems))
        sys.stderr.write(parser.format_usage())
        return EXIT_USAGE
    except (UsageError, FileNotFoundError) as exc:
        sys.stderr.write(f"{exc}\n")
        return EXIT_USAGE
    except TrainingError as exc:
        sys.stderr.write(f"training failed: {exc}\n")
        return EXIT_FAIL


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
