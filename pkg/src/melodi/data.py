"""Corpus loading, byte-level BPE vocabulary, segmentation and batching."""

from __future__ import annotations

import heapq
import json
import re
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

PAD, BOS, EOS = 0, 1, 2
N_SPECIAL = 3
BYTE_OFFSET = N_SPECIAL
BASE_SIZE = 256 + N_SPECIAL
SPECIAL_NAMES = ("<pad>", "<bos>", "<eos>")

# Chunks never straddle a space/letter/digit boundary; every byte lands in some chunk.
_PRETOKEN = re.compile(rb" ?[A-Za-z]+| ?[0-9]+| ?[^\sA-Za-z0-9]+|\s+(?!\S)|\s+")


class Vocab:
    """Byte-level vocabulary: 3 specials, 256 bytes, then merges in rank order."""

    def __init__(self, merges: Sequence[tuple[int, int]] = ()):
        self.merges: list[tuple[int, int]] = [tuple(m) for m in merges]
        self.tokens: list[bytes] = [b""] * N_SPECIAL + [bytes([b]) for b in range(256)]
        self.ranks: dict[tuple[int, int], int] = {}
        for a, b in self.merges:
            self.ranks[(a, b)] = len(self.tokens)
            self.tokens.append(self.tokens[a] + self.tokens[b])
        self._cache: dict[bytes, list[int]] = {}

    pad, bos, eos = PAD, BOS, EOS

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def _encode_chunk(self, chunk: bytes) -> list[int]:
        ids = self._cache.get(chunk)
        if ids is not None:
            return ids
        ids = [b + BYTE_OFFSET for b in chunk]
        while len(ids) > 1:
            best, at = None, -1
            for i in range(len(ids) - 1):
                r = self.ranks.get((ids[i], ids[i + 1]))
                if r is not None and (best is None or r < best):
                    best, at = r, i
            if best is None:
                break
            ids[at:at + 2] = [best]
        if len(self._cache) < 200_000:
            self._cache[chunk] = ids
        return ids

    def encode(self, data: bytes | str) -> list[int]:
        if isinstance(data, str):
            data = data.encode("utf-8")
        out: list[int] = []
        for m in _PRETOKEN.finditer(data):
            out.extend(self._encode_chunk(m.group()))
        return out

    def decode(self, ids: Iterable[int]) -> bytes:
        return b"".join(self.tokens[i] for i in ids if i >= N_SPECIAL)

    # Vocab file: line i holds token i. Specials as <name>; other tokens with
    # every byte outside printable ASCII (and '\\', '<') escaped as \xHH.
    # Merged tokens add a tab and the two source ids.
    def save(self, path: str | Path) -> None:
        lines = list(SPECIAL_NAMES)
        for i in range(N_SPECIAL, len(self.tokens)):
            line = _escape(self.tokens[i])
            if i >= BASE_SIZE:
                a, b = self.merges[i - BASE_SIZE]
                line += f"\t{a} {b}"
            lines.append(line)
        Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="ascii").split("\n")[:-1]
        if tuple(lines[:N_SPECIAL]) != SPECIAL_NAMES or len(lines) < BASE_SIZE:
            raise ValueError(f"{path}: not a vocab file")
        merges = []
        for line in lines[BASE_SIZE:]:
            a, b = line.rsplit("\t", 1)[1].split()
            merges.append((int(a), int(b)))
        vocab = cls(merges)
        for i, line in enumerate(lines[N_SPECIAL:], N_SPECIAL):
            if _unescape(line.split("\t", 1)[0]) != vocab.tokens[i]:
                raise ValueError(f"{path}: line {i + 1} disagrees with its merge")
        return vocab


def _escape(tok: bytes) -> str:
    return "".join(chr(c) if 0x20 < c < 0x7F and c not in (0x5C, 0x3C) else f"\\x{c:02x}"
                   for c in tok)


def _unescape(s: str) -> bytes:
    return bytes(int(s[i + 2:i + 4], 16) if s[i] == "\\" else ord(s[i])
                 for i in _escape_starts(s))


def _escape_starts(s: str) -> Iterator[int]:
    i = 0
    while i < len(s):
        yield i
        i += 4 if s[i] == "\\" else 1


def build_vocab(corpus: Iterable[bytes | str], size: int = 2048) -> Vocab:
    """Greedy byte-pair merges over pre-tokenized chunks until ``size`` tokens.

    Ties between equally frequent pairs go to the smaller (left, right) ids.
    Stops early if no pair occurs twice.
    """
    if size < BASE_SIZE:
        raise ValueError(f"vocab size must be >= {BASE_SIZE}")
    counts: Counter[bytes] = Counter()
    for doc in corpus:
        if isinstance(doc, str):
            doc = doc.encode("utf-8")
        counts.update(m.group() for m in _PRETOKEN.finditer(doc))
    words = [[b + BYTE_OFFSET for b in w] for w in counts]
    freq = list(counts.values())
    pair_count: defaultdict[tuple[int, int], int] = defaultdict(int)
    where: defaultdict[tuple[int, int], set[int]] = defaultdict(set)
    for wi, w in enumerate(words):
        for p in zip(w, w[1:]):
            pair_count[p] += freq[wi]
            where[p].add(wi)
    heap = [(-c, p) for p, c in pair_count.items()]
    heapq.heapify(heap)
    merges: list[tuple[int, int]] = []
    next_id = BASE_SIZE
    while next_id < size and heap:
        neg, pair = heapq.heappop(heap)
        if pair_count.get(pair, 0) != -neg:
            continue  # stale entry
        if -neg < 2:
            break
        merges.append(pair)
        new = next_id
        next_id += 1
        touched: set[tuple[int, int]] = set()
        for wi in list(where.pop(pair, ())):
            w, f = words[wi], freq[wi]
            for p in zip(w, w[1:]):
                pair_count[p] -= f
                touched.add(p)
            merged, i = [], 0
            while i < len(w):
                if i + 1 < len(w) and (w[i], w[i + 1]) == pair:
                    merged.append(new)
                    i += 2
                else:
                    merged.append(w[i])
                    i += 1
            words[wi] = merged
            for p in zip(merged, merged[1:]):
                pair_count[p] += f
                where[p].add(wi)
                touched.add(p)
        pair_count.pop(pair, None)
        for p in touched:
            c = pair_count.get(p, 0)
            if c > 0:
                heapq.heappush(heap, (-c, p))
            else:
                pair_count.pop(p, None)
    return Vocab(merges)


# -- corpus ---------------------------------------------------------------


def load_corpus(path: str | Path) -> list[bytes]:
    """Documents from a directory of text files (one per file, sorted by name)
    or from a .jsonl file with one ``{"text": ...}`` object per line."""
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.rglob("*") if p.is_file())
        return [p.read_bytes() for p in files]
    if path.suffix == ".jsonl":
        docs = []
        with path.open("rb") as fh:
            for line in fh:
                if line.strip():
                    docs.append(json.loads(line)["text"].encode("utf-8"))
        return docs
    if path.is_file():
        return [path.read_bytes()]
    raise FileNotFoundError(path)


def encode_document(vocab: Vocab, doc: bytes | str) -> list[int]:
    return [BOS] + vocab.encode(doc)


def filter_min_length(docs: Sequence[Sequence[int]], min_tokens: int) -> list[Sequence[int]]:
    return [d for d in docs if len(d) >= min_tokens]


# -- segmentation and batching -------------------------------------------


@dataclass
class Segment:
    tokens: np.ndarray  # [segment_len] input ids, PAD past the document end
    targets: np.ndarray  # next token within the document, PAD where none
    doc_id: int = 0

    @property
    def loss_mask(self) -> np.ndarray:
        return self.tokens != PAD

    @property
    def target_mask(self) -> np.ndarray:
        return self.targets != PAD


def segment_document(tokens: Sequence[int], segment_len: int, window_len: int | None = None,
                     doc_id: int = 0) -> list[Segment]:
    """Consecutive non-overlapping chunks; the last one is right-padded.

    Targets look one token past the chunk so the last token of a segment
    still predicts the next document token. Only the document's final token
    has no target.
    """
    if window_len is not None and segment_len % window_len:
        raise ValueError(f"segment_len {segment_len} is not a multiple of window_len {window_len}")
    tokens = np.asarray(tokens, dtype=np.int64)
    n = len(tokens)
    out = []
    for start in range(0, n, segment_len):
        inp = np.full(segment_len, PAD, dtype=np.int64)
        tgt = np.full(segment_len, PAD, dtype=np.int64)
        chunk = tokens[start:start + segment_len]
        inp[:len(chunk)] = chunk
        nxt = tokens[start + 1:start + segment_len + 1]
        tgt[:len(nxt)] = nxt
        out.append(Segment(inp, tgt, doc_id))
    return out


@dataclass
class WindowBatch:
    token_ids: np.ndarray  # [batch, windows, W]
    targets: np.ndarray
    loss_mask: np.ndarray  # False exactly on pad inputs
    target_mask: np.ndarray  # positions with a real next token
    doc_ids: np.ndarray

    @property
    def n_targets(self) -> int:
        return int(self.target_mask.sum())


def collate(segments: Sequence[Segment], window_len: int) -> WindowBatch:
    tok = np.stack([s.tokens for s in segments])
    tgt = np.stack([s.targets for s in segments])
    B, T = tok.shape
    if T % window_len:
        raise ValueError(f"segment length {T} is not a multiple of window_len {window_len}")
    shape = (B, T // window_len, window_len)
    tok, tgt = tok.reshape(shape), tgt.reshape(shape)
    return WindowBatch(tok, tgt, tok != PAD, tgt != PAD, np.array([s.doc_id for s in segments]))


def epoch_order(n_segments: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n_segments)


def make_batches(segments: Sequence[Segment], batch_size: int, seed: int, window_len: int,
                 epoch: int = 0, drop_last: bool = True) -> Iterator[WindowBatch]:
    """One epoch of batches in a seed-determined shuffle (re-drawn per epoch).

    ``drop_last`` drops the trailing incomplete batch (training); evaluation
    keeps it.
    """
    order = epoch_order(len(segments), seed, epoch)
    for i in range(0, len(order), batch_size):
        idx = order[i:i + batch_size]
        if len(idx) < batch_size and drop_last:
            return
        yield collate([segments[j] for j in idx], window_len)


def batch_at(segments: Sequence[Segment], batch_size: int, seed: int, window_len: int,
             step: int) -> WindowBatch:
    """The ``step``-th training batch of the endless epoch stream."""
    per_epoch = len(segments) // batch_size
    if per_epoch == 0:
        raise ValueError(f"{len(segments)} segments cannot fill a batch of {batch_size}")
    epoch, pos = divmod(step, per_epoch)
    order = epoch_order(len(segments), seed, epoch)
    idx = order[pos * batch_size:(pos + 1) * batch_size]
    return collate([segments[j] for j in idx], window_len)


def prepare_segments(docs: Sequence[bytes], vocab: Vocab, segment_len: int, window_len: int,
                     min_tokens: int = 0) -> list[Segment]:
    encoded = filter_min_length([encode_document(vocab, d) for d in docs], min_tokens)
    segs: list[Segment] = []
    for i, toks in enumerate(encoded):
        segs.extend(segment_document(toks, segment_len, window_len, doc_id=i))
    return segs
