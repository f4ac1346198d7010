"""Corpus handling: vocabularies, padded batches, and synthetic tasks.

Tokenization is whitespace-based. Target batches are padded with EOS so
every sequence length is divisible by 2^(num_scales - 1), which the
multi-scale flow requires before squeezing; sources are padded with PAD
only. Reserved ids: PAD=0, EOS=1, UNK=2, BOS=3 (BOS is only consumed by
the autoregressive rescorer).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import RandomSource

PAD, EOS, UNK, BOS = 0, 1, 2, 3
RESERVED = ["<pad>", "<eos>", "<unk>", "<bos>"]


class Vocabulary:
    """Total token<->id bijection with fixed reserved ids."""

    def __init__(self, tokens: list[str]):
        self.itos = list(RESERVED) + list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, tokens: list[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.itos[int(i)] for i in ids]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.itos[len(RESERVED):]) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        tokens = [line for line in text.split("\n") if line]
        return cls(tokens)


@dataclass
class ParallelCorpus:
    pairs: list[tuple[list[str], list[str]]]
    provenance: str = "file"

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass
class TokenBatch:
    """Padded id matrix plus per-sequence lengths and pad mask.

    ``lengths`` counts real tokens including the appended EOS run;
    ``raw_lengths`` counts tokens plus a single EOS (before any
    divisibility padding) and feeds the length classifier.
    """

    tokens: np.ndarray  # [B, T] int64
    lengths: np.ndarray  # [B] int64
    raw_lengths: np.ndarray  # [B] int64
    pad_mask: np.ndarray = field(init=False)  # [B, T] bool, True = real token

    def __post_init__(self):
        t = np.arange(self.tokens.shape[1])[None, :]
        self.pad_mask = t < self.lengths[:, None]

    @property
    def size(self) -> int:
        return self.tokens.shape[0]

    @property
    def max_len(self) -> int:
        return self.tokens.shape[1]


def round_up(n: int, multiple: int) -> int:
    return ((n + multiple - 1) // multiple) * multiple


def load_parallel_files(src_path, tgt_path, max_src_len: int = 80, max_tgt_len: int = 60) -> ParallelCorpus:
    src_lines = Path(src_path).read_text(encoding="utf-8").splitlines()
    tgt_lines = Path(tgt_path).read_text(encoding="utf-8").splitlines()
    if len(src_lines) != len(tgt_lines):
        raise ValueError(f"parallel files differ in length: {len(src_lines)} vs {len(tgt_lines)}")
    pairs = []
    for s, t in zip(src_lines, tgt_lines):
        st, tt = s.split(), t.split()
        if not st or not tt:
            continue
        if len(st) > max_src_len or len(tt) > max_tgt_len:
            continue
        pairs.append((st, tt))
    if not pairs:
        raise ValueError("no usable sentence pairs after filtering")
    return ParallelCorpus(pairs, provenance="file")


def build_vocab(corpus: ParallelCorpus, min_count: int = 1, shared: bool = False):
    """Frequency-ordered vocabulary; ties broken lexicographically.

    Returns one shared table or a (source, target) pair.
    """
    if not corpus.pairs:
        raise ValueError("cannot build a vocabulary from an empty corpus")

    def spine(counts: Counter) -> list[str]:
        kept = [(tok, c) for tok, c in counts.items() if c >= min_count]
        kept.sort(key=lambda kv: (-kv[1], kv[0]))
        return [tok for tok, _ in kept]

    src_counts: Counter = Counter()
    tgt_counts: Counter = Counter()
    for s, t in corpus.pairs:
        src_counts.update(s)
        tgt_counts.update(t)
    if shared:
        return Vocabulary(spine(src_counts + tgt_counts))
    return Vocabulary(spine(src_counts)), Vocabulary(spine(tgt_counts))


def make_batch(
    pairs: list[tuple[list[str], list[str]]],
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    num_scales: int = 1,
    max_src_len: int | None = None,
    max_tgt_len: int | None = None,
    sort: bool = True,
) -> tuple[TokenBatch, TokenBatch, int]:
    """Encode and pad one batch; returns (src, tgt, skipped_count).

    Targets get one EOS, then extra EOS until the length divides
    2^(num_scales-1); batch width is floored at 2^num_scales so the top
    flow scale always has at least two time positions. Sources get one
    EOS and PAD. Pairs are sorted by target length, longest first, unless
    the caller needs to preserve input order (decode-time batches).
    """
    if num_scales < 1:
        raise ValueError("num_scales must be >= 1")
    multiple = 1 << (num_scales - 1)
    kept = []
    skipped = 0
    for s, t in pairs:
        if (max_src_len and len(s) > max_src_len) or (max_tgt_len and len(t) > max_tgt_len):
            skipped += 1
            continue
        kept.append((s, t))
    if not kept:
        raise ValueError("batch is empty after length filtering")
    if sort:
        kept.sort(key=lambda p: len(p[1]), reverse=True)

    src_ids = [src_vocab.encode(s) + [EOS] for s, _ in kept]
    tgt_ids = [tgt_vocab.encode(t) + [EOS] for _, t in kept]
    tgt_lens = [round_up(len(t), multiple) for t in tgt_ids]

    src_t = max(len(s) for s in src_ids)
    tgt_t = max(max(tgt_lens), 1 << num_scales)
    src_mat = np.full((len(kept), src_t), PAD, dtype=np.int64)
    tgt_mat = np.full((len(kept), tgt_t), PAD, dtype=np.int64)
    for i, (s, t) in enumerate(zip(src_ids, tgt_ids)):
        src_mat[i, : len(s)] = s
        tgt_mat[i, : len(t)] = t
        tgt_mat[i, len(t) : tgt_lens[i]] = EOS

    src_batch = TokenBatch(
        src_mat,
        lengths=np.array([len(s) for s in src_ids], dtype=np.int64),
        raw_lengths=np.array([len(s) for s in src_ids], dtype=np.int64),
    )
    tgt_batch = TokenBatch(
        tgt_mat,
        lengths=np.array(tgt_lens, dtype=np.int64),
        raw_lengths=np.array([len(t) for t in tgt_ids], dtype=np.int64),
    )
    return src_batch, tgt_batch, skipped


class BatchIterator:
    """Deterministic epoch iterator: shuffle, bucket by target length, emit.

    Order is a pure function of (corpus, seed, epoch).
    """

    def __init__(
        self,
        corpus: ParallelCorpus,
        src_vocab: Vocabulary,
        tgt_vocab: Vocabulary,
        batch_sentences: int,
        num_scales: int,
        seed: int,
        max_src_len: int | None = None,
        max_tgt_len: int | None = None,
    ):
        self.corpus = corpus
        self.src_vocab = src_vocab
        self.tgt_vocab = tgt_vocab
        self.batch_sentences = batch_sentences
        self.num_scales = num_scales
        self.seed = seed
        self.max_src_len = max_src_len
        self.max_tgt_len = max_tgt_len
        self.skipped = 0

    def epoch(self, epoch_idx: int):
        rng = RandomSource(self.seed).spawn(f"batches-epoch{epoch_idx}")
        order = rng.permutation(len(self.corpus.pairs))
        pairs = [self.corpus.pairs[i] for i in order]
        # Sort inside a shuffled pool, then shuffle batch order: batches stay
        # length-homogeneous without freezing the epoch composition.
        pairs.sort(key=lambda p: len(p[1]), reverse=True)
        chunks = [pairs[i : i + self.batch_sentences] for i in range(0, len(pairs), self.batch_sentences)]
        for ci in rng.permutation(len(chunks)):
            chunk = chunks[int(ci)]
            try:
                src, tgt, skipped = make_batch(
                    chunk, self.src_vocab, self.tgt_vocab, self.num_scales, self.max_src_len, self.max_tgt_len
                )
            except ValueError:
                self.skipped += len(chunk)
                continue
            self.skipped += skipped
            yield src, tgt


# -- synthetic tasks ---------------------------------------------------------

SYNTH_TASKS = ("copy", "reverse", "sort", "lexical-swap", "ambiguous-swap")


def synth_corpus(task: str, vocab_size: int, len_range: tuple[int, int], n: int, seed: int) -> ParallelCorpus:
    """Toy parallel corpus over tokens w0..w{vocab_size-1}, fixed by seed.

    lexical-swap applies a fixed seed-derived token bijection, a word-level
    stand-in for translation. ambiguous-swap gives every source token two
    equally likely target tokens (the choice drawn per occurrence), the
    minimal task with real translation multimodality; the rest are
    deterministic transforms of the source.
    """
    if task not in SYNTH_TASKS:
        raise ValueError(f"unknown task {task!r}; choose from {SYNTH_TASKS}")
    if vocab_size < 4:
        raise ValueError("vocab_size must be >= 4")
    lo, hi = len_range
    if n < 1 or lo < 1 or hi < lo:
        raise ValueError(f"degenerate corpus request: n={n}, len_range={len_range}")

    rng = RandomSource(seed).spawn(f"synth-{task}")
    words = [f"w{i}" for i in range(vocab_size)]
    swap = None
    variants = None
    if task == "lexical-swap":
        perm = RandomSource(seed).spawn("synth-bijection").permutation(vocab_size)
        swap = {words[i]: words[int(perm[i])] for i in range(vocab_size)}
    elif task == "ambiguous-swap":
        p1 = RandomSource(seed).spawn("synth-variant1").permutation(vocab_size)
        p2 = RandomSource(seed).spawn("synth-variant2").permutation(vocab_size)
        variants = [(words[int(p1[i])], words[int(p2[i])]) for i in range(vocab_size)]

    pairs = []
    for _ in range(n):
        length = int(rng.integers(lo, hi + 1))
        ids = rng.integers(0, vocab_size, length)
        src = [words[int(i)] for i in ids]
        if task == "copy":
            tgt = list(src)
        elif task == "reverse":
            tgt = src[::-1]
        elif task == "sort":
            tgt = sorted(src, key=lambda w: int(w[1:]))
        elif task == "lexical-swap":
            tgt = [swap[w] for w in src]
        else:
            picks = rng.integers(0, 2, length)
            tgt = [variants[int(i)][int(p)] for i, p in zip(ids, picks)]
        pairs.append((src, tgt))
    return ParallelCorpus(pairs, provenance="synthetic")


def split_corpus(corpus: ParallelCorpus, n_dev: int, seed: int) -> tuple[ParallelCorpus, ParallelCorpus]:
    order = RandomSource(seed).spawn("dev-split").permutation(len(corpus.pairs))
    dev_idx = set(int(i) for i in order[:n_dev])
    train = [p for i, p in enumerate(corpus.pairs) if i not in dev_idx]
    dev = [corpus.pairs[int(i)] for i in order[:n_dev]]
    return ParallelCorpus(train, corpus.provenance), ParallelCorpus(dev, corpus.provenance)


LATENCY_BUCKETS = ((1, 10), (11, 20), (21, 30), (31, 40), (41, 10**9))


def bucket_of(length: int, buckets=LATENCY_BUCKETS) -> int:
    for i, (lo, hi) in enumerate(buckets):
        if lo <= length <= hi:
            return i
    raise ValueError(f"length {length} fits no bucket")


def parse_buckets(text: str):
    """'1-10,11-20,41+' -> ((1,10), (11,20), (41, huge))."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if part.endswith("+"):
            out.append((int(part[:-1]), 10**9))
        else:
            lo, hi = part.split("-")
            out.append((int(lo), int(hi)))
    return tuple(out)
