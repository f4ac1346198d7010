"""Latency harness: per-sentence decode time by batch size and by length.

Raw per-repetition timings are retained (and can be written to disk as
line-delimited records); the report is a pure aggregation of them, so
re-aggregating reproduces it exactly. Timing covers length prediction,
sampling, flow inversion, decoding, and trimming; model load and
vocabulary work happen outside the timed region. Single worker throughout
so numbers stay comparable.
"""

from __future__ import annotations

import ctypes
import ctypes.util
import json
import time
from dataclasses import dataclass, field
from statistics import median

import numpy as np

from .data import LATENCY_BUCKETS, ParallelCorpus, TokenBatch, Vocabulary, bucket_of, make_batch
from .decoding import DecodeConfig, argmax_decode
from .model import LatentFlowModel

DEFAULT_BATCH_SIZES = (1, 4, 8, 32, 64, 128)


def _tune_allocator() -> None:
    """Keep large numpy temporaries in the malloc arena.

    By default glibc serves big blocks via mmap and returns them on free,
    so every decode batch pays fresh page faults proportional to its
    size; that skews large-batch timings and adds run-to-run noise.
    """
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c"))
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-4, 0)  # M_MMAP_MAX
    except (OSError, AttributeError, TypeError):
        pass  # non-glibc platform; timings are just noisier


@dataclass
class LatencyReport:
    model_tag: str
    bucket_means: dict[str, float]  # bucket label -> mean seconds/sentence
    batch_means: dict[int, float]  # batch size -> mean seconds/sentence
    raw_records: list[dict] = field(default_factory=list)

    def table(self) -> str:
        lines = [f"latency [{self.model_tag}] seconds/sentence"]
        if self.batch_means:
            lines.append("  by batch size:")
            for b, v in sorted(self.batch_means.items()):
                lines.append(f"    {b:>4}: {v:.4f}")
        if self.bucket_means:
            lines.append("  by target-length bucket:")
            for k, v in self.bucket_means.items():
                lines.append(f"    {k:>6}: {v:.4f}")
        return "\n".join(lines)

    def dump_records(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.raw_records:
                fh.write(json.dumps(rec) + "\n")


def bucket_label(i: int, buckets=LATENCY_BUCKETS) -> str:
    lo, hi = buckets[i]
    return f"{lo}-{hi}" if hi < 10**9 else f"{lo}+"

def _chunk(pairs, size):
    return [pairs[i : i + size] for i in range(0, len(pairs), size)]


def _time_decode(decode_fn, batches, reps: int, warmup: int, records: list[dict], tag: dict) -> float:
    """Median over reps of total decode seconds per sentence."""
    n_sentences = sum(b.size for b, *_ in batches)
    for _ in range(warmup):
        for b, *rest in batches:
            decode_fn(b, *rest)
    times = []
    for rep in range(reps):
        t0 = time.perf_counter()
        for b, *rest in batches:
            decode_fn(b, *rest)
        dt = time.perf_counter() - t0
        times.append(dt / n_sentences)
        records.append({**tag, "rep": rep, "seconds_per_sentence": dt / n_sentences})
    return median(times)


def latency_benchmark(
    model_tag: str,
    decode_fn,
    corpus: ParallelCorpus,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    num_scales: int,
    batch_sizes=DEFAULT_BATCH_SIZES,
    bucket_batch_size: int = 32,
    reps: int = 5,
    warmup: int = 1,
    max_sentences_per_setting: int = 256,
    bucket_max_sentences: int | None = None,
    buckets=LATENCY_BUCKETS,
) -> LatencyReport:
    """decode_fn(src_batch) -> hypotheses; everything inside it is timed.

    Pass batch_sizes=() to skip the sweep or buckets=() to skip the
    bucketed section (e.g. to run the sweep on a length-homogeneous
    corpus where padding does not confound the batching effect).
    """
    _tune_allocator()
    records: list[dict] = []

    def batch_of(pairs):
        src, _, _ = make_batch(pairs, src_vocab, tgt_vocab, num_scales)
        return src

    # (a) batch-size sweep over a fixed sentence set, length-sorted so
    # batches stay length-homogeneous at every size (mixed-length chunks
    # would charge large batches for padding instead of decoding)
    sweep_pairs = sorted(corpus.pairs[:max_sentences_per_setting], key=lambda p: len(p[1]), reverse=True)
    batch_means = {}
    for bs in batch_sizes:
        batches = [(batch_of(c),) for c in _chunk(sweep_pairs, bs)]
        batch_means[bs] = _time_decode(
            decode_fn, batches, reps, warmup, records, {"model": model_tag, "batch_size": bs}
        )

    # (b) target-length buckets at a fixed batch size
    by_bucket: dict[int, list] = {i: [] for i in range(len(buckets))}
    if buckets:
        for s, t in corpus.pairs:
            by_bucket[bucket_of(len(t), buckets)].append((s, t))
    bucket_means = {}
    for i, pairs in by_bucket.items():
        pairs = pairs[: bucket_max_sentences or max_sentences_per_setting]
        if not pairs:
            continue
        batches = [(batch_of(c),) for c in _chunk(pairs, bucket_batch_size)]
        bucket_means[bucket_label(i, buckets)] = _time_decode(
            decode_fn, batches, reps, warmup, records, {"model": model_tag, "bucket": bucket_label(i, buckets)}
        )
    return LatencyReport(model_tag, bucket_means, batch_means, records)


def aggregate_records(records: list[dict]) -> tuple[dict, dict]:
    """Recompute the report aggregates from raw records (consistency check)."""
    by_batch: dict[int, list[float]] = {}
    by_bucket: dict[str, list[float]] = {}
    for rec in records:
        if "batch_size" in rec:
            by_batch.setdefault(rec["batch_size"], []).append(rec["seconds_per_sentence"])
        else:
            by_bucket.setdefault(rec["bucket"], []).append(rec["seconds_per_sentence"])
    return (
        {k: median(v) for k, v in by_batch.items()},
        {k: median(v) for k, v in by_bucket.items()},
    )


def flow_decode_fn(model: LatentFlowModel):
    cfg = DecodeConfig(method="argmax")

    def fn(src_batch: TokenBatch):
        return argmax_decode(model, src_batch, cfg)

    return fn


def ar_decode_fn(ar_model, beam: int = 5):
    def fn(src_batch: TokenBatch):
        return ar_model.beam_decode(src_batch, beam)

    return fn
