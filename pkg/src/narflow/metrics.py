"""Corpus BLEU-4, diversity metrics, and token accuracy.

Token-level, case-sensitive BLEU on the artifact's own whitespace
tokenization. Smoothing: when an n-gram precision (n >= 2) is zero, add-1
on that order's numerator and denominator; the report records that this
happened. The diversity pair: pairwise BLEU over a sentence's own
hypothesis set (lower = more diverse) and leave-one-out style BLEU of each
hypothesis against a multi-reference set (higher = better quality).
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass


@dataclass
class BleuReport:
    bleu: float  # 0..100
    precisions: tuple[float, float, float, float]
    brevity_penalty: float
    hyp_tokens: int
    ref_tokens: int
    smoothed_orders: tuple[int, ...] = ()

    def __str__(self):
        p = "/".join(f"{x * 100:.1f}" for x in self.precisions)
        return f"BLEU = {self.bleu:.2f} ({p}) BP={self.brevity_penalty:.3f}"


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_len(hyp_len: int, ref_lens: list[int]) -> int:
    return min(ref_lens, key=lambda r: (abs(r - hyp_len), r))


def corpus_bleu(hyps: list[list], refs: list, max_order: int = 4) -> BleuReport:
    """BLEU-4 with the standard brevity penalty.

    refs entries may be a single reference or a list of references per
    sentence; clipping uses the max count over references and the brevity
    penalty uses the closest reference length.
    """
    if not hyps:
        raise ValueError("empty hypothesis set")
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    matches = [0] * max_order
    totals = [0] * max_order
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hyps, refs):
        ref_list = ref if ref and isinstance(ref[0], (list, tuple)) else [ref]
        hyp_len += len(hyp)
        ref_len += _closest_ref_len(len(hyp), [len(r) for r in ref_list])
        for n in range(1, max_order + 1):
            hyp_ngrams = _ngrams(hyp, n)
            if not hyp_ngrams:
                continue
            clip: Counter = Counter()
            for r in ref_list:
                r_ngrams = _ngrams(r, n)
                for g, c in hyp_ngrams.items():
                    clip[g] = max(clip[g], min(c, r_ngrams.get(g, 0)))
            matches[n - 1] += sum(clip.values())
            totals[n - 1] += sum(hyp_ngrams.values())

    precisions = []
    smoothed = []
    for n in range(max_order):
        if totals[n] == 0:
            precisions.append(0.0)  # no n-grams of this order exist at all
            smoothed.append(n + 1)
        elif matches[n] == 0 and n >= 1:
            precisions.append(1.0 / (totals[n] + 1))
            smoothed.append(n + 1)
        else:
            precisions.append(matches[n] / totals[n])

    # Degenerate corpora (all hypotheses shorter than some order) use the
    # orders that exist; a zero 1-gram precision pins BLEU to 0.
    usable = [p for p, t in zip(precisions, totals) if t > 0]
    if not usable or precisions[0] == 0.0:
        geo = 0.0
    else:
        geo = math.exp(sum(math.log(p) for p in usable) / len(usable))
    bp = 1.0 if hyp_len >= ref_len else (math.exp(1.0 - ref_len / hyp_len) if hyp_len > 0 else 0.0)
    return BleuReport(
        bleu=100.0 * bp * geo,
        precisions=tuple(precisions),
        brevity_penalty=bp,
        hyp_tokens=hyp_len,
        ref_tokens=ref_len,
        smoothed_orders=tuple(smoothed),
    )


def sentence_bleu(hyp: list, refs: list[list], max_order: int = 4) -> float:
    return corpus_bleu([hyp], [refs], max_order).bleu


def pairwise_bleu(hyp_sets: list[list[list]]) -> float:
    """Mean sentence BLEU over ordered hypothesis pairs, then over sentences.

    Each sentence contributes the average of BLEU(h_i against h_j) for all
    i != j within its own m hypotheses. Lower means a more diverse set.
    """
    if not hyp_sets:
        raise ValueError("no hypothesis sets")
    per_sentence = []
    for hyps in hyp_sets:
        m = len(hyps)
        if m < 2:
            raise ValueError("pairwise diversity needs at least 2 hypotheses per sentence")
        scores = [sentence_bleu(hyps[i], [hyps[j]]) for i in range(m) for j in range(m) if i != j]
        per_sentence.append(sum(scores) / len(scores))
    return sum(per_sentence) / len(per_sentence)


def loo_bleu(hyp_sets: list[list[list]], ref_sets: list[list[list]]) -> float:
    """Mean multi-reference BLEU of each hypothesis; higher = better quality."""
    if len(hyp_sets) != len(ref_sets):
        raise ValueError("hypothesis and reference sets differ in length")
    per = []
    for hyps, refs in zip(hyp_sets, ref_sets):
        if len(refs) < 2:
            raise ValueError("leave-one-out scoring needs >= 2 references per sentence")
        for h in hyps:
            per.append(sentence_bleu(h, refs))
    return sum(per) / len(per)


def token_accuracy(hyps: list[list], refs: list[list]) -> float:
    """Position-wise match rate against references; length mismatch counts
    the missing or extra positions as errors."""
    matched = 0
    total = 0
    for h, r in zip(hyps, refs):
        total += max(len(h), len(r))
        matched += sum(1 for a, b in zip(h, r) if a == b)
    return matched / max(total, 1)


def exact_match(hyps: list[list], refs: list[list]) -> float:
    hits = sum(1 for h, r in zip(hyps, refs) if list(h) == list(r))
    return hits / max(len(hyps), 1)
