"""Inference procedures.

All three flow-model decoders are one-pass in the decoder: candidate
generation costs one decoder forward per candidate batch regardless of
sequence length. argmax takes the deterministic base-mode path through the
inverse flow; NPD samples several latents (optionally at several predicted
lengths), reads off token sequences, and reranks them with a pretrained
autoregressive scorer; IWD reranks its samples with an importance-weighted
estimate of each candidate's marginal probability.

The autoregressive baseline lives here too: a standard causal
encoder-decoder used as the NPD rescorer, the latency comparator, and the
optional distillation teacher.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import BOS, EOS, PAD, TokenBatch, round_up
from .model import LatentFlowModel
from .module import Module
from .nets import (
    AttentionBlockConfig,
    Embedding,
    LayerNorm,
    LENGTH_RANGE,
    Linear,
    PositionalEmbedding,
    SourceEncoder,
    SourceEncoding,
    TransformerLayer,
    causal_bias,
    key_mask_bias,
    top_length_classes,
)
from .rng import RandomSource
from .tensor import Tensor


@dataclass
class DecodeConfig:
    method: str = "argmax"  # argmax | npd | iwd
    l: int = 1  # length candidates
    r: int = 1  # samples per length
    temperature: float = 0.4
    k_iwd: int = 1  # importance samples
    beam: int = 1  # autoregressive baseline only
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("argmax", "npd", "iwd"):
            raise ValueError(f"unknown decode method {self.method!r}")
        if self.l < 1 or self.r < 1 or self.k_iwd < 1 or self.beam < 1:
            raise ValueError("l, r, K and beam must all be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.l > 2 * LENGTH_RANGE + 1:
            raise ValueError("more length candidates than length classes")


@dataclass
class Hypothesis:
    tokens: list[int]  # content ids, EOS and PAD free
    raw_length: int  # latent length used to generate it
    score: float
    latency_seconds: float = 0.0


def trim_first_eos(row) -> list[int]:
    """Tokens strictly before the first EOS (idempotent; drops PAD too)."""
    out = []
    for t in row:
        t = int(t)
        if t == EOS or t == PAD:
            break
        out.append(t)
    return out


def length_candidates(model: LatentFlowModel, src: SourceEncoding, src_lengths: np.ndarray, l: int) -> np.ndarray:
    """Per-sentence latent lengths [B, l], distinct where possible.

    Class k encodes a length difference of k - 20 against the source
    length; raw lengths are floored at 1, then rounded up to the squeeze
    divisor. Classes are consumed best-first; candidates that collide
    after rounding are replaced by the next-best class.
    """
    with T.no_grad():
        logits = model.predict_length_logits(src).data
    divisor = model.cfg.flow.divisor
    out = np.zeros((len(src_lengths), l), dtype=np.int64)
    for i, t_src in enumerate(src_lengths):
        chosen: list[int] = []
        for cls in top_length_classes(logits[i], 2 * LENGTH_RANGE + 1):
            t = max(1, int(t_src) + (int(cls) - LENGTH_RANGE))
            t = round_up(t, divisor)
            if t not in chosen:
                chosen.append(t)
            if len(chosen) == l:
                break
        while len(chosen) < l:  # all 41 classes collided after rounding
            chosen.append(chosen[0] if chosen else divisor)
        out[i] = chosen
    return out


def _length_masks(lengths: np.ndarray, t_max: int) -> np.ndarray:
    return np.arange(t_max)[None, :] < lengths[:, None]


def _replicate_encoding(src: SourceEncoding, times: int) -> SourceEncoding:
    states = T.Tensor(np.repeat(src.states.data, times, axis=0))
    return SourceEncoding(states, np.repeat(src.pad_mask, times, axis=0))


def _model_scores(logits: np.ndarray, tokens: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Length-normalized log P(tokens | z, x) from decoder logits."""
    m = logits.max(axis=-1, keepdims=True)
    logp = logits - (m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True)))
    picked = np.take_along_axis(logp, tokens[..., None], axis=-1)[..., 0]
    mask = _length_masks(lengths, tokens.shape[1])
    return (picked * mask).sum(axis=1) / np.maximum(lengths, 1)


def _min_flow_width(model: LatentFlowModel, t: int) -> int:
    return max(int(t), 1 << model.cfg.flow.n_scales)


def argmax_decode(model: LatentFlowModel, src_batch: TokenBatch, cfg: DecodeConfig | None = None) -> list[Hypothesis]:
    """One-pass decode from the deterministic mode path of the prior."""
    cfg = cfg or DecodeConfig(method="argmax")
    start = time.perf_counter()
    model.eval()
    with T.no_grad():
        src = model.encode_source(src_batch)
        lengths = length_candidates(model, src, src_batch.lengths, 1)[:, 0]
        t_max = _min_flow_width(model, lengths.max())
        mask = _length_masks(lengths, t_max)
        z = model.prior_sample(src, t_max, 0.0, None, mask)
        logits = model.decode_logits(z, mask, src)
        tokens = logits.data.argmax(axis=-1)
        scores = _model_scores(logits.data, tokens, lengths)
    per = (time.perf_counter() - start) / src_batch.size
    return [
        Hypothesis(trim_first_eos(tokens[i, : lengths[i]]), int(lengths[i]), float(scores[i]), per)
        for i in range(src_batch.size)
    ]


@dataclass
class _Candidates:
    tokens: np.ndarray  # [N, T] canonical rows: content, then EOS run to length
    lengths: np.ndarray  # [N] latent lengths
    raw_lengths: np.ndarray  # [N] content + 1
    group: np.ndarray  # [N] source sentence index
    model_score: np.ndarray  # [N] normalized log P(y|z,x)
    prior_logp: np.ndarray  # [N] log p(z|x) of the latent that produced the row
    src_rep: SourceEncoding


def generate_candidates(
    model: LatentFlowModel, src_batch: TokenBatch, l: int, r: int, temperature: float, rng: RandomSource
) -> _Candidates:
    """l*r samples per sentence, batched as one decoder pass via masks."""
    with T.no_grad():
        src = model.encode_source(src_batch)
        lengths_bl = length_candidates(model, src, src_batch.lengths, l)
        b = src_batch.size
        n_per = l * r
        lengths = np.repeat(lengths_bl, r, axis=1).reshape(-1)  # [B*l*r]
        group = np.repeat(np.arange(b), n_per)
        src_rep = _replicate_encoding(src, n_per)
        t_max = _min_flow_width(model, lengths.max())
        mask = _length_masks(lengths, t_max)
        z = model.prior_sample(src_rep, t_max, temperature, rng, mask)
        prior_logp = model.prior_log_density(z, src_rep, mask).data.copy()
        logits = model.decode_logits(z, mask, src_rep)
        raw_tokens = logits.data.argmax(axis=-1)
        scores = _model_scores(logits.data, raw_tokens, lengths)

    tokens = np.full_like(raw_tokens, PAD)
    raw_lengths = np.zeros(len(lengths), dtype=np.int64)
    for i in range(len(lengths)):
        content = trim_first_eos(raw_tokens[i, : lengths[i]])
        tokens[i, : len(content)] = content
        tokens[i, len(content) : lengths[i]] = EOS
        raw_lengths[i] = len(content) + 1
    return _Candidates(tokens, lengths, raw_lengths, group, scores, prior_logp, src_rep)


def _dedupe(cand: _Candidates, rows: np.ndarray) -> list[int]:
    """Drop duplicate contents within a sentence; prior density breaks ties."""
    best: dict[tuple, int] = {}
    for i in rows:
        key = tuple(trim_first_eos(cand.tokens[i]))
        j = best.get(key)
        if j is None or cand.prior_logp[i] > cand.prior_logp[j]:
            best[key] = int(i)
    return sorted(best.values())


def npd_decode(
    model: LatentFlowModel,
    rescorer: "ARTransformer",
    src_batch: TokenBatch,
    cfg: DecodeConfig,
    rng: RandomSource | None = None,
) -> list[Hypothesis]:
    """Sample l*r candidates, rerank with the autoregressive scorer."""
    if rescorer.tgt_vocab_size != model.tgt_vocab_size or rescorer.src_vocab_size != model.src_vocab_size:
        raise ValueError("rescorer vocabulary does not match the flow model")
    rng = rng or RandomSource(cfg.seed)
    start = time.perf_counter()
    model.eval()
    rescorer.eval()
    cand = generate_candidates(model, src_batch, cfg.l, cfg.r, cfg.temperature, rng.spawn("npd"))
    with T.no_grad():
        ar_src = _replicate_encoding(rescorer.encoder(src_batch), cfg.l * cfg.r)
    ar_scores = rescorer.score_rows(ar_src, cand.tokens, cand.raw_lengths)
    hyps: list[Hypothesis] = []
    for i in range(src_batch.size):
        rows = np.nonzero(cand.group == i)[0]
        keep = _dedupe(cand, rows)
        best = max(keep, key=lambda j: ar_scores[j])
        hyps.append(
            Hypothesis(trim_first_eos(cand.tokens[best]), int(cand.lengths[best]), float(ar_scores[best]))
        )
    per = (time.perf_counter() - start) / src_batch.size
    for h in hyps:
        h.latency_seconds = per
    return hyps


def iwd_decode(
    model: LatentFlowModel, src_batch: TokenBatch, cfg: DecodeConfig, rng: RandomSource | None = None
) -> list[Hypothesis]:
    """Rank candidates by a K-sample importance-weighted marginal estimate.

    For candidate y: P(y|x) ~= mean_k P(y|z_k, x) p(z_k|x) / q(z_k|y, x)
    with z_k drawn from the trained posterior at y; computed in log space.
    """
    rng = rng or RandomSource(cfg.seed)
    start = time.perf_counter()
    model.eval()
    cand = generate_candidates(model, src_batch, cfg.l, cfg.r, cfg.temperature, rng.spawn("iwd-gen"))
    n, t_max = cand.tokens.shape
    cand_batch = TokenBatch(cand.tokens, lengths=cand.lengths, raw_lengths=cand.raw_lengths)
    log_w = np.full((cfg.k_iwd, n), -np.inf)
    with T.no_grad():
        params = model.posterior_params(cand_batch, cand.src_rep, token_dropout_rate=0.0)
        for k in range(cfg.k_iwd):
            z, log_q = model.sample_posterior(params, cand_batch.pad_mask, rng.spawn(f"iwd{k}"))
            log_p = model.prior_log_density(z, cand.src_rep, cand_batch.pad_mask)
            logits = model.decode_logits(z, cand_batch.pad_mask, cand.src_rep)
            like = _model_scores(logits.data, cand.tokens, cand.lengths) * np.maximum(cand.lengths, 1)
            log_w[k] = like + log_p.data - log_q.data
    finite = np.isfinite(log_w)
    if not finite.all():
        warnings.warn(f"iwd: discarded {int((~finite).sum())} non-finite importance weight(s)")
        log_w = np.where(finite, log_w, -np.inf)
    m = log_w.max(axis=0)
    safe_m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        estimate = safe_m + np.log(np.exp(log_w - safe_m).sum(axis=0)) - math.log(cfg.k_iwd)

    hyps: list[Hypothesis] = []
    for i in range(src_batch.size):
        rows = np.nonzero(cand.group == i)[0]
        keep = [j for j in _dedupe(cand, rows) if np.isfinite(estimate[j])]
        if not keep:
            warnings.warn(f"iwd: sentence {i} had no finite-weight candidate; falling back to model score")
            keep = list(rows)
            best = max(keep, key=lambda j: cand.model_score[j])
        else:
            best = max(keep, key=lambda j: estimate[j])
        hyps.append(
            Hypothesis(trim_first_eos(cand.tokens[best]), int(cand.lengths[best]), float(estimate[best]))
        )
    per = (time.perf_counter() - start) / src_batch.size
    for h in hyps:
        h.latency_seconds = per
    return hyps


def decode(
    model: LatentFlowModel,
    src_batch: TokenBatch,
    cfg: DecodeConfig,
    rescorer: "ARTransformer | None" = None,
    rng: RandomSource | None = None,
) -> list[Hypothesis]:
    if cfg.method == "argmax":
        return argmax_decode(model, src_batch, cfg)
    if cfg.method == "npd":
        if rescorer is None:
            raise ValueError("npd decoding needs a trained autoregressive rescorer")
        return npd_decode(model, rescorer, src_batch, cfg, rng)
    return iwd_decode(model, src_batch, cfg, rng)


# -- autoregressive baseline ---------------------------------------------------


class ARTransformer(Module):
    """Causal encoder-decoder: next-token factorization, beam search.

    Serves as the NPD rescorer, the latency comparator, and the optional
    self-distillation teacher.
    """

    def __init__(self, src_vocab_size: int, tgt_vocab_size: int, cfg: "ARConfig", rng: RandomSource):
        super().__init__()
        self.cfg = cfg
        block = AttentionBlockConfig(cfg.d_model, cfg.d_hidden, cfg.n_heads, cfg.layers, cfg.dropout)
        self.encoder = SourceEncoder(src_vocab_size, block, rng.spawn("encoder"), cfg.max_len)
        self.embed = Embedding(tgt_vocab_size, cfg.d_model, rng.spawn("embed"))
        self.pos = PositionalEmbedding(cfg.max_len, cfg.d_model, rng.spawn("pos"))
        self.layers = [TransformerLayer(block, rng.spawn(f"layer{i}"), cross=True) for i in range(cfg.layers)]
        self.final_norm = LayerNorm(cfg.d_model)
        self.head = Linear(cfg.d_model, tgt_vocab_size, rng.spawn("head"))
        self.src_vocab_size = src_vocab_size
        self.tgt_vocab_size = tgt_vocab_size

    def logits(
        self,
        src: SourceEncoding,
        tgt_in: np.ndarray,
        tgt_in_mask: np.ndarray,
        rng: RandomSource | None = None,
    ) -> Tensor:
        x = T.add(self.embed(tgt_in), self.pos(tgt_in.shape[1]))
        bias = key_mask_bias(tgt_in_mask, x.dtype) + causal_bias(tgt_in.shape[1], x.dtype)
        mem_bias = key_mask_bias(src.pad_mask, x.dtype)
        for layer in self.layers:
            x = layer(x, bias, src.states, mem_bias, rng)
        return self.head(self.final_norm(x))

    @staticmethod
    def shift_inputs(tokens: np.ndarray, lengths: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(BOS + y[:-1], mask); y rows are content + one EOS + padding."""
        b, t = tokens.shape
        inp = np.full((b, t), PAD, dtype=np.int64)
        inp[:, 0] = BOS
        inp[:, 1:] = tokens[:, :-1]
        inp[inp == EOS] = PAD  # nothing follows EOS
        mask = _length_masks(lengths, t)
        return inp, mask

    def sequence_logprobs(self, src: SourceEncoding, tokens: np.ndarray, lengths: np.ndarray) -> np.ndarray:
        """Teacher-forced sum of per-step log-probs for each row."""
        inp, mask = self.shift_inputs(tokens, lengths)
        with T.no_grad():
            out = self.logits(src, inp, mask)
        logits = out.data
        m = logits.max(axis=-1, keepdims=True)
        logp = logits - (m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True)))
        picked = np.take_along_axis(logp, tokens[..., None], axis=-1)[..., 0]
        return (picked * mask).sum(axis=1)

    def score_rows(self, src: SourceEncoding, tokens: np.ndarray, raw_lengths: np.ndarray) -> np.ndarray:
        """Length-normalized log P(y|x) used by NPD reranking."""
        total = self.sequence_logprobs(src, tokens, raw_lengths)
        return total / np.maximum(raw_lengths, 1)

    def beam_decode(self, src_batch: TokenBatch, beam: int, max_len: int | None = None) -> list[Hypothesis]:
        """Batched beam search with length-normalized final scores."""
        if beam < 1:
            raise ValueError("beam must be >= 1")
        start = time.perf_counter()
        self.eval()
        b = src_batch.size
        max_len = max_len or min(self.cfg.max_len, int(src_batch.lengths.max()) + LENGTH_RANGE)
        with T.no_grad():
            src = self.encoder(src_batch)
            src_rep = _replicate_encoding(src, beam)
            tokens = np.full((b * beam, max_len), PAD, dtype=np.int64)
            scores = np.full((b, beam), -np.inf)
            scores[:, 0] = 0.0  # only one live beam before the first step
            alive = np.ones((b, beam), dtype=bool)
            finished: list[list[tuple[float, list[int]]]] = [[] for _ in range(b)]
            for step in range(max_len):
                inp = np.full((b * beam, step + 1), BOS, dtype=np.int64)
                if step > 0:
                    inp[:, 1:] = tokens[:, :step]
                mask = np.ones((b * beam, step + 1), dtype=bool)
                out = self.logits(src_rep, inp, mask)
                logits = out.data[:, -1, :]
                m = logits.max(axis=-1, keepdims=True)
                logp = logits - (m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True)))
                logp = logp.reshape(b, beam, -1)
                logp[:, :, PAD] = -np.inf
                logp[:, :, BOS] = -np.inf
                cand = scores[:, :, None] + np.where(alive[:, :, None], logp, -np.inf)
                flat = cand.reshape(b, -1)
                top = np.argsort(-flat, axis=1)[:, : beam]
                new_tokens = np.full_like(tokens, PAD)
                new_scores = np.full((b, beam), -np.inf)
                new_alive = np.zeros((b, beam), dtype=bool)
                v = flat.shape[1] // beam
                for i in range(b):
                    slot = 0
                    for idx in top[i]:
                        parent, tok = divmod(int(idx), v)
                        sc = float(flat[i, idx])
                        if not np.isfinite(sc):
                            continue
                        seq = tokens[i * beam + parent, :step].tolist() + [tok]
                        if tok == EOS:
                            finished[i].append((sc / (step + 1), seq[:-1]))
                            continue
                        if slot < beam:
                            new_tokens[i * beam + slot, : step + 1] = seq
                            new_scores[i, slot] = sc
                            new_alive[i, slot] = True
                            slot += 1
                tokens, scores, alive = new_tokens, new_scores, new_alive
                if not alive.any():
                    break
            hyps = []
            for i in range(b):
                pool = list(finished[i])
                for j in range(beam):  # unfinished beams compete too
                    if alive[i, j] and np.isfinite(scores[i, j]):
                        seq = tokens[i * beam + j][tokens[i * beam + j] != PAD].tolist()
                        if seq:
                            pool.append((float(scores[i, j]) / max(1, len(seq)), seq))
                if not pool:
                    pool = [(-np.inf, [])]
                sc, seq = max(pool, key=lambda x: x[0])
                hyps.append(Hypothesis(seq, len(seq) + 1, sc))
        per = (time.perf_counter() - start) / b
        for h in hyps:
            h.latency_seconds = per
        return hyps


@dataclass
class ARConfig:
    d_model: int = 64
    d_hidden: int = 128
    n_heads: int = 4
    layers: int = 2
    dropout: float = 0.0
    max_len: int = 256
