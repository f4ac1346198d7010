"""Attention-based sequence networks.

Four consumers share these blocks: the source encoder, the diagonal-Gaussian
posterior (zero-initialized output head, token-level dropout), the
non-autoregressive decoder (no causal mask anywhere), and the
source-to-target length-difference classifier.

All stochastic passes take an explicit RandomSource; passing None (or eval
mode) makes the pass a pure function of inputs and parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import TokenBatch
from .module import Module
from .rng import RandomSource
from .tensor import Tensor

NEG_INF = float("-inf")

LENGTH_RANGE = 20  # classifier covers differences in [-20, 20]
N_LENGTH_CLASSES = 2 * LENGTH_RANGE + 1


@dataclass
class AttentionBlockConfig:
    d_model: int = 64
    d_hidden: int = 128
    n_heads: int = 4
    n_layers: int = 2
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")


@dataclass
class SourceEncoding:
    states: Tensor  # [B, T', d_model]
    pad_mask: np.ndarray  # [B, T'] bool, True = real token

    @property
    def size(self) -> int:
        return self.states.shape[0]


@dataclass
class GaussianParams:
    mu: Tensor  # [B, T, d_z]
    log_var: Tensor  # [B, T, d_z]


def key_mask_bias(pad_mask: np.ndarray, dtype) -> np.ndarray:
    """[B, Tk] bool -> [B, 1, 1, Tk] additive bias, -inf at padding."""
    bias = np.zeros(pad_mask.shape, dtype=dtype)
    bias[~pad_mask] = NEG_INF
    return bias[:, None, None, :]


def causal_bias(t: int, dtype) -> np.ndarray:
    bias = np.full((t, t), NEG_INF, dtype=dtype)
    return np.triu(bias, k=1)[None, None, :, :]


def _dropout(x: Tensor, rate: float, rng: RandomSource | None, training: bool) -> Tensor:
    if rate <= 0.0 or not training or rng is None:
        return x
    keep = (~rng.bernoulli(x.shape, rate)).astype(x.dtype) / (1.0 - rate)
    return T.mul(x, T.Tensor(keep))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: RandomSource, zero_init: bool = False):
        super().__init__()
        if zero_init:
            self.weight = T.zeros((d_in, d_out), requires_grad=True)
        else:
            self.weight = T.Tensor(rng.normal((d_in, d_out), std=0.02), requires_grad=True)
        self.bias = T.zeros((d_out,), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.affine(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int):
        super().__init__()
        self.gain = T.ones((d,), requires_grad=True)
        self.bias = T.zeros((d,), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: RandomSource):
        super().__init__()
        self.table = T.Tensor(rng.normal((n, d), std=0.02), requires_grad=True)

    def __call__(self, ids: np.ndarray) -> Tensor:
        return T.embedding(self.table, ids)


class MultiHeadAttention(Module):
    def __init__(self, cfg: AttentionBlockConfig, rng: RandomSource, memory_dim: int | None = None):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.d_head = cfg.d_model // cfg.n_heads
        self.dropout_rate = cfg.dropout_rate
        d_mem = memory_dim or cfg.d_model
        self.wq = Linear(cfg.d_model, cfg.d_model, rng.spawn("q"))
        self.wk = Linear(d_mem, cfg.d_model, rng.spawn("k"))
        self.wv = Linear(d_mem, cfg.d_model, rng.spawn("v"))
        self.wo = Linear(cfg.d_model, cfg.d_model, rng.spawn("o"))

    def _heads(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return T.transpose(T.reshape(x, (b, t, self.n_heads, self.d_head)), (0, 2, 1, 3))

    def __call__(
        self,
        query: Tensor,
        memory: Tensor,
        bias: np.ndarray,
        rng: RandomSource | None = None,
    ) -> Tensor:
        b, tq, d = query.shape
        q = self._heads(self.wq(query))
        k = self._heads(self.wk(memory))
        v = self._heads(self.wv(memory))
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2)))
        scores = T.mul(scores, T.tensor(1.0 / math.sqrt(self.d_head)))
        probs = T.softmax(scores, mask_additive=bias)
        probs = _dropout(probs, self.dropout_rate, rng, self.training)
        ctx = T.matmul(probs, v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, tq, d))
        return self.wo(ctx)


class FeedForward(Module):
    def __init__(self, cfg: AttentionBlockConfig, rng: RandomSource):
        super().__init__()
        self.dropout_rate = cfg.dropout_rate
        self.up = Linear(cfg.d_model, cfg.d_hidden, rng.spawn("up"))
        self.down = Linear(cfg.d_hidden, cfg.d_model, rng.spawn("down"))

    def __call__(self, x: Tensor, rng: RandomSource | None = None) -> Tensor:
        h = T.relu(self.up(x))
        h = _dropout(h, self.dropout_rate, rng, self.training)
        return self.down(h)


class TransformerLayer(Module):
    """Pre-norm block: self-attention, optional inter-attention, feed-forward."""

    def __init__(self, cfg: AttentionBlockConfig, rng: RandomSource, cross: bool, memory_dim: int | None = None):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg, rng.spawn("self"))
        self.norm1 = LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg, rng.spawn("cross"), memory_dim) if cross else None
        self.norm2 = LayerNorm(cfg.d_model) if cross else None
        self.ffn = FeedForward(cfg, rng.spawn("ffn"))
        self.norm3 = LayerNorm(cfg.d_model)
        self.dropout_rate = cfg.dropout_rate

    def __call__(
        self,
        x: Tensor,
        self_bias: np.ndarray,
        memory: Tensor | None = None,
        memory_bias: np.ndarray | None = None,
        rng: RandomSource | None = None,
    ) -> Tensor:
        normed = self.norm1(x)
        h = self.self_attn(normed, normed, self_bias, rng)
        x = T.add(x, _dropout(h, self.dropout_rate, rng, self.training))
        if self.cross_attn is not None:
            h = self.cross_attn(self.norm2(x), memory, memory_bias, rng)
            x = T.add(x, _dropout(h, self.dropout_rate, rng, self.training))
        h = self.ffn(self.norm3(x), rng)
        return T.add(x, _dropout(h, self.dropout_rate, rng, self.training))


class PositionalEmbedding(Module):
    def __init__(self, max_len: int, d: int, rng: RandomSource):
        super().__init__()
        self.max_len = max_len
        self.table = T.Tensor(rng.normal((max_len, d), std=0.02), requires_grad=True)

    def __call__(self, t: int) -> Tensor:
        if t > self.max_len:
            raise ValueError(f"sequence length {t} exceeds positional table ({self.max_len})")
        return T.take(self.table, (slice(0, t),))


class SourceEncoder(Module):
    def __init__(self, vocab_size: int, cfg: AttentionBlockConfig, rng: RandomSource, max_len: int = 256):
        super().__init__()
        self.embed = Embedding(vocab_size, cfg.d_model, rng.spawn("embed"))
        self.pos = PositionalEmbedding(max_len, cfg.d_model, rng.spawn("pos"))
        self.layers = [TransformerLayer(cfg, rng.spawn(f"layer{i}"), cross=False) for i in range(cfg.n_layers)]
        self.final_norm = LayerNorm(cfg.d_model)

    def __call__(self, batch: TokenBatch, rng: RandomSource | None = None) -> SourceEncoding:
        if batch.size == 0:
            raise ValueError("empty source batch")
        x = T.add(self.embed(batch.tokens), self.pos(batch.max_len))
        bias = key_mask_bias(batch.pad_mask, x.dtype)
        for layer in self.layers:
            x = layer(x, bias, rng=rng)
        return SourceEncoding(self.final_norm(x), batch.pad_mask)


class PosteriorNet(Module):
    """q(z | y, x): per-position diagonal Gaussian.

    The mean/log-variance head starts at exactly zero, so an untrained
    posterior is the standard normal for every input. Token dropout swaps
    whole target-token embeddings for a learned mask vector (positions and
    source context survive), pushing latents toward contextual content.
    """

    def __init__(self, vocab_size: int, d_z: int, cfg: AttentionBlockConfig, rng: RandomSource, max_len: int = 256):
        super().__init__()
        self.embed = Embedding(vocab_size, cfg.d_model, rng.spawn("embed"))
        self.pos = PositionalEmbedding(max_len, cfg.d_model, rng.spawn("pos"))
        self.mask_embed = T.Tensor(rng.spawn("mask").normal((cfg.d_model,), std=0.02), requires_grad=True)
        self.layers = [TransformerLayer(cfg, rng.spawn(f"layer{i}"), cross=True) for i in range(cfg.n_layers)]
        self.final_norm = LayerNorm(cfg.d_model)
        self.head = Linear(cfg.d_model, 2 * d_z, rng.spawn("head"), zero_init=True)
        self.d_z = d_z

    def __call__(
        self,
        target: TokenBatch,
        src: SourceEncoding,
        token_dropout_rate: float = 0.0,
        rng: RandomSource | None = None,
    ) -> GaussianParams:
        if not 0.0 <= token_dropout_rate <= 1.0:
            raise ValueError(f"token_dropout_rate must be in [0, 1], got {token_dropout_rate}")
        x = self.embed(target.tokens)
        if token_dropout_rate > 0.0 and self.training and rng is not None:
            drop = rng.bernoulli((target.size, target.max_len), token_dropout_rate)
            keep = T.Tensor((~drop).astype(x.dtype)[:, :, None])
            dropped = T.Tensor(drop.astype(x.dtype)[:, :, None])
            x = T.add(T.mul(x, keep), T.mul(T.reshape(self.mask_embed, (1, 1, -1)), dropped))
        x = T.add(x, self.pos(target.max_len))
        self_bias = key_mask_bias(target.pad_mask, x.dtype)
        mem_bias = key_mask_bias(src.pad_mask, x.dtype)
        for layer in self.layers:
            x = layer(x, self_bias, src.states, mem_bias, rng)
        out = self.head(self.final_norm(x))
        mu, log_var = T.split(out, [self.d_z, self.d_z], axis=-1)
        return GaussianParams(mu, log_var)


def sample_posterior(params: GaussianParams, pad_mask: np.ndarray, rng: RandomSource) -> tuple[Tensor, Tensor]:
    """Reparameterized draw z = mu + exp(log_var/2) * eps and its log q.

    log q sums the per-element Gaussian log-density over real (non-pad)
    positions only; gradients reach mu and log_var through both z and the
    density value. Returns (z, log_q[B]).
    """
    eps = rng.normal(params.mu.shape, dtype=params.mu.dtype)
    std = T.exp(T.mul(params.log_var, T.tensor(0.5)))
    z = T.add(params.mu, T.mul(std, T.Tensor(eps)))
    # With z realized from this q, the total per-element log-density is
    # -(eps^2 + log_var + log 2 pi) / 2; mu terms cancel exactly.
    const = math.log(2.0 * math.pi)
    per_elem = T.mul(T.add(T.add(T.Tensor(eps * eps), params.log_var), T.tensor(const)), T.tensor(-0.5))
    mask = pad_mask.astype(params.mu.dtype)[:, :, None]
    log_q = T.reduce_sum(T.mul(per_elem, T.Tensor(mask)), axis=(1, 2))
    return z, log_q


def gaussian_log_q(z: Tensor, params: GaussianParams, pad_mask: np.ndarray) -> Tensor:
    """log q(z | y, x) for an arbitrary z (no reparameterization pairing)."""
    const = math.log(2.0 * math.pi)
    var = T.exp(params.log_var)
    diff = T.sub(z, params.mu)
    per_elem = T.mul(
        T.add(T.add(T.div(T.mul(diff, diff), var), params.log_var), T.tensor(const)), T.tensor(-0.5)
    )
    mask = pad_mask.astype(z.dtype)[:, :, None]
    return T.reduce_sum(T.mul(per_elem, T.Tensor(mask)), axis=(1, 2))


class DecoderNet(Module):
    """P(y | z, x): position-wise logits from the latent sequence.

    Attends over all latent positions (no causal mask) and the source;
    never sees target tokens. forward_count instruments the one-pass
    decoding property.
    """

    def __init__(self, vocab_size: int, d_z: int, cfg: AttentionBlockConfig, rng: RandomSource, max_len: int = 256):
        super().__init__()
        self.bridge = Linear(d_z, cfg.d_model, rng.spawn("bridge"))
        self.pos = PositionalEmbedding(max_len, cfg.d_model, rng.spawn("pos"))
        self.layers = [TransformerLayer(cfg, rng.spawn(f"layer{i}"), cross=True) for i in range(cfg.n_layers)]
        self.final_norm = LayerNorm(cfg.d_model)
        self.head = Linear(cfg.d_model, vocab_size, rng.spawn("head"))
        self.forward_count = 0

    def __call__(
        self,
        z: Tensor,
        tgt_pad_mask: np.ndarray,
        src: SourceEncoding,
        rng: RandomSource | None = None,
    ) -> Tensor:
        if z.shape[0] != src.size:
            raise ValueError(f"latent batch {z.shape[0]} does not match source batch {src.size}")
        self.forward_count += 1
        x = T.add(self.bridge(z), self.pos(z.shape[1]))
        self_bias = key_mask_bias(tgt_pad_mask, x.dtype)
        mem_bias = key_mask_bias(src.pad_mask, x.dtype)
        for layer in self.layers:
            x = layer(x, self_bias, src.states, mem_bias, rng)
        return self.head(self.final_norm(x))


class LengthPredictor(Module):
    """Classifies the target-source length difference in [-20, 20].

    Source states are max-pooled over real positions, then projected to 41
    logits; class k means difference k - 20.
    """

    def __init__(self, d_model: int, rng: RandomSource):
        super().__init__()
        self.proj = Linear(d_model, N_LENGTH_CLASSES, rng.spawn("proj"))

    def __call__(self, src: SourceEncoding) -> Tensor:
        neg = np.zeros(src.pad_mask.shape, dtype=src.states.dtype)
        neg[~src.pad_mask] = NEG_INF
        pooled = T.reduce_max(T.add(src.states, T.Tensor(neg[:, :, None])), axis=1)
        return self.proj(pooled)


def clamp_length_diff(diff: np.ndarray) -> np.ndarray:
    return np.clip(diff, -LENGTH_RANGE, LENGTH_RANGE) + LENGTH_RANGE


def top_length_classes(logits: np.ndarray, l: int) -> np.ndarray:
    """Top-l classes by probability; ties prefer the smaller |difference|."""
    order = sorted(range(N_LENGTH_CLASSES), key=lambda c: (-logits[c], abs(c - LENGTH_RANGE)))
    return np.array(order[:l], dtype=np.int64)
