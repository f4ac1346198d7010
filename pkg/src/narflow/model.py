"""Assembly of the full latent-flow sequence model.

Pieces: source encoder, diagonal-Gaussian posterior, non-autoregressive
decoder, length-difference classifier, and the conditional flow prior.
Training draws z from the posterior and scores it under the prior;
generation draws z from the prior and reads tokens off position-wise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import TokenBatch
from .flow import Flow, FlowConfig
from .module import Module
from .nets import (
    AttentionBlockConfig,
    DecoderNet,
    GaussianParams,
    LengthPredictor,
    PosteriorNet,
    SourceEncoder,
    SourceEncoding,
    sample_posterior,
)
from .rng import RandomSource
from .tensor import Tensor, ensure_ops


@dataclass
class ModelConfig:
    d_model: int = 64
    d_hidden: int = 128
    n_heads: int = 4
    enc_layers: int = 2
    post_layers: int = 2
    dec_layers: int = 2
    d_z: int = 64
    dropout: float = 0.0
    token_dropout: float = 0.2
    max_len: int = 256
    flow: FlowConfig = field(default_factory=FlowConfig)

    def __post_init__(self):
        if self.flow.d_z != self.d_z:
            raise ValueError(f"flow d_z {self.flow.d_z} != model d_z {self.d_z}")
        if self.flow.cond_dim != self.d_model:
            raise ValueError(
                f"flow cond_dim {self.flow.cond_dim} must match encoder width {self.d_model}"
            )

    def block(self, n_layers: int) -> AttentionBlockConfig:
        return AttentionBlockConfig(self.d_model, self.d_hidden, self.n_heads, n_layers, self.dropout)


class LatentFlowModel(Module):
    def __init__(self, src_vocab_size: int, tgt_vocab_size: int, cfg: ModelConfig, rng: RandomSource):
        super().__init__()
        ensure_ops(
            ["matmul", "softmax_masked", "layer_norm", "embedding", "gaussian_sampling", "slogdet", "split"]
        )
        self.cfg = cfg
        self.encoder = SourceEncoder(src_vocab_size, cfg.block(cfg.enc_layers), rng.spawn("encoder"), cfg.max_len)
        self.posterior = PosteriorNet(
            tgt_vocab_size, cfg.d_z, cfg.block(cfg.post_layers), rng.spawn("posterior"), cfg.max_len
        )
        self.decoder = DecoderNet(
            tgt_vocab_size, cfg.d_z, cfg.block(cfg.dec_layers), rng.spawn("decoder"), cfg.max_len
        )
        self.length_head = LengthPredictor(cfg.d_model, rng.spawn("length"))
        self.flow = Flow(cfg.flow, rng.spawn("flow"))
        self.src_vocab_size = src_vocab_size
        self.tgt_vocab_size = tgt_vocab_size

    # -- pieces, in spec order -------------------------------------------

    def encode_source(self, batch: TokenBatch, rng: RandomSource | None = None) -> SourceEncoding:
        return self.encoder(batch, rng)

    def posterior_params(
        self,
        target: TokenBatch,
        src: SourceEncoding,
        token_dropout_rate: float | None = None,
        rng: RandomSource | None = None,
    ) -> GaussianParams:
        rate = self.cfg.token_dropout if token_dropout_rate is None else token_dropout_rate
        return self.posterior(target, src, rate, rng)

    def sample_posterior(
        self, params: GaussianParams, pad_mask: np.ndarray, rng: RandomSource
    ) -> tuple[Tensor, Tensor]:
        return sample_posterior(params, pad_mask, rng)

    def decode_logits(
        self, z: Tensor, tgt_pad_mask: np.ndarray, src: SourceEncoding, rng: RandomSource | None = None
    ) -> Tensor:
        return self.decoder(z, tgt_pad_mask, src, rng)

    def predict_length_logits(self, src: SourceEncoding) -> Tensor:
        return self.length_head(src)

    def prior_log_density(self, z: Tensor, src: SourceEncoding, pad_mask: np.ndarray) -> Tensor:
        return self.flow.log_density(z, src, pad_mask)

    def prior_sample(
        self,
        src: SourceEncoding,
        t: int,
        temperature: float,
        rng: RandomSource | None,
        pad_mask: np.ndarray | None = None,
    ) -> Tensor:
        return self.flow.sample(src, t, temperature, rng, pad_mask)

    # -- bootstrap ----------------------------------------------------------

    def initialize_actnorm(self, src_batch: TokenBatch, tgt_batch: TokenBatch, rng: RandomSource) -> None:
        """One-time data-dependent actnorm init from a posterior sample."""
        with T.no_grad():
            src = self.encode_source(src_batch)
            params = self.posterior_params(tgt_batch, src, token_dropout_rate=0.0)
            z, _ = self.sample_posterior(params, tgt_batch.pad_mask, rng.spawn("actnorm-init"))
            self.flow.f_transform(z, src, tgt_batch.pad_mask, init_actnorm=True)
