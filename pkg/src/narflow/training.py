"""Variational training: single-sample ELBO with annealed KL weight.

The KL weight sits at zero for `kl_zero_steps` updates (so encoder,
posterior and decoder settle before the flow sees meaningful targets),
then ramps linearly to one over `kl_ramp_steps`. Optimization is Adam
with AMSGrad, per-step exponential learning-rate decay, and global-norm
gradient clipping.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .backend import kernels
from .checkpoint import load_checkpoint, save_checkpoint
from .data import BatchIterator, ParallelCorpus, TokenBatch, Vocabulary
from .model import LatentFlowModel
from .nets import clamp_length_diff
from .rng import RandomSource
from .tensor import Tensor


@dataclass
class TrainConfig:
    lr_init: float = 5e-4
    lr_decay: float = 0.999995
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    amsgrad: bool = True
    grad_clip: float = 1.0
    label_smoothing: float = 0.1
    kl_zero_steps: int = 30_000
    kl_ramp_steps: int = 10_000
    batch_sentences: int = 2048
    token_dropout_rate: float = 0.2
    kl_samples: int = 1
    steps: int = 100_000
    log_interval: int = 50
    eval_interval: int = 1000
    ckpt_interval: int = 1000
    keep_best: int = 5
    seed: int = 1

    def __post_init__(self):
        if not (0 <= self.label_smoothing < 1 and 0 <= self.token_dropout_rate <= 1):
            raise ValueError("smoothing/dropout rates out of range")
        if self.kl_zero_steps < 0 or self.kl_ramp_steps < 0:
            raise ValueError("kl schedule steps must be >= 0")
        if not (0 < self.lr_decay <= 1 and self.lr_init > 0):
            raise ValueError("bad learning-rate schedule")


@dataclass
class ElboReport:
    step: int
    recon_loss: float
    kl_estimate: float
    kl_per_token: float
    kl_weight: float
    length_loss: float
    elbo: float

    def record(self) -> dict:
        return asdict(self)


def kl_weight(step: int, cfg: TrainConfig) -> float:
    """0 during the warm phase, then a linear ramp to 1, then 1."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step < cfg.kl_zero_steps:
        return 0.0
    if cfg.kl_ramp_steps == 0:
        return 1.0
    return min(1.0, (step - cfg.kl_zero_steps) / cfg.kl_ramp_steps)


def learning_rate(step: int, cfg: TrainConfig) -> float:
    return cfg.lr_init * cfg.lr_decay**step


def smoothed_cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray, smoothing: float) -> Tensor:
    """Label-smoothed NLL averaged over real (non-pad) positions."""
    logp = T.log_softmax(logits)
    nll = T.mul(T.gather_last(logp, targets), T.tensor(-1.0))
    if smoothing > 0.0:
        uniform = T.mul(T.reduce_mean(logp, axis=-1), T.tensor(-1.0))
        nll = T.add(T.mul(nll, T.tensor(1.0 - smoothing)), T.mul(uniform, T.tensor(smoothing)))
    m = mask.astype(logits.dtype)
    total = T.reduce_sum(T.mul(nll, T.Tensor(m)))
    return T.div(total, T.tensor(float(m.sum())))


def elbo_step(
    model: LatentFlowModel,
    src_batch: TokenBatch,
    tgt_batch: TokenBatch,
    step: int,
    cfg: TrainConfig,
    rng: RandomSource,
) -> tuple[Tensor, ElboReport]:
    """One training objective evaluation; returns (loss, report).

    loss = recon (per token) + kl_weight * kl (per sequence) + length loss.
    The report's elbo field is -(recon + kl_weight * kl) for exactly the
    quantities reported; the length loss is tracked separately.
    """
    w = kl_weight(step, cfg)
    src = model.encode_source(src_batch, rng.spawn("enc"))
    params = model.posterior_params(tgt_batch, src, cfg.token_dropout_rate, rng.spawn("post"))

    kl_terms = []
    recon = None
    for k in range(max(1, cfg.kl_samples)):
        z, log_q = model.sample_posterior(params, tgt_batch.pad_mask, rng.spawn(f"z{k}"))
        if w == 0.0:
            # the KL term carries no weight: evaluate it for the report
            # only, sparing the whole flow backward during the warm phase
            with T.no_grad():
                log_p = model.prior_log_density(z, src, tgt_batch.pad_mask)
                kl_terms.append(T.sub(log_q.detach(), log_p))
        else:
            log_p = model.prior_log_density(z, src, tgt_batch.pad_mask)
            kl_terms.append(T.sub(log_q, log_p))
        if k == 0:
            logits = model.decode_logits(z, tgt_batch.pad_mask, src, rng.spawn("dec"))
            recon = smoothed_cross_entropy(logits, tgt_batch.tokens, tgt_batch.pad_mask, cfg.label_smoothing)
    kl_seq = kl_terms[0]
    for extra in kl_terms[1:]:
        kl_seq = T.add(kl_seq, extra)
    kl_seq = T.div(kl_seq, T.tensor(float(len(kl_terms))))
    kl = T.reduce_mean(kl_seq)

    length_logits = model.predict_length_logits(src)
    diff = tgt_batch.raw_lengths - src_batch.raw_lengths
    labels = clamp_length_diff(diff)
    logp_len = T.log_softmax(length_logits)
    length_loss = T.reduce_mean(T.mul(T.gather_last(logp_len, labels), T.tensor(-1.0)))

    if w == 0.0:
        loss = T.add(recon, length_loss)
    else:
        loss = T.add(T.add(recon, T.mul(kl, T.tensor(w))), length_loss)
    if not np.isfinite(loss.data):
        raise FloatingPointError(
            f"non-finite loss at step {step}: recon={float(recon.data):.4g} "
            f"kl={float(kl.data):.4g} length={float(length_loss.data):.4g}"
        )

    kl_tok = float((kl_seq.data / np.maximum(tgt_batch.lengths, 1)).mean())
    report = ElboReport(
        step=step,
        recon_loss=float(recon.data),
        kl_estimate=float(kl.data),
        kl_per_token=kl_tok,
        kl_weight=w,
        length_loss=float(length_loss.data),
        elbo=-(float(recon.data) + w * float(kl.data)),
    )
    return loss, report


def clip_gradients(params: list[Tensor], max_norm: float) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = total**0.5
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= np.asarray(scale, dtype=p.grad.dtype)
    return norm


class AdamAmsgrad:
    def __init__(self, params: list[Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.vhat = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.cfg.adam_betas
        for p, m, v, vh in zip(self.params, self.m, self.v, self.vhat):
            if p.grad is None:
                continue
            kernels.adam_step(
                p.data.reshape(-1),
                np.ascontiguousarray(p.grad.reshape(-1)),
                m.reshape(-1),
                v.reshape(-1),
                vh.reshape(-1),
                lr,
                b1,
                b2,
                self.cfg.adam_eps,
                self.t,
                self.cfg.amsgrad,
            )


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_good: str | None):
        super().__init__(f"training diverged at step {step}; last good checkpoint: {last_good}")
        self.last_good = last_good


@dataclass
class TrainResult:
    final_checkpoint: str
    best_checkpoints: list[str]
    metric_log: str
    steps_done: int
    dev_bleu: float | None = None


def train(
    model: LatentFlowModel,
    corpus: ParallelCorpus,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    cfg: TrainConfig,
    out_dir,
    digest: str = "",
    dev_corpus: ParallelCorpus | None = None,
    eval_fn=None,
    max_src_len: int | None = None,
    max_tgt_len: int | None = None,
    callbacks: list | None = None,
) -> TrainResult:
    """Run the optimization loop; writes checkpoints and a metric log.

    eval_fn(model, dev_corpus) -> float is called every eval_interval to
    produce the dev score used for best-k tracking (greedy decode BLEU in
    the CLI). Deterministic for a fixed seed and thread count.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    log_path = out_dir / "metrics.jsonl"
    rng = RandomSource(cfg.seed)

    n_scales = model.cfg.flow.n_scales
    batches = BatchIterator(
        corpus, src_vocab, tgt_vocab, cfg.batch_sentences, n_scales, cfg.seed, max_src_len, max_tgt_len
    )

    opt = AdamAmsgrad(model.parameters(), cfg)
    model.train()

    best: list[tuple[float, str]] = []  # (dev score, path), best first
    last_good: str | None = None
    dev_score: float | None = None
    t0 = time.perf_counter()

    def save(step: int) -> str:
        path = str(ckpt_dir / f"step{step:08d}.nckpt")
        save_checkpoint(path, model.state_arrays(), digest)
        return path

    step = 0
    epoch = 0
    with open(log_path, "a", encoding="utf-8") as log:
        while step < cfg.steps:
            made_progress = False
            for src_batch, tgt_batch in batches.epoch(epoch):
                made_progress = True
                if step == 0 and not model.flow.actnorm_initialized:
                    model.initialize_actnorm(src_batch, tgt_batch, rng.spawn("init"))
                try:
                    loss, report = elbo_step(model, src_batch, tgt_batch, step, cfg, rng.spawn(f"step{step}"))
                except FloatingPointError:
                    raise TrainingDiverged(step, last_good)
                model.zero_grad()
                loss.backward()
                clip_gradients(model.parameters(), cfg.grad_clip)
                opt.step(learning_rate(step, cfg))
                step += 1

                if step % cfg.log_interval == 0 or step == cfg.steps:
                    rec = report.record()
                    rec["lr"] = learning_rate(step - 1, cfg)
                    rec["dev_bleu"] = dev_score
                    rec["wall_time"] = round(time.perf_counter() - t0, 3)
                    log.write(json.dumps(rec) + "\n")
                    log.flush()
                if eval_fn is not None and dev_corpus is not None and step % cfg.eval_interval == 0:
                    model.eval()
                    dev_score = float(eval_fn(model, dev_corpus))
                    model.train()
                    path = save(step)
                    last_good = path
                    best.append((dev_score, path))
                    best.sort(key=lambda x: -x[0])
                    best[:] = best[: cfg.keep_best]
                elif step % cfg.ckpt_interval == 0:
                    last_good = save(step)
                for cb in callbacks or []:
                    cb(step, model, report)
                if step >= cfg.steps:
                    break
            epoch += 1
            if not made_progress:
                raise ValueError("corpus produced no batches")

    final = save(step)
    manifest = {
        "final": final,
        "best": [{"dev_score": s, "path": p} for s, p in best],
        "digest": digest,
        "steps": step,
    }
    (out_dir / "best.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return TrainResult(final, [p for _, p in best], str(log_path), step, dev_score)


def train_ar(
    ar_model,
    corpus: ParallelCorpus,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    cfg: TrainConfig,
    out_dir,
    digest: str = "",
    dev_corpus: ParallelCorpus | None = None,
    eval_fn=None,
    max_src_len: int | None = None,
    max_tgt_len: int | None = None,
) -> TrainResult:
    """Fit the autoregressive baseline with teacher-forced cross-entropy."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    log_path = out_dir / "metrics.jsonl"
    rng = RandomSource(cfg.seed)
    batches = BatchIterator(corpus, src_vocab, tgt_vocab, cfg.batch_sentences, 1, cfg.seed, max_src_len, max_tgt_len)
    opt = AdamAmsgrad(ar_model.parameters(), cfg)
    ar_model.train()
    best: list[tuple[float, str]] = []
    last_good: str | None = None
    dev_score: float | None = None
    t0 = time.perf_counter()

    def save(step: int) -> str:
        path = str(ckpt_dir / f"step{step:08d}.nckpt")
        save_checkpoint(path, ar_model.state_arrays(), digest)
        return path

    step = 0
    epoch = 0
    with open(log_path, "a", encoding="utf-8") as log:
        while step < cfg.steps:
            for src_batch, tgt_batch in batches.epoch(epoch):
                step_rng = rng.spawn(f"step{step}")
                src = ar_model.encoder(src_batch, step_rng.spawn("enc"))
                inp, mask = ar_model.shift_inputs(tgt_batch.tokens, tgt_batch.lengths)
                logits = ar_model.logits(src, inp, mask, step_rng.spawn("dec"))
                loss = smoothed_cross_entropy(logits, tgt_batch.tokens, mask, cfg.label_smoothing)
                if not np.isfinite(loss.data):
                    raise TrainingDiverged(step, last_good)
                ar_model.zero_grad()
                loss.backward()
                clip_gradients(ar_model.parameters(), cfg.grad_clip)
                opt.step(learning_rate(step, cfg))
                step += 1
                if step % cfg.log_interval == 0 or step == cfg.steps:
                    log.write(
                        json.dumps(
                            {
                                "step": step,
                                "loss": float(loss.data),
                                "lr": learning_rate(step - 1, cfg),
                                "dev_bleu": dev_score,
                                "wall_time": round(time.perf_counter() - t0, 3),
                            }
                        )
                        + "\n"
                    )
                    log.flush()
                if eval_fn is not None and dev_corpus is not None and step % cfg.eval_interval == 0:
                    ar_model.eval()
                    dev_score = float(eval_fn(ar_model, dev_corpus))
                    ar_model.train()
                    path = save(step)
                    last_good = path
                    best.append((dev_score, path))
                    best.sort(key=lambda x: -x[0])
                    best[:] = best[: cfg.keep_best]
                elif step % cfg.ckpt_interval == 0:
                    last_good = save(step)
                if step >= cfg.steps:
                    break
            epoch += 1
    final = save(step)
    manifest = {"final": final, "best": [{"dev_score": s, "path": p} for s, p in best], "digest": digest, "steps": step}
    (out_dir / "best.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return TrainResult(final, [p for _, p in best], str(log_path), step, dev_score)


def average_checkpoints(paths: list, out_path) -> None:
    """Arithmetic parameter mean across checkpoints sharing one digest."""
    if not paths:
        raise ValueError("no checkpoints to average")
    arrays, digest = load_checkpoint(paths[0])
    acc = {k: v.astype(np.float64) for k, v in arrays.items()}
    for p in paths[1:]:
        arr, d = load_checkpoint(p)
        if d != digest:
            raise ValueError(f"checkpoint digest mismatch: {p}")
        if set(arr) != set(acc):
            raise ValueError(f"checkpoint parameter names differ: {p}")
        for k, v in arr.items():
            acc[k] += v
    n = len(paths)
    out = {k: (v / n).astype(arrays[k].dtype) for k, v in acc.items()}
    save_checkpoint(out_path, out, digest)
