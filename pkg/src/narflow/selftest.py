"""Built-in verification oracles.

Everything here recomputes a quantity through an independent route:
finite-difference Jacobians against accumulated log-determinants, grid
quadrature against the density and likelihood machinery, and exact layer
round-trips. The CLI selftest drives these; the test suite calls them
directly. All oracles run in float64.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import build_vocab, make_batch, synth_corpus
from .flow import Flow, FlowConfig
from .gradcheck import finite_difference_check
from .model import LatentFlowModel, ModelConfig
from .nets import SourceEncoding
from .rng import RandomSource
from .training import TrainConfig, elbo_step, kl_weight, learning_rate


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


# -- construction helpers ------------------------------------------------------


def make_flow(
    d_z: int = 8,
    n_scales: int = 2,
    steps=(4, 4),
    heads: int = 2,
    seed: int = 0,
    randomize: bool = True,
    split_cycle=("time", "feat_cont", "feat_alt"),
) -> Flow:
    cfg = FlowConfig(
        d_z=d_z,
        n_scales=n_scales,
        steps_per_scale=tuple(steps),
        n_linear_heads=heads,
        nn_d_model=16,
        nn_d_hidden=32,
        nn_n_heads=2,
        cond_dim=16,
        split_cycle=tuple(split_cycle),
        max_len=128,
    )
    rng = RandomSource(seed)
    flow = Flow(cfg, rng.spawn("flow"))
    if randomize:
        # Zero-initialized coupling heads make every coupling the identity;
        # stress tests want non-trivial transforms, so perturb them, then
        # run the real data-dependent actnorm init on a random batch. That
        # is the state 'random parameters post actnorm-init' means, and it
        # keeps activations whitened: synthetic per-layer scale draws
        # compound into magnitude drift no initialization can produce.
        for name, t in flow.named_parameters():
            if name.endswith("head/weight") or name.endswith("head/bias"):
                t.data = rng.spawn("rand-" + name).normal(t.data.shape, std=0.08).astype(t.data.dtype)
        init_rng = rng.spawn("actnorm-init")
        t_init = 8 * cfg.divisor
        src = SourceEncoding(
            T.Tensor(init_rng.spawn("src").normal((16, 5, cfg.cond_dim))),
            np.ones((16, 5), dtype=bool),
        )
        z = T.Tensor(init_rng.spawn("z").normal((16, t_init, cfg.d_z), std=1.4))
        with T.no_grad():
            flow.f_transform(z, src, np.ones((16, t_init), dtype=bool), init_actnorm=True)
    else:
        flow.mark_actnorm_initialized()
    return flow


def make_source(batch: int, t_src: int, d_model: int, seed: int = 0) -> SourceEncoding:
    rng = RandomSource(seed).spawn("src")
    return SourceEncoding(T.Tensor(rng.normal((batch, t_src, d_model))), np.ones((batch, t_src), dtype=bool))


def tiny_scalar_model(seed: int = 0, randomize: bool = True) -> tuple[LatentFlowModel, object, object]:
    """d_z=1, T=2 model whose marginal likelihood is quadrature-tractable."""
    fc = FlowConfig(
        d_z=1,
        n_scales=1,
        steps_per_scale=(2,),
        n_linear_heads=1,
        nn_d_model=12,
        nn_d_hidden=16,
        nn_n_heads=2,
        cond_dim=12,
        split_cycle=("time",),
        max_len=32,
    )
    mc = ModelConfig(
        d_model=12,
        d_hidden=16,
        n_heads=2,
        enc_layers=1,
        post_layers=1,
        dec_layers=1,
        d_z=1,
        token_dropout=0.0,
        max_len=32,
        flow=fc,
    )
    corpus = synth_corpus("copy", 6, (1, 1), 64, seed=seed)
    sv, tv = build_vocab(corpus)
    rng = RandomSource(seed)
    model = LatentFlowModel(len(sv), len(tv), mc, rng.spawn("model"))
    if randomize:
        for name, t in model.named_parameters():
            if "head" in name and float(np.abs(t.data).max()) == 0.0:
                t.data = rng.spawn("r-" + name).normal(t.data.shape, std=0.3).astype(t.data.dtype)
    src, tgt, _ = make_batch(corpus.pairs[:16], sv, tv, num_scales=1)
    model.initialize_actnorm(src, tgt, rng.spawn("init"))
    return model, (corpus, sv, tv), (src, tgt)


# -- oracles -------------------------------------------------------------------


def layer_roundtrip_errors(flow: Flow, z: np.ndarray, src: SourceEncoding, pad_mask: np.ndarray) -> dict[str, float]:
    """Forward through every layer, invert each one, report max abs error.

    Scale boundaries (factor-out + squeeze) are exact reshapes and are
    folded into the walk. Keys are layer names, so a broken inverse is
    named directly.
    """
    from .flow import factor_out, squeeze, unsqueeze, unfactor

    errors: dict[str, float] = {}
    h = T.Tensor(np.array(z))
    mask = pad_mask
    with T.no_grad():
        for s, steps in enumerate(flow.scales):
            for step in steps:
                for name, layer in (
                    (f"{step.name}/actnorm", step.actnorm),
                    (f"{step.name}/linear", step.linear),
                    (f"{step.name}/coupling", step.coupling),
                ):
                    if layer is step.coupling:
                        out, _ = layer.forward(h, mask, src)
                        back, _ = layer.inverse(out, mask, src)
                    else:
                        out, _ = layer.forward(h, mask)
                        back, _ = layer.inverse(out, mask)
                    errors[name] = float(np.abs(back.data - h.data).max())
                    h = out
            if s < flow.cfg.n_scales - 1:
                kept, removed = factor_out(h)
                again = unfactor(kept, removed)
                errors[f"scale{s}/factor_out"] = float(np.abs(again.data - h.data).max())
                sq, sq_mask = squeeze(kept, mask)
                unsq, _ = unsqueeze(sq, sq_mask)
                errors[f"scale{s}/squeeze"] = float(np.abs(unsq.data - kept.data).max())
                h, mask = sq, sq_mask
    return errors


def full_roundtrip_error(flow: Flow, z: np.ndarray, src: SourceEncoding, pad_mask: np.ndarray) -> float:
    with T.no_grad():
        state = flow.f_transform(T.Tensor(np.array(z)), src, pad_mask)
        back, _ = flow.g_transform(state.h, state.factored_out, src, flow.scale_masks(pad_mask))
    return float(np.abs(back.data - z).max())


def numeric_jacobian_logdet(fwd, z0: np.ndarray, eps: float = 1e-6) -> float:
    """slogdet of the finite-difference Jacobian of a flat map fwd(z)->u."""
    n = z0.size
    flat = z0.reshape(-1)
    jac = np.zeros((n, n))
    for i in range(n):
        zp = flat.copy()
        zp[i] += eps
        zm = flat.copy()
        zm[i] -= eps
        jac[:, i] = (fwd(zp) - fwd(zm)) / (2 * eps)
    sign, logabs = np.linalg.slogdet(jac)
    if sign == 0:
        raise FloatingPointError("numeric Jacobian is singular")
    return float(logabs)


def flow_fwd_flat(flow: Flow, src: SourceEncoding, pad_mask: np.ndarray, shape):
    """Flat wrapper around the f direction, concatenating all outputs."""

    def fwd(zflat: np.ndarray) -> np.ndarray:
        with T.no_grad():
            state = flow.f_transform(T.Tensor(zflat.reshape(shape)), src, pad_mask)
        parts = [state.h.data.reshape(-1)] + [p.data.reshape(-1) for p, _ in state.factored_out]
        return np.concatenate(parts)

    return fwd


def flow_accumulated_logdet(flow: Flow, z: np.ndarray, src: SourceEncoding, pad_mask: np.ndarray) -> float:
    with T.no_grad():
        state = flow.f_transform(T.Tensor(np.array(z)), src, pad_mask)
    return float(state.log_det.data[0])


# -- quadrature ----------------------------------------------------------------


def _chunked_rows(n: int, chunk: int):
    for lo in range(0, n, chunk):
        yield lo, min(n, lo + chunk)


def _replicate_src(src: SourceEncoding, n: int) -> SourceEncoding:
    return SourceEncoding(
        T.Tensor(np.repeat(src.states.data, n, axis=0)), np.repeat(src.pad_mask, n, axis=0)
    )


def grid_2d(half_width: float, n: int, center=(0.0, 0.0), scale=(1.0, 1.0)):
    """Uniform 2-d grid (points [n*n, 2], cell area) around a center."""
    ax0 = np.linspace(center[0] - half_width * scale[0], center[0] + half_width * scale[0], n)
    ax1 = np.linspace(center[1] - half_width * scale[1], center[1] + half_width * scale[1], n)
    area = (ax0[1] - ax0[0]) * (ax1[1] - ax1[0])
    g0, g1 = np.meshgrid(ax0, ax1, indexing="ij")
    return np.stack([g0.reshape(-1), g1.reshape(-1)], axis=1), area


def prior_density_integral(
    model_or_flow, src1: SourceEncoding, half_width: float = 8.0, n: int = 401, chunk: int = 4096
) -> float:
    """Integral of exp(log p(z|x)) for a d_z=1, T=2 flow on a grid."""
    flow = model_or_flow.flow if isinstance(model_or_flow, LatentFlowModel) else model_or_flow
    points, area = grid_2d(half_width, n)
    total = 0.0
    with T.no_grad():
        for lo, hi in _chunked_rows(len(points), chunk):
            z = T.Tensor(points[lo:hi].reshape(-1, 2, 1).astype(src1.states.dtype))
            src = _replicate_src(src1, hi - lo)
            mask = np.ones((hi - lo, 2), dtype=bool)
            logp = flow.log_density(z, src, mask).data
            total += float(np.exp(logp).sum()) * area
    return total


def decoder_loglike_on_grid(
    model: LatentFlowModel, src1: SourceEncoding, y_tokens: np.ndarray, points: np.ndarray, chunk: int = 4096
) -> np.ndarray:
    """log P(y | z, x) for every grid point (d_z=1, T=2, full-length y)."""
    out = np.zeros(len(points))
    with T.no_grad():
        for lo, hi in _chunked_rows(len(points), chunk):
            z = T.Tensor(points[lo:hi].reshape(-1, 2, 1).astype(src1.states.dtype))
            src = _replicate_src(src1, hi - lo)
            mask = np.ones((hi - lo, 2), dtype=bool)
            logits = model.decode_logits(z, mask, src).data
            m = logits.max(axis=-1, keepdims=True)
            logp = logits - (m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True)))
            tok = np.broadcast_to(y_tokens[None, :], (hi - lo, 2))
            picked = np.take_along_axis(logp, tok[..., None], axis=-1)[..., 0]
            out[lo:hi] = picked.sum(axis=1)
    return out


def prior_logp_on_grid(
    model: LatentFlowModel, src1: SourceEncoding, points: np.ndarray, chunk: int = 4096
) -> np.ndarray:
    out = np.zeros(len(points))
    with T.no_grad():
        for lo, hi in _chunked_rows(len(points), chunk):
            z = T.Tensor(points[lo:hi].reshape(-1, 2, 1).astype(src1.states.dtype))
            src = _replicate_src(src1, hi - lo)
            mask = np.ones((hi - lo, 2), dtype=bool)
            out[lo:hi] = model.prior_log_density(z, src, mask).data
    return out


def exact_log_marginal(
    model: LatentFlowModel, src1: SourceEncoding, y_tokens: np.ndarray, half_width: float = 8.0, n: int = 301
) -> float:
    """log P(y|x) by grid quadrature over the 2-d latent space."""
    points, area = grid_2d(half_width, n)
    loglike = decoder_loglike_on_grid(model, src1, y_tokens, points)
    logprior = prior_logp_on_grid(model, src1, points)
    combined = loglike + logprior
    m = combined.max()
    return float(m + np.log(np.exp(combined - m).sum() * area))


def exact_sequence_elbo(
    model: LatentFlowModel, src1: SourceEncoding, tgt_tokens: np.ndarray, half_width: float = 8.0, n: int = 301
) -> float:
    """ELBO for one (x, y) computed by quadrature over q (no sampling noise).

    E_q[log P(y|z,x) + log p(z|x) - log q(z|y,x)], with the expectation a
    grid sum over a box of +-half_width posterior standard deviations.
    """
    from .data import TokenBatch

    tgt = TokenBatch(
        tgt_tokens[None, :], lengths=np.array([2], dtype=np.int64), raw_lengths=np.array([2], dtype=np.int64)
    )
    with T.no_grad():
        params = model.posterior_params(tgt, src1, token_dropout_rate=0.0)
    mu = params.mu.data.reshape(2)
    std = np.exp(0.5 * params.log_var.data.reshape(2))
    points, area = grid_2d(half_width, n, center=mu, scale=std)
    diff = (points - mu) / std
    log_q = -0.5 * (diff**2).sum(axis=1) - np.log(2 * np.pi) - np.log(std).sum()
    q = np.exp(log_q)
    w = q * area
    w /= w.sum()  # renormalize the truncated q mass
    loglike = decoder_loglike_on_grid(model, src1, tgt_tokens, points)
    logprior = prior_logp_on_grid(model, src1, points)
    return float((w * (loglike + logprior - log_q)).sum())


# -- the runnable check table ----------------------------------------------------


def run_selftest(level: str = "fast", corrupt_layer: str | None = None) -> list[CheckResult]:
    """Oracle suite; `corrupt_layer` intentionally breaks one coupling
    inverse to prove the invertibility check catches and names it."""
    if level not in ("fast", "full"):
        raise ValueError("level must be 'fast' or 'full'")
    results: list[CheckResult] = []

    with T.precision("float64"):
        rng = RandomSource(20_240_517)

        # invertibility, layer by layer and end to end
        flow = make_flow(d_z=8, n_scales=2, steps=(4, 4), seed=1)
        if corrupt_layer is not None:
            found = False
            for step in flow.steps:
                if f"{step.name}/coupling" == corrupt_layer:
                    step.coupling.debug_corrupt_inverse = True
                    found = True
            if not found:
                raise ValueError(f"no coupling named {corrupt_layer!r}")
        src = make_source(4, 5, 16, seed=2)
        mask = np.ones((4, 8), dtype=bool)
        mask[2, 6:] = False
        z = RandomSource(3).normal((4, 8, 8), dtype=np.float64)
        per_layer = layer_roundtrip_errors(flow, z, src, mask)
        bad = {k: v for k, v in per_layer.items() if v > 1e-9}
        results.append(
            CheckResult(
                "layer-invertibility",
                not bad,
                f"worst {max(per_layer.values()):.2e}" + (f"; failing: {sorted(bad)}" if bad else ""),
            )
        )
        err = full_roundtrip_error(flow, z, src, mask)
        results.append(CheckResult("stack-invertibility", err < 1e-9, f"max abs err {err:.2e}"))

        # shape and mass contracts
        x = T.softmax(T.Tensor(rng.normal((6, 9))), mask_additive=None)
        mass = np.abs(x.data.sum(axis=-1) - 1.0).max()
        results.append(CheckResult("softmax-mass", mass < 1e-6, f"max |sum-1| {mass:.1e}"))

        # schedules
        cfg = TrainConfig()
        sched_ok = (
            kl_weight(0, cfg) == 0.0
            and kl_weight(cfg.kl_zero_steps + cfg.kl_ramp_steps // 2, cfg) == 0.5
            and kl_weight(10**9, cfg) == 1.0
            and abs(learning_rate(200_000, cfg) - 5e-4 * 0.999995**200_000) < 1e-18
        )
        results.append(CheckResult("schedules", sched_ok, "kl ramp and lr decay match closed forms"))

        if level == "full":
            # log-determinant against the brute-force Jacobian
            t0 = time.perf_counter()
            jflow = make_flow(d_z=4, n_scales=1, steps=(4,), heads=2, seed=4)
            src1 = make_source(1, 3, 16, seed=5)
            m1 = np.ones((1, 2), dtype=bool)
            z0 = RandomSource(6).normal((1, 2, 4), dtype=np.float64)
            acc = flow_accumulated_logdet(jflow, z0, src1, m1)
            num = numeric_jacobian_logdet(flow_fwd_flat(jflow, src1, m1, (1, 2, 4)), z0)
            rel = abs(acc - num) / max(abs(num), 1e-12)
            results.append(
                CheckResult("jacobian-logdet", rel < 1e-4, f"rel err {rel:.2e} ({time.perf_counter() - t0:.1f}s)")
            )

            # full-objective gradient check
            model, (corpus, sv, tv), (srcb, tgtb) = tiny_scalar_model(seed=7)
            tc = TrainConfig(kl_zero_steps=0, kl_ramp_steps=0, seed=8)

            def objective():
                loss, _ = elbo_step(model, srcb, tgtb, 3, tc, RandomSource(77))
                return loss

            # epsilon below the relu-kink scale: coarser steps turn a clean
            # gradient into a bad secant when a preactivation sits near zero
            gerr = finite_difference_check(
                objective, model.named_parameters(), epsilon=1e-6, n_coords=50, rng=RandomSource(9)
            )
            results.append(CheckResult("elbo-gradients", gerr < 1e-3, f"max rel err {gerr:.2e}"))

            # density normalization by quadrature
            with T.no_grad():
                enc1 = model.encode_source(_first_row(srcb))
            integral = prior_density_integral(model, enc1, n=301)
            results.append(
                CheckResult("density-normalization", abs(integral - 1.0) < 1e-2, f"integral {integral:.4f}")
            )

            # ELBO never exceeds the exact log-marginal
            worst_gap = -np.inf
            for i in range(5):
                row_src = _first_row(srcb, i % srcb.size)
                with T.no_grad():
                    enc = model.encode_source(row_src)
                y = tgtb.tokens[i % tgtb.size][:2]
                elbo_val = exact_sequence_elbo(model, enc, y)
                logm = exact_log_marginal(model, enc, y)
                worst_gap = max(worst_gap, elbo_val - logm)
            results.append(
                CheckResult("elbo-bound", worst_gap <= 1e-2, f"max (elbo - log marginal) {worst_gap:.3e}")
            )

    return results


def _first_row(batch, i: int = 0):
    from .data import TokenBatch

    return TokenBatch(
        batch.tokens[i : i + 1], lengths=batch.lengths[i : i + 1], raw_lengths=batch.raw_lengths[i : i + 1]
    )
