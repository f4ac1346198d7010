"""Conditional normalizing-flow prior over latent sequences.

One step of flow is actnorm, then an invertible multi-head linear map,
then an affine coupling whose scale/shift network is a single attention
block conditioned on the source encoding. Scales are separated by a
feature-alternate factor-out (the removed half is scored against the base
density immediately) followed by a squeeze that merges adjacent time steps
into the feature axis.

Everything here is exactly invertible and keeps a per-sequence running
log |det df/dz|. Padded positions are transformed too (so round-trips are
exact tensor-wide) but never contribute to log-determinants or densities,
and never influence values at real positions.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .module import Module
from .nets import AttentionBlockConfig, Linear, LayerNorm, PositionalEmbedding, SourceEncoding, TransformerLayer, key_mask_bias
from .rng import RandomSource
from .tensor import Tensor

SPLIT_TYPES = ("time", "feat_cont", "feat_alt")

STD_FLOOR = 1e-6
DET_FLOOR = 1e-12
_LOG2PI = math.log(2.0 * math.pi)


class FlowSingularityError(RuntimeError):
    pass


class FlowConfigError(ValueError):
    pass


@dataclass
class FlowState:
    """Carrier for one direction of the flow.

    h is the working tensor [B, T_cur, d]; log_det accumulates per
    sequence; pad_mask tracks real positions at the current time
    resolution; factored_out collects (tensor, mask) pairs removed at
    scale boundaries, in removal order.
    """

    h: Tensor
    log_det: Tensor
    pad_mask: np.ndarray
    factored_out: list = field(default_factory=list)

    def element_count(self) -> int:
        n = self.h.data.size
        for part, _ in self.factored_out:
            n += part.data.size
        return n


@dataclass
class FlowConfig:
    d_z: int = 64
    n_scales: int = 2
    steps_per_scale: tuple[int, ...] = (8, 8)
    n_linear_heads: int = 4
    nn_d_model: int = 64
    nn_d_hidden: int = 128
    nn_n_heads: int = 4
    nn_dropout: float = 0.0
    cond_dim: int = 64  # width of the conditioning source states
    split_cycle: tuple[str, ...] = ("time", "feat_cont", "feat_alt")
    max_len: int = 256

    def __post_init__(self):
        if len(self.steps_per_scale) != self.n_scales:
            raise FlowConfigError("steps_per_scale must list one entry per scale")
        if self.d_z % self.n_linear_heads != 0:
            raise FlowConfigError(f"d_z={self.d_z} not divisible by n_linear_heads={self.n_linear_heads}")
        for s in self.split_cycle:
            if s not in SPLIT_TYPES:
                raise FlowConfigError(f"unknown split type {s!r}")
        needs_even = self.n_scales > 1 or any(s != "time" for s in self.split_cycle)
        if needs_even and self.d_z % 2 != 0:
            raise FlowConfigError("feature splits and factor-out require an even d_z")

    @property
    def divisor(self) -> int:
        return 1 << (self.n_scales - 1)


# -- elementary layers ---------------------------------------------------------


class ActNorm(Module):
    """Per-feature affine z' = s * z + b with data-dependent initialization."""

    def __init__(self, d: int):
        super().__init__()
        self.scale = T.ones((d,), requires_grad=True)
        self.shift = T.zeros((d,), requires_grad=True)
        self.init_flag = T.zeros((1,))  # buffer: 1.0 once initialized

    @property
    def initialized(self) -> bool:
        return bool(self.init_flag.data[0] > 0.5)

    def initialize(self, h: np.ndarray, pad_mask: np.ndarray) -> None:
        """Whiten the init batch per feature over real positions."""
        if self.initialized:
            raise RuntimeError("actnorm already initialized")
        sel = h[pad_mask]  # [n_real, d]
        mean = sel.mean(axis=0)
        std = sel.std(axis=0)
        floored = std < STD_FLOOR
        if floored.any():
            warnings.warn(f"actnorm init: {int(floored.sum())} feature(s) hit the std floor {STD_FLOOR}")
            std = np.where(floored, STD_FLOOR, std)
        self.scale.data = (1.0 / std).astype(self.scale.dtype)
        self.shift.data = (-mean / std).astype(self.shift.dtype)
        self.init_flag.data = np.ones_like(self.init_flag.data)

    def _check(self):
        if not self.initialized:
            raise RuntimeError("actnorm used before data-dependent initialization")

    def forward(self, h: Tensor, pad_mask: np.ndarray) -> tuple[Tensor, Tensor]:
        self._check()
        out = T.add(T.mul(h, self.scale), self.shift)
        t_eff = pad_mask.sum(axis=1).astype(h.dtype)
        log_s = T.reduce_sum(T.log(T.absolute(self.scale)))
        delta = T.mul(T.Tensor(t_eff), log_s)
        return out, delta

    def inverse(self, h: Tensor, pad_mask: np.ndarray) -> tuple[Tensor, Tensor]:
        # Inversion is never differentiated, so compute it in float64 and
        # cast back: in float32 mode this keeps deep stacks at the
        # representation floor instead of accumulating division error.
        self._check()
        out64 = (h.data.astype(np.float64) - self.shift.data.astype(np.float64)) / self.scale.data.astype(np.float64)
        t_eff = pad_mask.sum(axis=1).astype(np.float64)
        log_s = float(np.log(np.abs(self.scale.data.astype(np.float64))).sum())
        return T.Tensor(out64.astype(h.dtype)), T.Tensor((-t_eff * log_s).astype(h.dtype))


class MultiHeadLinear(Module):
    """Invertible per-head linear map along the feature axis.

    Each head's slice is right-multiplied by its own square matrix,
    initialized orthogonal. split_format chooses how features map to
    heads: 'row' takes contiguous blocks, 'col' interleaves.
    """

    def __init__(self, d: int, n_heads: int, split_format: str, rng: RandomSource, name: str = ""):
        super().__init__()
        if split_format not in ("row", "col"):
            raise FlowConfigError(f"bad split_format {split_format!r}")
        self.d = d
        self.n_heads = n_heads
        self.d_head = d // n_heads
        self.split_format = split_format
        self.name = name
        mats = []
        for i in range(n_heads):
            a = rng.spawn(f"w{i}").normal((self.d_head, self.d_head), dtype=np.float64)
            q, r = np.linalg.qr(a)
            q *= np.sign(np.diag(r))[None, :]
            mats.append(q)
        self.weight = T.tensor(np.stack(mats), requires_grad=True)

    def _to_heads(self, h: Tensor) -> Tensor:
        b, t, _ = h.shape
        if self.split_format == "row":
            x = T.reshape(h, (b, t, self.n_heads, self.d_head))
        else:
            x = T.transpose(T.reshape(h, (b, t, self.d_head, self.n_heads)), (0, 1, 3, 2))
        return T.reshape(T.transpose(x, (2, 0, 1, 3)), (self.n_heads, b * t, self.d_head))

    def _from_heads(self, x: Tensor, b: int, t: int) -> Tensor:
        x = T.transpose(T.reshape(x, (self.n_heads, b, t, self.d_head)), (1, 2, 0, 3))
        if self.split_format == "row":
            return T.reshape(x, (b, t, self.d))
        return T.reshape(T.transpose(x, (0, 1, 3, 2)), (b, t, self.d))

    def _logdets(self) -> Tensor:
        sign, logabs = T.slogdet(self.weight)
        bad = np.nonzero(logabs.data < math.log(DET_FLOOR))[0]
        if bad.size:
            raise FlowSingularityError(f"{self.name}: near-singular head(s) {bad.tolist()}")
        return logabs

    def forward(self, h: Tensor, pad_mask: np.ndarray) -> tuple[Tensor, Tensor]:
        b, t, _ = h.shape
        out = self._from_heads(T.matmul(self._to_heads(h), self.weight), b, t)
        t_eff = pad_mask.sum(axis=1).astype(h.dtype)
        delta = T.mul(T.Tensor(t_eff), T.reduce_sum(self._logdets()))
        return out, delta

    def inverse(self, h: Tensor, pad_mask: np.ndarray) -> tuple[Tensor, Tensor]:
        # float64 internally (see ActNorm.inverse); the inverse matrix is
        # recomputed every call, never cached.
        b, t, _ = h.shape
        self._logdets()  # singularity guard
        w64 = self.weight.data.astype(np.float64)
        inv = np.linalg.inv(w64)
        with T.no_grad():
            heads = self._to_heads(T.Tensor(h.data.astype(np.float64)))
            out = self._from_heads(T.matmul(heads, T.Tensor(inv)), b, t)
        t_eff = pad_mask.sum(axis=1).astype(np.float64)
        logdet = float(np.linalg.slogdet(w64)[1].sum())
        return T.Tensor(out.data.astype(h.dtype)), T.Tensor((-t_eff * logdet).astype(h.dtype))


def _split_slices(split_type: str, swap: bool, t: int, d: int):
    """Index expressions selecting (kept-fixed half a, transformed half b)."""
    if split_type == "time":
        a = (slice(None), slice(0, None, 2))
        b = (slice(None), slice(1, None, 2))
    elif split_type == "feat_cont":
        a = (Ellipsis, slice(0, d // 2))
        b = (Ellipsis, slice(d // 2, None))
    else:
        a = (Ellipsis, slice(0, None, 2))
        b = (Ellipsis, slice(1, None, 2))
    return (b, a) if swap else (a, b)


def _scatter(part: Tensor, index, shape) -> Tensor:
    """Place `part` into a zero canvas of `shape` at `index` (inverse of take)."""
    canvas = np.zeros(shape, dtype=part.dtype)
    canvas[index] = part.data

    def bwd(g):
        part._accumulate(np.ascontiguousarray(g[index]), owned=True)

    return T._result(canvas, (part,), bwd)


class AffineCoupling(Module):
    """z_b' = s(z_a, x) * z_b + b(z_a, x) with s = sigmoid(raw) + 0.5.

    The scale/shift network is one attention block: self-attention over
    z_a, inter-attention over the source encoding, feed-forward; its output
    head starts at zero so the whole coupling is the identity at
    initialization. Sequences with no real z_a position at this layer
    (possible for time splits at coarse scales) fall back to the identity,
    keeping the layer pad-neutral.
    """

    def __init__(self, d: int, split_type: str, swap_ab: bool, cfg: FlowConfig, rng: RandomSource, name: str = ""):
        super().__init__()
        if split_type not in SPLIT_TYPES:
            raise FlowConfigError(f"unknown split type {split_type!r}")
        if split_type != "time" and d % 2 != 0:
            raise FlowConfigError(f"{name}: feature split needs even d, got {d}")
        self.split_type = split_type
        self.swap_ab = swap_ab
        self.name = name
        self.d = d
        d_in = d if split_type == "time" else d // 2
        self.d_out = d if split_type == "time" else d // 2
        nn_cfg = AttentionBlockConfig(cfg.nn_d_model, cfg.nn_d_hidden, cfg.nn_n_heads, 1, cfg.nn_dropout)
        self.bridge = Linear(d_in, cfg.nn_d_model, rng.spawn("bridge"))
        self.pos = PositionalEmbedding(cfg.max_len, cfg.nn_d_model, rng.spawn("pos"))
        self.block = TransformerLayer(nn_cfg, rng.spawn("block"), cross=True, memory_dim=cfg.cond_dim)
        self.norm = LayerNorm(cfg.nn_d_model)
        self.head = Linear(cfg.nn_d_model, 2 * self.d_out, rng.spawn("head"), zero_init=True)
        self.debug_corrupt_inverse = False  # verification hook, see selftest

    def _masks(self, a_idx, b_idx, pad_mask: np.ndarray):
        if self.split_type == "time":
            return pad_mask[a_idx], pad_mask[b_idx]
        return pad_mask, pad_mask

    def _scale_shift(self, z_a: Tensor, a_mask: np.ndarray, n_rows: int, src: SourceEncoding):
        x = T.add(self.bridge(z_a), self.pos(z_a.shape[1]))
        self_bias = key_mask_bias(a_mask, x.dtype)
        mem_bias = key_mask_bias(src.pad_mask, x.dtype)
        x = self.block(x, self_bias, src.states, mem_bias)
        out = self.head(self.norm(x))
        # Rows may be off by one for time splits at odd lengths.
        if out.shape[1] > n_rows:
            out = T.take(out, (slice(None), slice(0, n_rows)))
        elif out.shape[1] < n_rows:
            last = T.take(out, (slice(None), slice(-1, None)))
            out = T.concat([out, last], axis=1)
        raw, shift = T.split(out, [self.d_out, self.d_out], axis=-1)
        # Sequences whose z_a half is entirely padding get the identity.
        gate = a_mask.any(axis=1).astype(raw.dtype)[:, None, None]
        raw = T.mul(raw, T.Tensor(gate))
        shift = T.mul(shift, T.Tensor(gate))
        scale = T.add(T.sigmoid(raw), T.tensor(0.5))
        return scale, shift

    def forward(self, h: Tensor, pad_mask: np.ndarray, src: SourceEncoding) -> tuple[Tensor, Tensor]:
        b, t, d = h.shape
        a_idx, b_idx = _split_slices(self.split_type, self.swap_ab, t, d)
        z_a, z_b = T.take(h, a_idx), T.take(h, b_idx)
        a_mask, b_mask = self._masks(a_idx, b_idx, pad_mask)
        scale, shift = self._scale_shift(z_a, a_mask, z_b.shape[1], src)
        z_b2 = T.add(T.mul(scale, z_b), shift)
        out = T.add(_scatter(z_a, a_idx, h.shape), _scatter(z_b2, b_idx, h.shape))
        m = b_mask.astype(h.dtype)[:, :, None]
        delta = T.reduce_sum(T.mul(T.log(scale), T.Tensor(m)), axis=(1, 2))
        return out, delta

    def inverse(self, h: Tensor, pad_mask: np.ndarray, src: SourceEncoding) -> tuple[Tensor, Tensor]:
        b, t, d = h.shape
        a_idx, b_idx = _split_slices(self.split_type, self.swap_ab, t, d)
        z_a, z_b2 = T.take(h, a_idx), T.take(h, b_idx)
        a_mask, b_mask = self._masks(a_idx, b_idx, pad_mask)
        scale, shift = self._scale_shift(z_a, a_mask, z_b2.shape[1], src)
        # scale/shift recomputed from the untouched half are bit-identical
        # to the forward pass; the division runs in float64 (never
        # differentiated) so only the output downcast rounds
        z_b64 = (z_b2.data.astype(np.float64) - shift.data.astype(np.float64)) / scale.data.astype(np.float64)
        z_b = T.Tensor(z_b64.astype(h.dtype))
        if self.debug_corrupt_inverse:
            z_b = T.add(z_b, T.tensor(1e-3))
        out = T.add(_scatter(z_a, a_idx, h.shape), _scatter(z_b, b_idx, h.shape))
        m = b_mask.astype(h.dtype)[:, :, None]
        delta = T.mul(T.reduce_sum(T.mul(T.log(scale), T.Tensor(m)), axis=(1, 2)), T.tensor(-1.0))
        return out, delta


def squeeze(h: Tensor, pad_mask: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Merge adjacent time pairs into features: [B,T,d] -> [B,T/2,2d]."""
    b, t, d = h.shape
    if t % 2 != 0:
        raise ValueError(f"squeeze needs an even time length, got {t}")
    out = T.reshape(h, (b, t // 2, 2 * d))
    return out, pad_mask[:, 0::2]


def unsqueeze(h: Tensor, pad_mask: np.ndarray) -> tuple[Tensor, np.ndarray]:
    b, t, d2 = h.shape
    if d2 % 2 != 0:
        raise ValueError("unsqueeze needs an even feature length")
    out = T.reshape(h, (b, t * 2, d2 // 2))
    return out, np.repeat(pad_mask, 2, axis=1)


def factor_out(h: Tensor) -> tuple[Tensor, Tensor]:
    """Feature-alternate split into (kept, removed) halves."""
    if h.shape[-1] % 2 != 0:
        raise FlowConfigError("factor-out requires an even feature dimension")
    return T.take(h, (Ellipsis, slice(0, None, 2))), T.take(h, (Ellipsis, slice(1, None, 2)))


def unfactor(kept: Tensor, removed: Tensor) -> Tensor:
    shape = kept.shape[:-1] + (kept.shape[-1] * 2,)
    return T.add(_scatter(kept, (Ellipsis, slice(0, None, 2)), shape), _scatter(removed, (Ellipsis, slice(1, None, 2)), shape))


def masked_normal_logpdf(h: Tensor, pad_mask: np.ndarray) -> Tensor:
    """Standard-normal log-density summed per sequence over real positions."""
    per = T.mul(T.add(T.mul(h, h), T.tensor(_LOG2PI)), T.tensor(-0.5))
    m = pad_mask.astype(h.dtype)[:, :, None]
    return T.reduce_sum(T.mul(per, T.Tensor(m)), axis=(1, 2))


# -- step and multi-scale composition -----------------------------------------


class FlowStep(Module):
    """actnorm -> invertible multi-head linear -> affine coupling."""

    def __init__(self, d: int, split_type: str, swap_ab: bool, lin_format: str, cfg: FlowConfig, rng: RandomSource, name: str):
        super().__init__()
        self.name = name
        self.actnorm = ActNorm(d)
        self.linear = MultiHeadLinear(d, cfg.n_linear_heads, lin_format, rng.spawn("linear"), name=f"{name}/linear")
        self.coupling = AffineCoupling(d, split_type, swap_ab, cfg, rng.spawn("coupling"), name=f"{name}/coupling")

    def forward(self, h, pad_mask, src, init_actnorm=False):
        if init_actnorm and not self.actnorm.initialized:
            self.actnorm.initialize(h.data, pad_mask)
        h, d1 = self.actnorm.forward(h, pad_mask)
        h, d2 = self.linear.forward(h, pad_mask)
        h, d3 = self.coupling.forward(h, pad_mask, src)
        return h, T.add(T.add(d1, d2), d3)

    def inverse(self, h, pad_mask, src):
        h, d3 = self.coupling.inverse(h, pad_mask, src)
        h, d2 = self.linear.inverse(h, pad_mask)
        h, d1 = self.actnorm.inverse(h, pad_mask)
        return h, T.add(T.add(d1, d2), d3)


class Flow(Module):
    """The full multi-scale conditional prior p(z | x)."""

    def __init__(self, cfg: FlowConfig, rng: RandomSource):
        super().__init__()
        self.cfg = cfg
        self.steps: list[FlowStep] = []
        for s, n_steps in enumerate(cfg.steps_per_scale):
            for k in range(n_steps):
                split_type = cfg.split_cycle[k % len(cfg.split_cycle)]
                swap = (k // len(cfg.split_cycle)) % 2 == 1
                lin_format = "row" if k % 2 == 0 else "col"
                name = f"scale{s}/step{k}"
                self.steps.append(FlowStep(cfg.d_z, split_type, swap, lin_format, cfg, rng.spawn(name), name))

    @property
    def scales(self) -> list[list[FlowStep]]:
        out, i = [], 0
        for n in self.cfg.steps_per_scale:
            out.append(self.steps[i : i + n])
            i += n
        return out

    def iter_layers(self):
        for step in self.steps:
            yield f"{step.name}/actnorm", step.actnorm
            yield f"{step.name}/linear", step.linear
            yield f"{step.name}/coupling", step.coupling

    def check_time_length(self, t: int) -> None:
        if t % self.cfg.divisor != 0:
            raise ValueError(f"time length {t} not divisible by {self.cfg.divisor}")
        if (t >> (self.cfg.n_scales - 1)) < 2 and any(
            st.coupling.split_type == "time" for st in self.scales[-1]
        ):
            raise ValueError(f"time length {t} leaves the top scale below 2 positions")

    def set_identity(self) -> None:
        """Force every layer to the identity map (verification helper)."""
        for step in self.steps:
            step.actnorm.scale.data = np.ones_like(step.actnorm.scale.data)
            step.actnorm.shift.data = np.zeros_like(step.actnorm.shift.data)
            step.actnorm.init_flag.data = np.ones_like(step.actnorm.init_flag.data)
            w = step.linear.weight.data
            step.linear.weight.data = np.broadcast_to(np.eye(w.shape[-1], dtype=w.dtype), w.shape).copy()
            step.coupling.head.weight.data = np.zeros_like(step.coupling.head.weight.data)
            step.coupling.head.bias.data = np.zeros_like(step.coupling.head.bias.data)

    def mark_actnorm_initialized(self) -> None:
        for step in self.steps:
            step.actnorm.init_flag.data = np.ones_like(step.actnorm.init_flag.data)

    @property
    def actnorm_initialized(self) -> bool:
        return all(step.actnorm.initialized for step in self.steps)

    # -- f direction: z -> base ------------------------------------------

    def f_transform(self, z: Tensor, src: SourceEncoding, pad_mask: np.ndarray, init_actnorm: bool = False) -> FlowState:
        self.check_time_length(z.shape[1])
        n_in = z.data.size
        state = FlowState(z, T.Tensor(np.zeros(z.shape[0], dtype=z.dtype)), pad_mask)
        for s, steps in enumerate(self.scales):
            for step in steps:
                state.h, delta = step.forward(state.h, state.pad_mask, src, init_actnorm=init_actnorm)
                state.log_det = T.add(state.log_det, delta)
                if not np.all(np.isfinite(state.h.data)):
                    raise FloatingPointError(f"non-finite values after {step.name}")
            if s < self.cfg.n_scales - 1:
                kept, removed = factor_out(state.h)
                state.factored_out.append((removed, state.pad_mask))
                state.h, state.pad_mask = squeeze(kept, state.pad_mask)
        if state.element_count() != n_in:
            raise AssertionError("element count not conserved across squeezes/factor-outs")
        return state

    def g_transform(
        self,
        upsilon: Tensor,
        factored: list[tuple[Tensor, np.ndarray]],
        src: SourceEncoding,
        masks: list[np.ndarray],
    ) -> tuple[Tensor, Tensor]:
        """Inverse direction: base variables back to z.

        masks[s] is the pad mask at scale s; factored[s] pairs with scales
        0..S-2 in removal order. Returns (z, log_det of g), where the
        log_det is the negation of the f-direction accumulation.
        """
        h = upsilon
        log_det = T.Tensor(np.zeros(upsilon.shape[0], dtype=upsilon.dtype))
        for s in range(self.cfg.n_scales - 1, -1, -1):
            mask = masks[s]
            if s < self.cfg.n_scales - 1:
                kept, _ = unsqueeze(h, masks[s + 1])
                h = unfactor(kept, factored[s][0])
            for step in reversed(self.scales[s]):
                h, delta = step.inverse(h, mask, src)
                log_det = T.add(log_det, delta)
        return h, log_det

    def scale_masks(self, pad_mask: np.ndarray) -> list[np.ndarray]:
        masks = [pad_mask]
        for _ in range(self.cfg.n_scales - 1):
            masks.append(masks[-1][:, 0::2])
        return masks

    # -- public density / sampling -----------------------------------------

    def log_density(self, z: Tensor, src: SourceEncoding, pad_mask: np.ndarray, init_actnorm: bool = False) -> Tensor:
        """log p(z | x): exact, via change of variables."""
        state = self.f_transform(z, src, pad_mask, init_actnorm=init_actnorm)
        logp = T.add(masked_normal_logpdf(state.h, state.pad_mask), state.log_det)
        for part, mask in state.factored_out:
            logp = T.add(logp, masked_normal_logpdf(part, mask))
        return logp

    def sample(
        self,
        src: SourceEncoding,
        t: int,
        temperature: float,
        rng: RandomSource | None,
        pad_mask: np.ndarray | None = None,
    ) -> Tensor:
        """Draw z by pushing base noise of std `temperature` through g.

        temperature 0.0 takes the deterministic mode path (no rng needed).
        """
        if temperature < 0:
            raise ValueError("temperature must be >= 0")
        if temperature > 0 and rng is None:
            raise ValueError("sampling with temperature > 0 needs an rng")
        self.check_time_length(t)
        b = src.size
        if pad_mask is None:
            pad_mask = np.ones((b, t), dtype=bool)
        masks = self.scale_masks(pad_mask)
        d = self.cfg.d_z
        dtype = src.states.dtype

        def noise(shape, tag):
            if temperature == 0.0:
                return T.Tensor(np.zeros(shape, dtype=dtype))
            return T.Tensor(rng.spawn(tag).normal(shape, std=temperature, dtype=dtype))

        t_top = t >> (self.cfg.n_scales - 1)
        upsilon = noise((b, t_top, d), "upsilon")
        factored = []
        for s in range(self.cfg.n_scales - 1):
            factored.append((noise((b, t >> s, d // 2), f"factored{s}"), masks[s]))
        z, _ = self.g_transform(upsilon, factored, src, masks)
        return z
