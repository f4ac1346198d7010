"""Flat key-value run configuration with a stable digest.

Dotted namespaces, plain text on disk (``key = value`` lines, ``#``
comments), overridable with repeated ``--set key=value``. The digest is a
sha256 over the canonicalized config with seed keys excluded; it is
embedded in checkpoints and reports, so artifacts can only be combined
when their configurations agree. Seeds are recorded next to the digest,
not inside it.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

from .decoding import ARConfig, DecodeConfig
from .flow import FlowConfig
from .model import ModelConfig
from .training import TrainConfig

DEFAULTS: dict[str, object] = {
    # data
    "data.task": "lexical-swap",  # copy | reverse | sort | lexical-swap | none (files)
    "data.vocab_size": 64,
    "data.len_lo": 4,
    "data.len_hi": 16,
    "data.n_pairs": 20000,
    "data.n_dev": 500,
    "data.src": "",
    "data.tgt": "",
    "data.min_count": 1,
    "data.shared_vocab": False,
    "data.max_src_len": 80,
    "data.max_tgt_len": 60,
    # model
    "model.d_model": 64,
    "model.d_hidden": 128,
    "model.n_heads": 4,
    "model.enc_layers": 2,
    "model.post_layers": 2,
    "model.dec_layers": 2,
    "model.d_z": 64,
    "model.dropout": 0.0,
    "model.token_dropout": 0.2,
    "model.max_len": 256,
    # flow
    "flow.n_scales": 2,
    "flow.steps": [8, 8],
    "flow.linear_heads": 4,
    "flow.nn_d_model": 64,
    "flow.nn_d_hidden": 128,
    "flow.nn_heads": 4,
    # training
    "train.lr_init": 5e-4,
    "train.lr_decay": 0.999995,
    "train.beta1": 0.9,
    "train.beta2": 0.999,
    "train.eps": 1e-8,
    "train.amsgrad": True,
    "train.grad_clip": 1.0,
    "train.label_smoothing": 0.1,
    "train.kl_zero_steps": 30000,
    "train.kl_ramp_steps": 10000,
    "train.batch_sentences": 64,
    "train.kl_samples": 1,
    "train.steps": 20000,
    "train.log_interval": 50,
    "train.eval_interval": 1000,
    "train.ckpt_interval": 1000,
    "train.keep_best": 5,
    "train.seed": 1,
    # decoding
    "decode.method": "argmax",
    "decode.l": 1,
    "decode.r": 1,
    "decode.temperature": 0.4,
    "decode.k_iwd": 1,
    "decode.beam": 1,
    # autoregressive baseline
    "ar.layers": 2,
    "ar.steps": 4000,
}

# Named presets; 'desk' is DEFAULTS itself. The full-scale shapes stay
# available but are not desk-runnable.
PRESETS: dict[str, dict[str, object]] = {
    "desk": {},
    "tiny": {
        "model.d_z": 16,
        "flow.steps": [4, 4],
        "model.max_len": 128,
    },
    "base": {
        "model.d_model": 256,
        "model.d_hidden": 512,
        "model.n_heads": 8,
        "model.enc_layers": 6,
        "model.post_layers": 4,
        "model.dec_layers": 4,
        "model.d_z": 256,
        "flow.n_scales": 3,
        "flow.steps": [48, 48, 16],
        "flow.linear_heads": 8,
        "flow.nn_d_model": 256,
        "flow.nn_d_hidden": 512,
        "flow.nn_heads": 8,
        "train.batch_sentences": 2048,
    },
    "large": {
        "model.d_model": 512,
        "model.d_hidden": 1024,
        "model.n_heads": 8,
        "model.enc_layers": 6,
        "model.post_layers": 4,
        "model.dec_layers": 4,
        "model.d_z": 512,
        "flow.n_scales": 3,
        "flow.steps": [48, 48, 16],
        "flow.linear_heads": 8,
        "flow.nn_d_model": 512,
        "flow.nn_d_hidden": 1024,
        "flow.nn_heads": 8,
        "train.batch_sentences": 2048,
    },
}


class ConfigError(ValueError):
    pass


def _parse_value(key: str, raw: str) -> object:
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, list):
        return [int(x) for x in raw.split(",") if x != ""]
    return raw


def _render_value(v: object) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


class RunConfig:
    def __init__(self, values: dict[str, object]):
        unknown = sorted(set(values) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}; valid keys: {sorted(DEFAULTS)}")
        self.values = dict(DEFAULTS)
        self.values.update(values)

    def __getitem__(self, key: str):
        return self.values[key]

    @classmethod
    def build(cls, preset: str = "desk", path=None, overrides: list[str] | None = None) -> "RunConfig":
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        values = dict(PRESETS[preset])
        if path:
            for line in Path(path).read_text(encoding="utf-8").splitlines():
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"bad config line: {line!r}")
                k, v = (x.strip() for x in line.split("=", 1))
                if k not in DEFAULTS:
                    raise ConfigError(f"unknown config key {k!r}; valid keys: {sorted(DEFAULTS)}")
                values[k] = _parse_value(k, v)
        for item in overrides or []:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            k, v = (x.strip() for x in item.split("=", 1))
            if k not in DEFAULTS:
                raise ConfigError(f"unknown config key {k!r}; valid keys: {sorted(DEFAULTS)}")
            values[k] = _parse_value(k, v)
        return cls(values)

    def canonical(self) -> str:
        return "\n".join(f"{k} = {_render_value(self.values[k])}" for k in sorted(self.values)) + "\n"

    def digest(self) -> str:
        payload = "\n".join(
            f"{k} = {_render_value(self.values[k])}" for k in sorted(self.values) if not k.endswith(".seed")
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(self.canonical(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.build(path=path)

    # -- typed views ----------------------------------------------------

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            d_model=self["model.d_model"],
            d_hidden=self["model.d_hidden"],
            n_heads=self["model.n_heads"],
            enc_layers=self["model.enc_layers"],
            post_layers=self["model.post_layers"],
            dec_layers=self["model.dec_layers"],
            d_z=self["model.d_z"],
            dropout=self["model.dropout"],
            token_dropout=self["model.token_dropout"],
            max_len=self["model.max_len"],
            flow=FlowConfig(
                d_z=self["model.d_z"],
                n_scales=self["flow.n_scales"],
                steps_per_scale=tuple(self["flow.steps"]),
                n_linear_heads=self["flow.linear_heads"],
                nn_d_model=self["flow.nn_d_model"],
                nn_d_hidden=self["flow.nn_d_hidden"],
                nn_n_heads=self["flow.nn_heads"],
                cond_dim=self["model.d_model"],
                max_len=self["model.max_len"],
            ),
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr_init=self["train.lr_init"],
            lr_decay=self["train.lr_decay"],
            adam_betas=(self["train.beta1"], self["train.beta2"]),
            adam_eps=self["train.eps"],
            amsgrad=self["train.amsgrad"],
            grad_clip=self["train.grad_clip"],
            label_smoothing=self["train.label_smoothing"],
            kl_zero_steps=self["train.kl_zero_steps"],
            kl_ramp_steps=self["train.kl_ramp_steps"],
            batch_sentences=self["train.batch_sentences"],
            token_dropout_rate=self["model.token_dropout"],
            kl_samples=self["train.kl_samples"],
            steps=self["train.steps"],
            log_interval=self["train.log_interval"],
            eval_interval=self["train.eval_interval"],
            ckpt_interval=self["train.ckpt_interval"],
            keep_best=self["train.keep_best"],
            seed=self["train.seed"],
        )

    def decode_config(self) -> DecodeConfig:
        return DecodeConfig(
            method=self["decode.method"],
            l=self["decode.l"],
            r=self["decode.r"],
            temperature=self["decode.temperature"],
            k_iwd=self["decode.k_iwd"],
            beam=self["decode.beam"],
            seed=self["train.seed"],
        )

    def ar_config(self) -> ARConfig:
        return ARConfig(
            d_model=self["model.d_model"],
            d_hidden=self["model.d_hidden"],
            n_heads=self["model.n_heads"],
            layers=self["ar.layers"],
            dropout=self["model.dropout"],
            max_len=self["model.max_len"],
        )
