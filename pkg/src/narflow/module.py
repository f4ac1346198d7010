"""Tiny module system: parameter naming, traversal, and train/eval mode.

A parameter is any ``Tensor`` attribute; trainable ones have
``requires_grad=True``, the rest (e.g. data-initialized flags) are buffers
that still travel with checkpoints. Names are slash-joined attribute paths,
so they are unique and stable as long as attribute assignment order is.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor


class Module:
    def __init__(self):
        self._training = True

    # -- traversal -----------------------------------------------------

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if key.startswith("_") and key != "_training":
                continue
            name = f"{prefix}{key}" if not prefix else f"{prefix}/{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_tensors(name)
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_tensors(f"{name}.{i}")
                    elif isinstance(item, Tensor):
                        yield f"{name}.{i}", item

    def submodules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.submodules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.submodules()

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors() if t.requires_grad]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named_tensors() if t.requires_grad]

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters())

    # -- state ----------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        names = [n for n, _ in self.named_tensors()]
        if len(names) != len(set(names)):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ValueError(f"duplicate tensor names in module tree: {dupes}")
        return {n: t.data for n, t in self.named_tensors()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        own = dict(self.named_tensors())
        missing = sorted(set(own) - set(arrays))
        extra = sorted(set(arrays) - set(own))
        if missing or extra:
            raise ValueError(f"state mismatch: missing={missing} extra={extra}")
        for name, t in own.items():
            arr = arrays[name]
            if tuple(arr.shape) != tuple(t.data.shape):
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {t.data.shape}")
            t.data = arr.astype(t.data.dtype, copy=True)
            t.grad = None

    # -- modes ------------------------------------------------------------

    def train(self, flag: bool = True) -> "Module":
        for m in self.submodules():
            m._training = flag
        return self

    def eval(self) -> "Module":
        return self.train(False)

    @property
    def training(self) -> bool:
        return self._training

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None
