"""Finite-difference validation of reverse-mode gradients.

Central differences against the analytic gradient over a random sample of
parameter coordinates. Run models in float64 (``precision("float64")``)
and make the objective deterministic (fixed noise) before calling.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .rng import RandomSource
from .tensor import Tensor

ABS_FLOOR = 1e-6


class NonFiniteObjective(RuntimeError):
    pass


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    epsilon: float = 1e-5,
    n_coords: int = 50,
    rng: RandomSource | None = None,
) -> float:
    """Max error between analytic and central-difference gradients.

    Per sampled coordinate the error is relative,
    ``|a - n| / (|a| + |n| + 1e-12)``, except when both magnitudes sit under
    an absolute floor of 1e-6, where the absolute difference is reported
    instead (a constant objective must yield ~0, not a 0/0 blow-up).
    """
    rng = rng or RandomSource(0)
    out = f()
    if out.requires_grad:
        out.backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for name, t in params}
    for _, t in params:
        t.grad = None

    flat_coords: list[tuple[str, Tensor, int]] = []
    for name, t in params:
        for k in range(t.data.size):
            flat_coords.append((name, t, k))
    if not flat_coords:
        raise ValueError("no parameters to check")
    idx = rng.spawn("fd-coords").permutation(len(flat_coords))[: min(n_coords, len(flat_coords))]

    worst = 0.0
    for i in idx:
        name, t, k = flat_coords[int(i)]
        flat = t.data.reshape(-1)
        orig = flat[k]
        flat[k] = orig + epsilon
        f_plus = float(f().data)
        flat[k] = orig - epsilon
        f_minus = float(f().data)
        flat[k] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NonFiniteObjective(f"objective non-finite when perturbing {name}[{k}]")
        numeric = (f_plus - f_minus) / (2.0 * epsilon)
        a = float(analytic[name].reshape(-1)[k])
        if abs(a) + abs(numeric) < ABS_FLOOR:
            err = abs(a - numeric)
        else:
            err = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12)
        worst = max(worst, err)
    return worst
