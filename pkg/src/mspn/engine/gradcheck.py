"""Central-difference check of tape gradients."""
from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import ConfigError, NumericError
from .params import ParamSet, backward
from .tensor import Tensor


def grad_check(
    f: Callable[[ParamSet], Tensor],
    params: ParamSet,
    eps: float = 1e-4,
    samples_per_param: int = 64,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` is rerun on a 64-bit copy of ``params``; it must build its inputs in
    the parameters' dtype. Error per coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if not eps > 0:
        raise ConfigError(f"grad_check eps must be positive, got {eps}")
    p64 = params.astype(np.float64)
    loss = f(p64)
    if loss.dtype != np.float64:
        raise ConfigError("grad_check needs f to compute in the parameters' (64-bit) dtype")
    again = f(p64)
    if loss.item() != again.item():
        raise NumericError("f is not deterministic: two forward passes disagree")
    analytic = backward(loss, p64)

    def value() -> float:
        return f(p64).item()

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in p64:
        t = p64[name]
        flat = t.data.reshape(-1)
        n = min(samples_per_param, flat.size)
        for i in rng.choice(flat.size, size=n, replace=False):
            orig = flat[i]
            flat[i] = orig + eps
            up = value()
            flat[i] = orig - eps
            down = value()
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            err = abs(analytic[name].reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
