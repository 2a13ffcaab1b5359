from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def finite_difference_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-3,
    samples: int = 16,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between backprop and central differences.

    ``fn`` must be a deterministic scalar function of ``params``. Up to
    ``samples`` coordinates per parameter are probed; the error at each is
    ``|analytic - numeric| / max(|analytic|, eps)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    loss = fn()
    if not np.all(np.isfinite(loss.data)):
        raise FloatingPointError("function value is not finite")
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        n = p.data.size
        coords = rng.choice(n, size=min(samples, n), replace=False)
        for i in coords:
            orig = p.data.flat[i]
            with no_grad():
                p.data.flat[i] = orig + eps
                hi = float(fn().data)
                p.data.flat[i] = orig - eps
                lo = float(fn().data)
            p.data.flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise FloatingPointError("function value is not finite under perturbation")
            numeric = (hi - lo) / (2 * eps)
            a = float(analytic.flat[i])
            worst = max(worst, abs(a - numeric) / max(abs(a), eps))
    return worst
