"""Adam with decoupled weight decay, plus learning-rate schedules."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class NonFiniteError(FloatingPointError):
    """Raised when a loss or gradient is NaN/Inf; the step is not applied."""


@dataclass
class OptimizerState:
    lr: float = 5e-5
    weight_decay: float = 0.1
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"m.{k}": a for k, a in self.m.items()}
        out.update({f"v.{k}": a for k, a in self.v.items()})
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.m = {k[2:]: a.copy() for k, a in arrays.items() if k.startswith("m.")}
        self.v = {k[2:]: a.copy() for k, a in arrays.items() if k.startswith("v.")}


def decays(name: str, param: np.ndarray) -> bool:
    # gains and biases are left undecayed
    return param.ndim >= 2


def adam_step(
    state: OptimizerState,
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    lr: float | None = None,
) -> dict[str, Tensor]:
    """Apply one AdamW update in place and return ``params``.

    Every gradient is checked before anything is touched so a rejected step
    leaves parameters and moments unchanged.
    """
    lr = state.lr if lr is None else lr
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}; step rejected")
    b1, b2 = state.betas
    state.step += 1
    t = state.step
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        if state.weight_decay and decays(name, p.data):
            p.data *= 1.0 - lr * state.weight_decay
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data -= (lr * update).astype(p.dtype, copy=False)
    return params


class AdamW:
    """Thin stateful wrapper: collects ``.grad`` from named params and steps."""

    def __init__(self, params: dict[str, Tensor], lr: float = 5e-5, weight_decay: float = 0.1,
                 betas=(0.9, 0.95), eps: float = 1e-8):
        self.params = params
        self.state = OptimizerState(lr=lr, weight_decay=weight_decay, betas=tuple(betas), eps=eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        adam_step(self.state, self.params, grads, lr)


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def annealed_lr(step: int, total_steps: int, base_lr: float, tail: float = 0.1) -> float:
    """Cosine schedule whose last ``tail`` fraction decays linearly to zero."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    knee = int(round(total_steps * (1.0 - tail)))
    if step <= knee or knee >= total_steps:
        return cosine_lr(step, total_steps, base_lr)
    at_knee = cosine_lr(knee, total_steps, base_lr)
    return at_knee * (total_steps - step) / (total_steps - knee)
