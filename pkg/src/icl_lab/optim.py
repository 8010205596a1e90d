"""AdamW optimizer and learning-rate schedules acting on named parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class NonFiniteGradError(FloatingPointError):
    """Raised when a parameter update would consume a NaN/Inf gradient."""


@dataclass
class AdamWState:
    """Per-parameter first/second moment accumulators plus the shared step count."""

    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    state: AdamWState,
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1.0e-8,
    weight_decay: float = 0.0,
) -> None:
    """Apply one AdamW update in place.

    Moments use bias correction; weight decay is decoupled (applied directly
    to the parameter, scaled by lr, not mixed into the gradient moments).
    Parameters without an entry in ``grads`` are skipped entirely: no moment
    update and no decay.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        if name not in grads:
            continue
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradError(f"non-finite gradient for parameter '{name}'")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p.data)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their global L2 norm is <= max_norm.

    Returns the pre-clip norm.
    """
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def cosine_lr(step: int, base_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup from 0 to base_lr, then cosine decay to 0 at total_steps.

    At step == warmup_steps the rate is exactly base_lr; at step ==
    total_steps it is exactly 0.  Steps beyond total_steps stay at 0.
    """
    if step < warmup_steps:
        return base_lr * step / max(warmup_steps, 1)
    if step >= total_steps:
        return 0.0
    progress = (step - warmup_steps) / max(total_steps - warmup_steps, 1)
    return float(base_lr * 0.5 * (1.0 + np.cos(np.pi * progress)))
