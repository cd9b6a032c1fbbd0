"""SGD and Adam parameter updates with decoupled weight decay.

Weight decay is applied only to parameters with ndim >= 2 (weight matrices
and embedding tables), never to bias vectors. Gradient clipping is a
separate step so gradient-checking code can run without it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError
from .numerics import Tensor

Array = np.ndarray


@dataclass
class OptimizerState:
    kind: str
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    moments: dict[str, tuple[Array, Array]] = field(default_factory=dict)


def make_optimizer(
    kind: str,
    lr: float,
    weight_decay: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> OptimizerState:
    if kind not in ("sgd", "adam"):
        raise UsageError(f"unknown optimizer kind {kind!r}; expected 'sgd' or 'adam'")
    if lr <= 0:
        raise UsageError(f"learning rate must be positive, got {lr}")
    return OptimizerState(kind=kind, lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)


def global_grad_norm(params: dict[str, Tensor]) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return math.sqrt(total)


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``.

    Returns the pre-clip norm.
    """
    norm = global_grad_norm(params)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


def step(params: dict[str, Tensor], state: OptimizerState) -> None:
    """Apply one in-place update to every parameter, then clear gradients."""
    state.step_count += 1
    t = state.step_count
    for name, p in params.items():
        if not p.requires_grad:
            raise UsageError(f"parameter {name!r} does not require gradients")
        if p.grad is None:
            raise UsageError(f"parameter {name!r} has no gradient; run backward first")
        g = p.grad
        if state.kind == "sgd":
            p.values -= state.lr * g
        else:
            if name not in state.moments:
                state.moments[name] = (np.zeros_like(p.values), np.zeros_like(p.values))
            m, v = state.moments[name]
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * g * g
            m_hat = m / (1.0 - state.beta1**t)
            v_hat = v / (1.0 - state.beta2**t)
            p.values -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        if state.weight_decay > 0.0 and p.values.ndim >= 2:
            p.values -= state.lr * state.weight_decay * p.values
    for p in params.values():
        p.grad[...] = 0.0
