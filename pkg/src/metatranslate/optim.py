"""Functional SGD and Adam steps with an explicit ascent/descent direction."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Any, Literal

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError
from .nn import combine
from .params import ParamSet

Direction = Literal["descent", "ascent"]


def _sign(direction: str) -> float:
    if direction == "descent":
        return -1.0
    if direction == "ascent":
        return 1.0
    raise ContractError(f"direction must be 'descent' or 'ascent', got {direction!r}")


def clip_by_global_norm(grads: ParamSet, max_norm: float | None) -> ParamSet:
    """Escape hatch for unstable GAN runs; ``None`` disables it."""
    if max_norm is None:
        return grads
    norm = grads.norm()
    if norm <= max_norm or norm == 0.0:
        return grads
    k = max_norm / norm
    return grads.map(lambda g: ad.scale(g, k))


def sgd_step(params: ParamSet, grads: ParamSet, lr: float, direction: Direction = "descent") -> ParamSet:
    """``params -/+ lr * grads``; differentiable when either input is."""
    if not lr > 0:
        raise ContractError(f"sgd_step: learning rate must be positive, got {lr}")
    return combine(params, grads, _sign(direction) * lr)


@dataclass(frozen=True)
class AdamState:
    m: ParamSet
    v: ParamSet
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ParamSet, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
        z = params.map(lambda p: np.zeros_like(ad.value(p)))
        return cls(z, z, 0, beta1, beta2, eps)


def adam_step(
    params: ParamSet,
    grads: ParamSet,
    state: AdamState,
    lr: float,
    direction: Direction = "descent",
) -> tuple[ParamSet, AdamState]:
    """Bias-corrected Adam. Returns new params and a new state.

    The ascent direction is folded in by negating the gradient before it
    enters the moments, so ascent on ``g`` and descent on ``-g`` are the
    same step from any state.
    """
    if not lr > 0:
        raise ContractError(f"adam_step: learning rate must be positive, got {lr}")
    sign = _sign(direction)
    params.check_layout(state.m, "adam_step")
    params.check_layout(grads, "adam_step")
    b1, b2, eps = state.beta1, state.beta2, state.eps
    t = state.t + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_p, new_m, new_v = [], [], []
    for name in params.names:
        g = -ad.value(grads[name]) if sign > 0 else ad.value(grads[name])
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        step = (m / c1) / (np.sqrt(v / c2) + eps)
        new_p.append((name, ad.value(params[name]) - lr * step))
        new_m.append((name, m))
        new_v.append((name, v))
    return ParamSet(new_p), replace(state, m=ParamSet(new_m), v=ParamSet(new_v), t=t)


def first_step_increment(g: Any, lr: float, eps: float = 1e-8) -> np.ndarray:
    """Closed-form size of Adam's first descent step: ``-lr * g / (|g| + eps)``."""
    g = np.asarray(g, dtype=np.float64)
    return -lr * g / (np.abs(g) + eps)


def all_finite(params: ParamSet) -> bool:
    return all(np.all(np.isfinite(ad.value(v))) for v in params.values())


def max_abs(params: ParamSet) -> float:
    return max((float(np.max(np.abs(ad.value(v)))) for v in params.values() if np.size(ad.value(v))), default=0.0)


__all__ = [
    "AdamState",
    "adam_step",
    "sgd_step",
    "clip_by_global_norm",
    "first_step_increment",
    "all_finite",
    "max_abs",
]
