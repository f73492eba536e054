"""Adversarial, cycle-consistency and identity losses and their composition.

Expectations are sample means over the batches handed in; the L1 norm sums
absolute coordinate differences within a sample.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass
from typing import Any

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError

logger = logging.getLogger(__name__)

Closure = Callable[[Any], Any]


class IdentityLossInapplicable(ContractError):
    """Raised when the two domains do not share a dimensionality."""


@dataclass(frozen=True)
class LossWeights:
    lambda_cyc: float = 10.0
    lambda_idt: float = 5.0

    def __post_init__(self):
        for name in ("lambda_cyc", "lambda_idt"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ContractError(f"LossWeights: {name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class LossBreakdown:
    """Terms of the composite objective; Vars while differentiable, floats once reported."""

    adv_forward: Any
    adv_backward: Any
    cyc: Any
    idt: Any
    total: Any

    def floats(self) -> LossBreakdown:
        return LossBreakdown(*(float(np.asarray(ad.value(t)).reshape(-1)[0]) for t in self.astuple()))

    def astuple(self) -> tuple:
        return (self.adv_forward, self.adv_backward, self.cyc, self.idt, self.total)

    def as_dict(self) -> dict[str, float]:
        f = self.floats()
        return {"adv_f": f.adv_forward, "adv_b": f.adv_backward, "cyc": f.cyc, "idt": f.idt, "total": f.total}

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.floats().astuple())


def _nonempty(name: str, batch: Any) -> None:
    shape = np.shape(ad.value(batch))
    if len(shape) != 2 or shape[0] == 0:
        raise ContractError(f"{name}: batches must be non-empty [n, d] matrices, got shape {shape}")


def _log_d(disc: Closure, batch: Any, negate: bool = False) -> Any:
    # log D(.) or log(1 - D(.)); via logits when the closure exposes them
    z_fn = getattr(disc, "logits", None)
    if z_fn is not None:
        z = z_fn(batch)
        return ad.log_sigmoid(ad.neg(z) if negate else z)
    p = disc(batch)
    return ad.log(ad.sub(1.0, p)) if negate else ad.log(p)


def adversarial_loss(gen: Closure, disc: Closure, x_batch: Any, y_batch: Any) -> Any:
    """``mean log D(y) + mean log(1 - D(gen(x)))``."""
    _nonempty("adversarial_loss", x_batch)
    _nonempty("adversarial_loss", y_batch)
    real = ad.mean(_log_d(disc, y_batch))
    fake = ad.mean(_log_d(disc, gen(x_batch), negate=True))
    return ad.add(real, fake)


def _l1_mean(a: Any, b: Any, what: str) -> Any:
    sa, sb = np.shape(ad.value(a)), np.shape(ad.value(b))
    if sa != sb:
        raise ContractError(f"{what}: dimension mismatch {sa} vs {sb}")
    return ad.mean(ad.sum_(ad.abs_(ad.sub(a, b)), axis=1))


def cycle_loss(g1: Closure, g2: Closure, x_batch: Any, y_batch: Any) -> Any:
    """``mean ||g2(g1(x)) - x||_1 + mean ||g1(g2(y)) - y||_1``."""
    _nonempty("cycle_loss", x_batch)
    _nonempty("cycle_loss", y_batch)
    return ad.add(
        _l1_mean(g2(g1(x_batch)), x_batch, "cycle_loss"),
        _l1_mean(g1(g2(y_batch)), y_batch, "cycle_loss"),
    )


def identity_loss(g1: Closure, g2: Closure, x_batch: Any, y_batch: Any) -> Any:
    """``mean ||g2(x) - x||_1 + mean ||g1(y) - y||_1``; needs equal domain dims."""
    _nonempty("identity_loss", x_batch)
    _nonempty("identity_loss", y_batch)
    dx, dy = np.shape(ad.value(x_batch))[1], np.shape(ad.value(y_batch))[1]
    if dx != dy:
        raise IdentityLossInapplicable(f"identity loss inapplicable: domain dims {dx} != {dy}")
    return ad.add(_l1_mean(g2(x_batch), x_batch, "identity_loss"), _l1_mean(g1(y_batch), y_batch, "identity_loss"))


def compose(adv_forward: Any, adv_backward: Any, cyc: Any, idt: Any, w: LossWeights) -> LossBreakdown:
    total = ad.add(
        ad.add(adv_forward, adv_backward),
        ad.add(ad.scale(cyc, w.lambda_cyc), ad.scale(idt, w.lambda_idt)),
    )
    return LossBreakdown(adv_forward, adv_backward, cyc, idt, total)


def composite_objective(
    F: Closure, H: Closure, D_X: Closure, D_Y: Closure, x_batch: Any, y_batch: Any, w: LossWeights
) -> LossBreakdown:
    """Two adversarial games (F vs D_Y, H vs D_X) plus weighted cycle and identity terms."""
    adv_f = adversarial_loss(F, D_Y, x_batch, y_batch)
    adv_b = adversarial_loss(H, D_X, y_batch, x_batch)
    cyc = cycle_loss(F, H, x_batch, y_batch)
    try:
        idt = identity_loss(F, H, x_batch, y_batch)
    except IdentityLossInapplicable as exc:
        if w.lambda_idt != 0:
            logger.warning("%s; using lambda_idt = 0", exc)
            w = LossWeights(w.lambda_cyc, 0.0)
        idt = np.zeros(())
    return compose(adv_f, adv_b, cyc, idt, w)
