"""MLP generators/discriminators and functional parameter plumbing."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Var
from .params import ParamSet

__all__ = [
    "NetSpec",
    "ParamSet",
    "Net",
    "init_params",
    "forward",
    "logits",
    "clone_detached",
    "combine",
    "param_grads",
    "generator_spec",
    "discriminator_spec",
]

ACTIVATIONS = {"tanh": ad.tanh, "relu": ad.relu}
OUTPUTS = ("identity", "sigmoid")


@dataclass(frozen=True)
class NetSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: str = "tanh"
    output_activation: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if not self.hidden_dims:
            raise ContractError("NetSpec: at least one hidden layer is required")
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) <= 0 for d in dims):
            raise ContractError(f"NetSpec: layer sizes must be positive, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"NetSpec: unknown activation {self.activation!r}")
        if self.output_activation not in OUTPUTS:
            raise ContractError(f"NetSpec: unknown output activation {self.output_activation!r}")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    @property
    def is_discriminator(self) -> bool:
        return self.output_activation == "sigmoid"

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        out = []
        d = self.dims
        for i in range(len(d) - 1):
            out.append((f"W{i}", (d[i], d[i + 1])))
            out.append((f"b{i}", (d[i + 1],)))
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "output_dim": self.output_dim,
            "activation": self.activation,
            "output_activation": self.output_activation,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> NetSpec:
        return cls(
            int(d["input_dim"]),
            tuple(d["hidden_dims"]),
            int(d["output_dim"]),
            d.get("activation", "tanh"),
            d.get("output_activation", "identity"),
        )


def generator_spec(dim: int = 2, hidden: Sequence[int] = (64, 64), activation: str = "tanh") -> NetSpec:
    return NetSpec(dim, tuple(hidden), dim, activation, "identity")


def discriminator_spec(dim: int = 2, hidden: Sequence[int] = (64, 64), activation: str = "tanh") -> NetSpec:
    return NetSpec(dim, tuple(hidden), 1, activation, "sigmoid")


def init_params(spec: NetSpec, seed: int | Sequence[int]) -> ParamSet:
    """Glorot-uniform weights, zero biases; a pure function of ``seed``."""
    rng = np.random.default_rng(seed)
    entries = []
    for name, shape in spec.layout():
        if name.startswith("W"):
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            entries.append((name, rng.uniform(-bound, bound, size=shape)))
        else:
            entries.append((name, np.zeros(shape)))
    return ParamSet(entries)


def _check(spec: NetSpec, params: ParamSet, batch: Any) -> None:
    shape = np.shape(ad.value(batch))
    if len(shape) != 2 or shape[1] != spec.input_dim:
        raise ContractError(f"forward: batch shape {shape} does not match input_dim {spec.input_dim}")
    for name, expected in spec.layout():
        if name not in params:
            raise ContractError(f"forward: parameter {name!r} missing")
        got = np.shape(ad.value(params[name]))
        if got != expected:
            raise ContractError(f"forward: parameter {name!r} shape {got} does not match {expected}")


def logits(spec: NetSpec, params: ParamSet, batch: Any) -> Any:
    """Pre-output-activation values (the logits for a discriminator)."""
    _check(spec, params, batch)
    act = ACTIVATIONS[spec.activation]
    h = batch
    n_layers = len(spec.dims) - 1
    for i in range(n_layers):
        h = ad.add_bias(ad.matmul(h, params[f"W{i}"]), params[f"b{i}"])
        if i < n_layers - 1:
            h = act(h)
    return h


def forward(spec: NetSpec, params: ParamSet, batch: Any) -> Any:
    z = logits(spec, params, batch)
    return ad.sigmoid(z) if spec.is_discriminator else z


class Net:
    """A network closure: ``Net(spec, params)(batch)``."""

    __slots__ = ("spec", "params")

    def __init__(self, spec: NetSpec, params: ParamSet) -> None:
        self.spec = spec
        self.params = params

    def __call__(self, batch: Any) -> Any:
        return forward(self.spec, self.params, batch)

    def logits(self, batch: Any) -> Any:
        return logits(self.spec, self.params, batch)

    @property
    def input_dim(self) -> int:
        return self.spec.input_dim

    @property
    def output_dim(self) -> int:
        return self.spec.output_dim


def clone_detached(params: ParamSet) -> ParamSet:
    """Value copy with no graph history."""
    return ParamSet((k, np.array(ad.value(v), copy=True)) for k, v in params.items())


def combine(params: ParamSet, delta: Mapping[str, Any], scale: float) -> ParamSet:
    """Entry-wise ``params + scale * delta`` as a new ParamSet.

    Stays on the tape when either side is differentiable. Missing ``delta``
    entries count as zero.
    """
    out = []
    for name, p in params.items():
        d = delta.get(name) if isinstance(delta, Mapping) else None
        if d is None or scale == 0.0:
            out.append((name, p))
            continue
        ps, ds = np.shape(ad.value(p)), np.shape(ad.value(d))
        if ps != ds:
            raise ContractError(f"combine: entry {name!r} shape mismatch {ps} vs {ds}")
        out.append((name, ad.add(p, ad.scale(d, scale))))
    return ParamSet(out)


def param_grads(loss: Var, sets: Sequence[ParamSet], create_graph: bool = False) -> list[ParamSet]:
    """Gradient of ``loss`` for each ParamSet, returned as ParamSets of the same layout."""
    wrt = [v for s in sets for v in s.values() if type(v) is Var]
    gmap = ad.backward(loss, wrt, create_graph=create_graph)
    return [
        ParamSet((k, gmap[v] if type(v) is Var else np.zeros_like(v)) for k, v in s.items()) for s in sets
    ]
