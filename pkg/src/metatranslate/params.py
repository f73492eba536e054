"""Named, ordered parameter collections."""

from __future__ import annotations

from collections.abc import Callable, Iterable, Iterator, Mapping
from typing import Any

import numpy as np

from .autodiff import ContractError, Tape, Var, value


class ParamSet(Mapping):
    """Immutable ordered mapping ``name -> tensor``.

    Values are float64 arrays, or :class:`~metatranslate.autodiff.Var` objects
    while a set is taking part in a differentiable computation.
    """

    __slots__ = ("_entries",)

    def __init__(self, entries: Mapping[str, Any] | Iterable[tuple[str, Any]] = ()) -> None:
        items = entries.items() if isinstance(entries, Mapping) else entries
        d: dict[str, Any] = {}
        for name, v in items:
            if name in d:
                raise ContractError(f"ParamSet: duplicate entry name {name!r}")
            d[name] = v if type(v) is Var else np.asarray(v, dtype=np.float64)
        object.__setattr__(self, "_entries", d)

    def __setattr__(self, key, val):
        raise AttributeError("ParamSet is immutable")

    def __getitem__(self, name: str) -> Any:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    __hash__ = None  # type: ignore[assignment]

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ParamSet) and self.equal(other)

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}:{tuple(np.shape(value(v)))}" for k, v in self._entries.items())
        return f"ParamSet({shapes})"

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self._entries)

    @property
    def num_params(self) -> int:
        return int(sum(np.size(value(v)) for v in self._entries.values()))

    def map(self, fn: Callable[[Any], Any]) -> ParamSet:
        return ParamSet((k, fn(v)) for k, v in self._entries.items())

    def numpy(self) -> ParamSet:
        """Plain-array view of the values (drops any graph linkage)."""
        return ParamSet((k, value(v)) for k, v in self._entries.items())

    def leaves(self, tape: Tape) -> ParamSet:
        """Fresh differentiable leaves on ``tape`` holding copies of the values."""
        return ParamSet((k, tape.param(value(v))) for k, v in self._entries.items())

    def is_differentiable(self) -> bool:
        return any(type(v) is Var and v.requires_grad for v in self._entries.values())

    def check_layout(self, other: ParamSet, what: str = "ParamSet") -> None:
        if self.names != other.names:
            raise ContractError(f"{what}: entry names differ {self.names} vs {other.names}")
        for k in self.names:
            a, b = np.shape(value(self[k])), np.shape(value(other[k]))
            if a != b:
                raise ContractError(f"{what}: entry {k!r} shape mismatch {a} vs {b}")

    def equal(self, other: ParamSet) -> bool:
        """Bitwise equality of names, shapes and values."""
        if self.names != other.names:
            return False
        for k in self.names:
            a, b = value(self[k]), value(other[k])
            if a.shape != b.shape or a.tobytes() != b.tobytes():
                return False
        return True

    def allclose(self, other: ParamSet, rtol: float = 1e-12, atol: float = 0.0) -> bool:
        if self.names != other.names:
            return False
        return all(np.allclose(value(self[k]), value(other[k]), rtol=rtol, atol=atol) for k in self.names)

    def flat(self) -> np.ndarray:
        return np.concatenate([value(v).ravel() for v in self._entries.values()]) if self._entries else np.zeros(0)

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(value(v) ** 2)) for v in self._entries.values())))
