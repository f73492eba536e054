"""Text checkpoints: JSON header plus parameter arrays as full-precision decimals.

Floats are written with ``repr`` (shortest round-trip form), so loading a
checkpoint gives back bitwise-identical arrays.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .autodiff import ContractError
from .meta import FineTuneState, MetaState
from .nn import NetSpec
from .optim import AdamState
from .params import ParamSet

FORMAT_VERSION = 1


class CheckpointError(ContractError):
    """Unreadable checkpoint, unknown format version or mismatched network spec."""


def _encode_set(ps: ParamSet) -> dict[str, Any]:
    out = {}
    for name, v in ps.numpy().items():
        a = np.asarray(v, dtype=np.float64)
        out[name] = {"shape": list(a.shape), "data": [float(x) for x in a.ravel()]}
    return out


def _decode_set(d: dict[str, Any], spec: NetSpec | None = None, what: str = "params") -> ParamSet:
    try:
        ps = ParamSet((k, np.array(e["data"], dtype=np.float64).reshape(e["shape"])) for k, e in d.items())
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint: malformed parameter block {what!r}: {exc}") from exc
    if spec is not None:
        expected = [(n, tuple(s)) for n, s in spec.layout()]
        got = [(n, tuple(np.shape(v))) for n, v in ps.items()]
        if got != expected:
            raise CheckpointError(f"checkpoint: {what} layout {got} does not match its network spec {expected}")
    return ps


def _encode_adam(s: AdamState) -> dict[str, Any]:
    return {
        "t": s.t,
        "beta1": s.beta1,
        "beta2": s.beta2,
        "eps": s.eps,
        "m": _encode_set(s.m),
        "v": _encode_set(s.v),
    }


def _decode_adam(d: dict[str, Any], spec: NetSpec, what: str) -> AdamState:
    return AdamState(
        _decode_set(d["m"], spec, f"{what}.m"),
        _decode_set(d["v"], spec, f"{what}.v"),
        int(d["t"]),
        float(d["beta1"]),
        float(d["beta2"]),
        float(d["eps"]),
    )


@dataclass(frozen=True)
class Checkpoint:
    kind: str  # "meta" or "adapted"
    gen_spec: NetSpec
    disc_spec: NetSpec
    params: dict[str, ParamSet]
    optimizer: dict[str, AdamState] = field(default_factory=dict)
    step: int = 0
    config_digest: str = ""
    extra: dict[str, Any] = field(default_factory=dict)

    def meta_state(self) -> MetaState:
        if self.kind != "meta":
            raise CheckpointError(f"checkpoint holds {self.kind!r} networks, not a meta-initialization")
        return MetaState(
            self.gen_spec,
            self.disc_spec,
            self.params["theta_g"],
            self.params["theta_d"],
            self.optimizer["adam_g"],
            self.optimizer["adam_d"],
            self.step,
        )

    def check_specs(self, gen_spec: NetSpec | None, disc_spec: NetSpec | None) -> None:
        """Raise on any mismatch; a ``None`` spec is not checked."""
        for what, mine, theirs in (("generator", self.gen_spec, gen_spec), ("discriminator", self.disc_spec, disc_spec)):
            if theirs is not None and mine != theirs:
                raise CheckpointError(f"checkpoint {what} spec {mine.to_dict()} does not match expected {theirs.to_dict()}")


def from_meta(meta: MetaState, config_digest: str = "") -> Checkpoint:
    return Checkpoint(
        "meta",
        meta.gen_spec,
        meta.disc_spec,
        {"theta_g": meta.theta_g.numpy(), "theta_d": meta.theta_d.numpy()},
        {"adam_g": meta.adam_g, "adam_d": meta.adam_d},
        meta.step,
        config_digest,
    )


def from_fine_tuned(state: FineTuneState, config_digest: str = "", extra: dict[str, Any] | None = None) -> Checkpoint:
    sets = {"f": state.f, "h": state.h, "d_x": state.d_x, "d_y": state.d_y}
    return Checkpoint(
        "adapted",
        state.gen_spec,
        state.disc_spec,
        {k: v.numpy() for k, v in sets.items()},
        {},
        state.iter,
        config_digest,
        dict(extra or {}),
    )


def save(ckpt: Checkpoint, path: Path | str) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": ckpt.kind,
        "step": ckpt.step,
        "config_digest": ckpt.config_digest,
        "gen_spec": ckpt.gen_spec.to_dict(),
        "disc_spec": ckpt.disc_spec.to_dict(),
        "extra": ckpt.extra,
        "params": {k: _encode_set(v) for k, v in ckpt.params.items()},
        "optimizer": {k: _encode_adam(v) for k, v in ckpt.optimizer.items()},
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=1, allow_nan=False) + "\n")
    tmp.replace(path)


_DISC_SETS = ("theta_d", "d_x", "d_y")


def load(
    path: Path | str, gen_spec: NetSpec | None = None, disc_spec: NetSpec | None = None
) -> Checkpoint:
    """Read a checkpoint; with specs given, any mismatch raises :class:`CheckpointError`."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"checkpoint {path}: unreadable: {exc}") from exc
    if doc.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint {path}: format_version {doc.get('format_version')!r}, expected {FORMAT_VERSION}")
    try:
        gs, ds = NetSpec.from_dict(doc["gen_spec"]), NetSpec.from_dict(doc["disc_spec"])
        params = {k: _decode_set(v, ds if k in _DISC_SETS else gs, k) for k, v in doc["params"].items()}
        optimizer = {
            k: _decode_adam(v, ds if k == "adam_d" else gs, k) for k, v in doc.get("optimizer", {}).items()
        }
        ckpt = Checkpoint(
            doc["kind"], gs, ds, params, optimizer, int(doc["step"]), doc.get("config_digest", ""), doc.get("extra", {})
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint {path}: malformed: {exc}") from exc
    ckpt.check_specs(gen_spec, disc_spec)
    return ckpt
