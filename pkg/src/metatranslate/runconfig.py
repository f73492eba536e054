"""Flat ``key = value`` run configuration.

One key per line, ``#`` starts a comment, unknown keys are rejected. Every
hyperparameter, episode, task-family and network field is a key, so a config
file fully determines a run (together with the build).
"""

from __future__ import annotations

import hashlib
import math
import types
import typing
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any

from .autodiff import ContractError
from .losses import LossWeights
from .meta import Hyperparams
from .nn import discriminator_spec, generator_spec
from .protocol import ProtocolConfig
from .tasks import EpisodeConfig, TaskDistribution


class ConfigError(ContractError):
    """A config file is malformed: unknown key, bad value or invalid combination."""


@dataclass(frozen=True)
class RunConfig:
    # meta-learning
    alpha: float = 1e-4
    beta: float = 2e-4
    lambda_cyc: float = 10.0
    lambda_idt: float = 5.0
    inner_iters: int = 100
    second_order: bool = False
    seed: int = 0
    alternating: bool = False
    clip_norm: float | None = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    divergence_norm: float = 1e6
    skip_diverged: bool = False
    max_skip_fraction: float = 0.1
    # episodes
    K: int = 5
    L: int = 10
    J: int = 2
    N: int = 9
    meta_batches: int = 2000
    train_tasks: tuple[int, ...] = ()
    # task family
    family: str = "affine2d"
    dist_seed: int = 0
    noise: float = 0.05
    rotation_min: float = 0.0
    rotation_max: float = 2.0 * math.pi
    scale_min: float = 0.5
    scale_max: float = 2.0
    translation_min: float = -2.0
    translation_max: float = 2.0
    n_identities: int = 20
    task_dir: str | None = None
    # networks
    gen_hidden: tuple[int, ...] = (64, 64)
    disc_hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    # run plumbing and evaluation protocol
    output_dir: str = "run"
    checkpoint_every: int = 0
    test_batches_disjoint: bool = True
    n_tasks: int = 10
    shots: tuple[int, ...] = (5,)
    adapt_steps: int = 100
    adapt_lr: float | None = None
    n_episodes: int = 5
    folds: tuple[int, ...] = ()

    def __post_init__(self):
        try:
            self.hyperparams()
            self.distribution()
            self.protocol()
        except ContractError as exc:
            raise ConfigError(str(exc)) from exc
        if self.checkpoint_every < 0:
            raise ConfigError(f"checkpoint_every: must be >= 0, got {self.checkpoint_every}")

    # -- derived objects ----------------------------------------------------

    def distribution(self) -> TaskDistribution:
        return TaskDistribution(
            family=self.family,
            seed=self.dist_seed,
            noise=self.noise,
            rotation=(self.rotation_min, self.rotation_max),
            scale=(self.scale_min, self.scale_max),
            translation=(self.translation_min, self.translation_max),
            n_identities=self.n_identities,
            task_dir=self.task_dir,
        )

    def data_dim(self) -> int:
        if self.family in ("affine2d", "ring2d"):
            return 2
        if self.family == "glyph_identity":
            return 64
        return self.distribution().dim

    def hyperparams(self, dim: int | None = None) -> Hyperparams:
        dim = dim if dim is not None else (2 if self.family == "file_backed" else self.data_dim())
        return Hyperparams(
            alpha=self.alpha,
            beta=self.beta,
            weights=LossWeights(self.lambda_cyc, self.lambda_idt),
            inner_iters=self.inner_iters,
            episode=EpisodeConfig(self.K, self.L, self.J, self.N, self.meta_batches),
            second_order=self.second_order,
            seed=self.seed,
            gen_spec=generator_spec(dim, self.gen_hidden, self.activation),
            disc_spec=discriminator_spec(dim, self.disc_hidden, self.activation),
            alternating=self.alternating,
            clip_norm=self.clip_norm,
            adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2,
            adam_eps=self.adam_eps,
            divergence_norm=self.divergence_norm,
            skip_diverged=self.skip_diverged,
            max_skip_fraction=self.max_skip_fraction,
        )

    def protocol(self) -> ProtocolConfig:
        return ProtocolConfig(
            n_tasks=self.n_tasks,
            shots=self.shots,
            adapt_steps=self.adapt_steps,
            n_episodes=self.n_episodes,
            adapt_lr=self.adapt_lr,
            test_batches_disjoint=self.test_batches_disjoint,
        )

    def train_indices(self) -> list[int]:
        return list(self.train_tasks) if self.train_tasks else list(range(self.N))

    # -- text form ------------------------------------------------------------

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def digest(self) -> str:
        """sha256 of the canonical text form (every key, defaults included)."""
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def with_seed(self, seed: int | None) -> RunConfig:
        return self if seed is None else replace(self, seed=seed)


_HINTS = typing.get_type_hints(RunConfig)
KEYS = tuple(f.name for f in fields(RunConfig))


def _format(v: Any) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(i) for i in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _convert(key: str, raw: str) -> Any:
    hint = _HINTS[key]
    optional = False
    if isinstance(hint, types.UnionType) or typing.get_origin(hint) is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        optional, hint = True, args[0]
    if optional and raw.lower() in ("none", ""):
        return None
    try:
        if hint is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"expected true/false, got {raw!r}")
            return low in ("true", "1", "yes")
        if hint is int:
            return int(raw)
        if hint is float:
            v = float(raw)
            if not math.isfinite(v):
                raise ValueError(f"non-finite value {raw!r}")
            return v
        if typing.get_origin(hint) is tuple:
            return tuple(int(p) for p in raw.split(",") if p.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = _convert(key, raw)
    return RunConfig(**values)


def load_config(path: Path | str) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text(), str(path))

