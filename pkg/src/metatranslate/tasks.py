"""Two-domain translation tasks: synthetic task families, CSV-backed tasks, episodes and folds.

Sampling is a pure function of ``(dist.seed, task index, draw index)``. A task
index fixes the hidden relation between the domains; a draw index picks a
fresh unpaired sample of both domains from it.
"""

from __future__ import annotations

import csv
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .autodiff import ContractError

FAMILIES = ("affine2d", "ring2d", "glyph_identity", "file_backed")

# rng stream tags
_TASK, _DRAW, _POOL = 0, 1, 2


class TaskLoadError(ContractError):
    """A file-backed task is missing, malformed or too small."""


@dataclass(frozen=True)
class EpisodeConfig:
    K: int = 5
    L: int = 10
    J: int = 2
    N: int = 9
    meta_batches: int = 2000

    def __post_init__(self):
        for name in ("K", "L", "J", "N"):
            if getattr(self, name) <= 0:
                raise ContractError(f"EpisodeConfig: {name} must be positive, got {getattr(self, name)}")
        if self.meta_batches < 0:
            raise ContractError(f"EpisodeConfig: meta_batches must be >= 0, got {self.meta_batches}")


@dataclass(frozen=True)
class TaskDistribution:
    """A task family plus its parameter ranges.

    For ``affine2d``/``ring2d`` the hidden map is ``y = R(angle) diag(s) x + t``
    with angle, per-axis scale and translation drawn from the ranges below.
    ``glyph_identity`` draws pairs of identities from a pool of 8x8 binary
    glyphs. ``file_backed`` reads ``task_dir/<task>/domain_{x,y}.csv``.
    """

    family: str = "affine2d"
    seed: int = 0
    noise: float = 0.05
    rotation: tuple[float, float] = (0.0, 2.0 * math.pi)
    scale: tuple[float, float] = (0.5, 2.0)
    translation: tuple[float, float] = (-2.0, 2.0)
    n_identities: int = 20
    task_dir: str | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ContractError(f"TaskDistribution: unknown family {self.family!r}; choose from {FAMILIES}")
        if self.noise < 0:
            raise ContractError(f"TaskDistribution: noise must be >= 0, got {self.noise}")
        for name in ("rotation", "scale", "translation"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ContractError(f"TaskDistribution: {name} range ({lo}, {hi}) is empty")
        if self.family == "glyph_identity" and self.n_identities < 2:
            raise ContractError("TaskDistribution: glyph_identity needs at least 2 identities")
        if self.family == "file_backed" and not self.task_dir:
            raise ContractError("TaskDistribution: file_backed family needs task_dir")

    @property
    def dim(self) -> int:
        if self.family in ("affine2d", "ring2d"):
            return 2
        if self.family == "glyph_identity":
            return 64
        x, _ = load_task_dir(self.task_paths()[0])
        return x.shape[1]

    def task_paths(self) -> list[Path]:
        root = Path(self.task_dir or "")
        if not root.is_dir():
            raise TaskLoadError(f"task directory {root} does not exist")
        paths = sorted(p for p in root.iterdir() if p.is_dir())
        if not paths:
            raise TaskLoadError(f"task directory {root} contains no task subdirectories")
        return paths


@dataclass(frozen=True)
class TranslationTask:
    task_id: str
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    info: dict[str, Any] = field(default_factory=dict, compare=False)

    @property
    def K(self) -> int:
        return self.support_x.shape[0]

    @property
    def L(self) -> int:
        return self.query_x.shape[0]


# -- hidden task relations ------------------------------------------------------


def affine_params(dist: TaskDistribution, index: int) -> dict[str, Any]:
    rng = np.random.default_rng([dist.seed, _TASK, index])
    angle = rng.uniform(*dist.rotation)
    s = rng.uniform(*dist.scale, size=2)
    t = rng.uniform(*dist.translation, size=2)
    c, sn = math.cos(angle), math.sin(angle)
    A = np.array([[c, -sn], [sn, c]]) @ np.diag(s)
    return {"angle": angle, "scale": s, "translation": t, "matrix": A}


def _base_cloud(family: str, rng: np.random.Generator, n: int) -> np.ndarray:
    if family == "ring2d":
        theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
        r = 1.0 + 0.1 * rng.standard_normal(n)
        return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    return rng.standard_normal((n, 2))


def glyph_pool(dist: TaskDistribution) -> np.ndarray:
    """``n_identities`` distinct 8x8 binary glyphs, flattened to 64-vectors."""
    rng = np.random.default_rng([dist.seed, _POOL])
    pool: list[np.ndarray] = []
    seen = set()
    while len(pool) < dist.n_identities:
        g = (rng.uniform(size=(8, 8)) < 0.4).astype(np.float64)
        key = g.tobytes()
        if key in seen:
            continue
        seen.add(key)
        pool.append(g.reshape(-1))
    return np.stack(pool)


def glyph_pair(dist: TaskDistribution, index: int) -> tuple[int, int]:
    rng = np.random.default_rng([dist.seed, _TASK, index])
    a, b = rng.choice(dist.n_identities, size=2, replace=False)
    return int(a), int(b)


def _render_glyphs(glyph: np.ndarray, rng: np.random.Generator, n: int, noise: float) -> np.ndarray:
    img = glyph.reshape(8, 8)
    out = np.empty((n, 64))
    shifts = rng.integers(-1, 2, size=(n, 2))
    for i in range(n):
        out[i] = np.roll(img, tuple(shifts[i]), axis=(0, 1)).reshape(-1)
    return out + noise * rng.standard_normal(out.shape)


def raw_samples(dist: TaskDistribution, index: int, n: int, draw: int) -> tuple[np.ndarray, np.ndarray, dict]:
    """``n`` unpaired samples per domain of synthetic task ``index``."""
    if index < 0:
        raise ContractError(f"task index must be >= 0, got {index}")
    rng = np.random.default_rng([dist.seed, _DRAW, index, draw])
    if dist.family in ("affine2d", "ring2d"):
        p = affine_params(dist, index)
        x = _base_cloud(dist.family, rng, n)
        # Y comes from an independent cloud: no pairing with x
        z = _base_cloud(dist.family, rng, n)
        y = z @ p["matrix"].T + p["translation"] + dist.noise * rng.standard_normal((n, 2))
        return x, y, p
    if dist.family == "glyph_identity":
        pool = glyph_pool(dist)
        a, b = glyph_pair(dist, index)
        x = _render_glyphs(pool[a], rng, n, dist.noise)
        y = _render_glyphs(pool[b], rng, n, dist.noise)
        return x, y, {"identities": (a, b)}
    raise ContractError(f"raw_samples: family {dist.family!r} is not synthetic")


# -- file-backed tasks -------------------------------------------------------------


def _read_matrix(path: Path) -> np.ndarray:
    if not path.is_file():
        raise TaskLoadError(f"missing task file {path}")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise TaskLoadError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if header != [f"f{i}" for i in range(len(header))]:
        raise TaskLoadError(f"{path}: header must be f0,f1,...; got {','.join(header)}")
    data = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise TaskLoadError(f"{path}:{lineno}: expected {len(header)} values, got {len(row)}")
        try:
            data.append([float(v) for v in row])
        except ValueError as exc:
            raise TaskLoadError(f"{path}:{lineno}: {exc}") from exc
    arr = np.array(data, dtype=np.float64).reshape(-1, len(header))
    if not np.all(np.isfinite(arr)):
        raise TaskLoadError(f"{path}: non-finite values")
    return arr


def write_matrix(path: Path, data: np.ndarray) -> None:
    data = np.asarray(data, dtype=np.float64)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(data.shape[1])])
        for row in data:
            w.writerow([repr(float(v)) for v in row])


def load_task_dir(path: Path | str) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    return _read_matrix(path / "domain_x.csv"), _read_matrix(path / "domain_y.csv")


# -- episodes ---------------------------------------------------------------------


def split_support_query(
    raw_x: np.ndarray,
    raw_y: np.ndarray,
    cfg: EpisodeConfig,
    seed: int | Sequence[int],
    task_id: str = "task",
) -> TranslationTask:
    """Seeded shuffle of each domain, then the first K go to support and the next L to query."""
    need = cfg.K + cfg.L
    for name, raw in (("x", raw_x), ("y", raw_y)):
        if np.ndim(raw) != 2 or len(raw) < need:
            raise ContractError(
                f"split_support_query: domain {name} has {len(raw)} samples, needs at least K+L = {need}"
            )
    rng = np.random.default_rng(seed)
    px = rng.permutation(len(raw_x))
    py = rng.permutation(len(raw_y))
    raw_x = np.asarray(raw_x, dtype=np.float64)
    raw_y = np.asarray(raw_y, dtype=np.float64)
    return TranslationTask(
        task_id,
        raw_x[px[: cfg.K]],
        raw_y[py[: cfg.K]],
        raw_x[px[cfg.K : need]],
        raw_y[py[cfg.K : need]],
    )


def task_id(dist: TaskDistribution, index: int) -> str:
    if dist.family == "file_backed":
        return dist.task_paths()[index].name
    return f"{dist.family}-{index}"


def sample_task(dist: TaskDistribution, index: int, cfg: EpisodeConfig, draw: int = 0) -> TranslationTask:
    """One support/query episode of task ``index``; deterministic in ``(dist.seed, index, draw)``."""
    if index < 0:
        raise ContractError(f"sample_task: index must be >= 0, got {index}")
    need = cfg.K + cfg.L
    if dist.family == "file_backed":
        paths = dist.task_paths()
        if index >= len(paths):
            raise TaskLoadError(f"task index {index} out of range: {len(paths)} tasks under {dist.task_dir}")
        x, y = load_task_dir(paths[index])
        for name, arr in (("domain_x.csv", x), ("domain_y.csv", y)):
            if len(arr) < need:
                raise TaskLoadError(f"{paths[index] / name}: {len(arr)} samples, need at least {need} (K+L)")
        return split_support_query(x, y, cfg, [dist.seed, _DRAW, index, draw], task_id=paths[index].name)
    x, y, info = raw_samples(dist, index, need, draw)
    # raw synthetic draws are already iid; shuffling keeps one code path
    t = split_support_query(x, y, cfg, [dist.seed, _DRAW, index, draw, 1], task_id=task_id(dist, index))
    return TranslationTask(t.task_id, t.support_x, t.support_y, t.query_x, t.query_y, info)


def eval_episodes(
    dist: TaskDistribution,
    index: int,
    cfg: EpisodeConfig,
    n_batches: int = 5,
    disjoint: bool = True,
    first_draw: int = 10_000,
) -> list[TranslationTask]:
    """Evaluation episodes of a held-out task.

    With ``disjoint`` no sample is shared between episodes: one pool of
    ``n_batches * (K + L)`` samples per domain is partitioned. Otherwise each
    episode is an independent draw (file-backed episodes may then overlap).
    """
    if n_batches < 1:
        raise ContractError(f"eval_episodes: n_batches must be >= 1, got {n_batches}")
    if not disjoint:
        return [sample_task(dist, index, cfg, draw=first_draw + b) for b in range(n_batches)]
    need = cfg.K + cfg.L
    if dist.family == "file_backed":
        path = dist.task_paths()[index]
        x, y = load_task_dir(path)
        tid = path.name
        if min(len(x), len(y)) < n_batches * need:
            raise TaskLoadError(
                f"{path}: {min(len(x), len(y))} samples, need {n_batches * need} for {n_batches} disjoint episodes"
            )
        info: dict = {}
    else:
        x, y, info = raw_samples(dist, index, n_batches * need, first_draw)
        tid = task_id(dist, index)
    rng = np.random.default_rng([dist.seed, _DRAW, index, first_draw, 2])
    px, py = rng.permutation(len(x)), rng.permutation(len(y))
    out = []
    for b in range(n_batches):
        sx, sy = px[b * need : (b + 1) * need], py[b * need : (b + 1) * need]
        out.append(
            TranslationTask(tid, x[sx[: cfg.K]], y[sy[: cfg.K]], x[sx[cfg.K :]], y[sy[cfg.K :]], info)
        )
    return out


def holdout_folds(tasks: Sequence[Any]) -> list[tuple[list[Any], Any]]:
    """Task-level leave-one-out: fold i tests on ``tasks[i]`` and trains on the rest."""
    tasks = list(tasks)
    if len(tasks) < 2:
        raise ContractError(f"holdout_folds: need at least 2 tasks, got {len(tasks)}")
    return [(tasks[:i] + tasks[i + 1 :], tasks[i]) for i in range(len(tasks))]


def materialize(dist: TaskDistribution, out_dir: Path | str, n_tasks: int, n_samples: int) -> list[Path]:
    """Write synthetic tasks in the file-backed layout (one directory per task)."""
    out = Path(out_dir)
    paths = []
    for i in range(n_tasks):
        x, y, _ = raw_samples(dist, i, n_samples, draw=0)
        p = out / f"task_{i:03d}"
        p.mkdir(parents=True, exist_ok=True)
        write_matrix(p / "domain_x.csv", x)
        write_matrix(p / "domain_y.csv", y)
        paths.append(p)
    return paths
