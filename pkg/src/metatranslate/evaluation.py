"""Frechet distance between Gaussian fits, convergence statistics and fold reports.

The Frechet distance is computed on raw samples rather than on Inception
embeddings, so scores are only comparable within this framework. Lower is
better.
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .autodiff import ContractError
from .meta import FineTuneState, Hyperparams, LossBreakdown, adapt, initial_state
from .tasks import TranslationTask

COV_JITTER = 1e-10
METHODS = ("mtgan", "cyclegan_scratch")
DIRECTIONS = ("forward", "backward")


@dataclass(frozen=True)
class GaussianFit:
    mu: np.ndarray
    sigma: np.ndarray

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


def fit_gaussian(samples: Any) -> GaussianFit:
    """Sample mean and unbiased (1/(n-1)) covariance, symmetrized."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ContractError(f"fit_gaussian: expected an [n, d] matrix, got shape {x.shape}")
    n = x.shape[0]
    if n < 2:
        raise ContractError(f"fit_gaussian: need at least 2 samples, got {n}")
    mu = x.mean(axis=0)
    c = x - mu
    sigma = c.T @ c / (n - 1)
    return GaussianFit(mu, 0.5 * (sigma + sigma.T))


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_gaussian(a: GaussianFit, b: GaussianFit) -> float:
    """``|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    ``tr (S_a S_b)^(1/2)`` equals the sum of singular values of
    ``S_a^(1/2) S_b^(1/2)``; taking it from an SVD avoids square roots of
    round-off-sized eigenvalues. Rank-deficient covariances get a 1e-10 ridge first.
    """
    if a.mu.shape != b.mu.shape or a.sigma.shape != b.sigma.shape:
        raise ContractError(f"frechet_gaussian: dimension mismatch {a.mu.shape} vs {b.mu.shape}")
    sa, sb = a.sigma, b.sigma
    d = sa.shape[0]
    try:
        if min(np.linalg.eigvalsh(sa).min(), np.linalg.eigvalsh(sb).min()) < COV_JITTER:
            sa = sa + COV_JITTER * np.eye(d)
            sb = sb + COV_JITTER * np.eye(d)
        tr_root = float(np.sum(np.linalg.svd(_psd_sqrt(sa) @ _psd_sqrt(sb), compute_uv=False)))
    except np.linalg.LinAlgError as exc:
        raise FloatingPointError(f"frechet_gaussian: eigendecomposition failed: {exc}") from exc
    diff = a.mu - b.mu
    val = float(diff @ diff) + float(np.trace(sa) + np.trace(sb)) - 2.0 * tr_root
    if not math.isfinite(val):
        raise FloatingPointError("frechet_gaussian: non-finite result")
    if val < 0:
        if val < -1e-8:
            raise FloatingPointError(f"frechet_gaussian: negative distance {val}")
        val = 0.0
    return val


def frechet_samples(x: Any, y: Any) -> float:
    return frechet_gaussian(fit_gaussian(x), fit_gaussian(y))


def cyclegan_scratch(
    task: TranslationTask, hp: Hyperparams, steps: int, seed: int, lr: float | None = None
) -> tuple[FineTuneState, list[LossBreakdown]]:
    """Baseline: the same adaptation procedure started from a random initialization."""
    return adapt(initial_state(hp, seed=seed), task, hp, steps, lr=lr)


@dataclass(frozen=True)
class ConvergenceSummary:
    median: np.ndarray
    auc: float
    steps_to_threshold: int | None  # None: never reached


def convergence_stats(curves: Sequence[Sequence[float]], threshold: float | None = None) -> ConvergenceSummary:
    """Pointwise median curve, its trapezoid area and the first step strictly below ``threshold``."""
    if len(curves) == 0:
        raise ContractError("convergence_stats: no curves")
    lengths = {len(c) for c in curves}
    if len(lengths) != 1:
        raise ContractError(f"convergence_stats: curves differ in length {sorted(lengths)}")
    arr = np.asarray(curves, dtype=np.float64)
    med = np.median(arr, axis=0)
    auc = float(np.sum(0.5 * (med[1:] + med[:-1]))) if med.size > 1 else 0.0
    hit = None
    if threshold is not None:
        below = np.nonzero(med < threshold)[0]
        hit = int(below[0]) if below.size else None
    return ConvergenceSummary(med, auc, hit)


@dataclass(frozen=True)
class RunReport:
    fold_id: int
    method: str
    K: int
    frechet_forward: float
    frechet_backward: float
    cyc_curve: tuple[float, ...] = ()
    seed: int = 0
    batch: int = 0
    dim: int = 2

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractError(f"RunReport: method must be one of {METHODS}, got {self.method!r}")
        if self.frechet_forward < 0 or self.frechet_backward < 0:
            raise ContractError("RunReport: Frechet distances must be >= 0")

    def to_dict(self) -> dict[str, Any]:
        return {
            "fold_id": self.fold_id,
            "method": self.method,
            "K": self.K,
            "frechet_forward": self.frechet_forward,
            "frechet_backward": self.frechet_backward,
            "cyc_curve": list(self.cyc_curve),
            "seed": self.seed,
            "batch": self.batch,
            "dim": self.dim,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> RunReport:
        return cls(
            int(d["fold_id"]),
            d["method"],
            int(d["K"]),
            float(d["frechet_forward"]),
            float(d["frechet_backward"]),
            tuple(float(v) for v in d.get("cyc_curve", ())),
            int(d.get("seed", 0)),
            int(d.get("batch", 0)),
            int(d.get("dim", 2)),
        )

    def frechet(self, direction: str) -> float:
        return self.frechet_forward if direction == "forward" else self.frechet_backward


@dataclass(frozen=True)
class ReportRow:
    method: str
    direction: str
    mean: float
    std: float
    n: int
    fold_mean: float  # mean of per-fold means
    K: int | None = None

    @property
    def single(self) -> bool:
        """True when std is the n = 1 convention rather than an estimate."""
        return self.n == 1


@dataclass(frozen=True)
class FoldReport:
    rows: list[ReportRow]
    shot_rows: list[ReportRow] = field(default_factory=list)

    def row(self, method: str, direction: str, K: int | None = None) -> ReportRow:
        pool = self.rows if K is None else self.shot_rows
        for r in pool:
            if r.method == method and r.direction == direction and r.K == K:
                return r
        raise KeyError((method, direction, K))

    def gap(self, direction: str = "forward", K: int | None = None) -> float:
        """Scratch mean minus meta-init mean (positive: meta-init is better)."""
        return self.row("cyclegan_scratch", direction, K).mean - self.row("mtgan", direction, K).mean

    def summary(self) -> str:
        lines = [
            "Frechet distance on raw samples (lower is better; not comparable to image FID).",
            f"{'method':<18}{'direction':<10}{'K':>4}{'mean':>12}{'std':>10}{'n':>5}{'fold_mean':>12}",
        ]
        for r in [*self.rows, *self.shot_rows]:
            k = "all" if r.K is None else str(r.K)
            flag = " (n=1, std by convention)" if r.single else ""
            lines.append(
                f"{r.method:<18}{r.direction:<10}{k:>4}{r.mean:>12.5f}{r.std:>10.5f}{r.n:>5}{r.fold_mean:>12.5f}{flag}"
            )
        return "\n".join(lines)


def _aggregate(reports: Sequence[RunReport], method: str, direction: str, K: int | None) -> ReportRow | None:
    sel = sorted(
        (r for r in reports if r.method == method and (K is None or r.K == K)),
        key=lambda r: (r.fold_id, r.K, r.seed, r.batch),
    )
    if not sel:
        return None
    vals = np.array([r.frechet(direction) for r in sel])
    std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    per_fold: dict[int, list[float]] = {}
    for r in sel:
        per_fold.setdefault(r.fold_id, []).append(r.frechet(direction))
    fold_mean = float(np.mean([np.mean(v) for _, v in sorted(per_fold.items())]))
    return ReportRow(method, direction, float(np.mean(vals)), std, len(vals), fold_mean, K)


def fold_report(reports: Iterable[RunReport]) -> FoldReport:
    """Mean and sample std of Frechet scores per method and direction, plus per-K rows."""
    reports = list(reports)
    if not reports:
        raise ContractError("fold_report: no run reports")
    dims = {r.dim for r in reports}
    if len(dims) != 1:
        raise ContractError(f"fold_report: reports mix sample dimensionalities {sorted(dims)}")
    methods = [m for m in METHODS if any(r.method == m for r in reports)]
    rows = [row for m in methods for d in DIRECTIONS if (row := _aggregate(reports, m, d, None))]
    shots = sorted({r.K for r in reports})
    shot_rows = []
    if len(shots) > 1:
        shot_rows = [
            row for k in shots for m in methods for d in DIRECTIONS if (row := _aggregate(reports, m, d, k))
        ]
    return FoldReport(rows, shot_rows)


def nearest_centroid_accuracy(samples: Any, centroids: Any, target: int) -> float:
    """Share of samples whose nearest centroid is ``target``.

    Stand-in for identity-classification accuracy on glyph tasks.
    """
    x = np.asarray(samples, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    d2 = ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=-1)
    return float(np.mean(np.argmin(d2, axis=1) == target))
