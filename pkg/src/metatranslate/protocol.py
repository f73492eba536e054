"""Task-level hold-one-out comparison of meta-learned vs random initialization."""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, replace

from .autodiff import ContractError
from .evaluation import RunReport, cyclegan_scratch, frechet_samples
from .meta import Hyperparams, MetaState, adapt, meta_train
from .tasks import TaskDistribution, eval_episodes, holdout_folds

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ProtocolConfig:
    n_tasks: int = 10
    shots: tuple[int, ...] = (5,)
    adapt_steps: int = 100
    n_episodes: int = 5
    adapt_lr: float | None = None
    test_batches_disjoint: bool = True

    def __post_init__(self):
        if self.n_tasks < 2:
            raise ContractError("ProtocolConfig: need at least 2 tasks for hold-one-out folds")
        if self.adapt_steps < 1 or self.n_episodes < 1 or not self.shots:
            raise ContractError("ProtocolConfig: adapt_steps, n_episodes and shots must be non-empty/positive")


def scratch_seed(hp: Hyperparams, fold_id: int, episode: int) -> int:
    return 1_000_003 * (hp.seed + 1) + 1_000 * fold_id + episode


def evaluate_fold(
    meta: MetaState,
    dist: TaskDistribution,
    hp: Hyperparams,
    pcfg: ProtocolConfig,
    fold_id: int,
    test_index: int,
) -> list[RunReport]:
    """Adapt meta-init and scratch networks on the held-out task's episodes and score them."""
    reports = []
    for K in pcfg.shots:
        cfg = replace(hp.episode, K=K)
        episodes = eval_episodes(dist, test_index, cfg, pcfg.n_episodes, pcfg.test_batches_disjoint)
        for e, task in enumerate(episodes):
            runs = {
                "mtgan": adapt(meta, task, hp, pcfg.adapt_steps, lr=pcfg.adapt_lr),
                "cyclegan_scratch": cyclegan_scratch(
                    task, hp, pcfg.adapt_steps, seed=scratch_seed(hp, fold_id, e), lr=pcfg.adapt_lr
                ),
            }
            for method, (state, curve) in runs.items():
                reports.append(
                    RunReport(
                        fold_id=fold_id,
                        method=method,
                        K=K,
                        frechet_forward=frechet_samples(state.translate_x(task.query_x), task.query_y),
                        frechet_backward=frechet_samples(state.translate_y(task.query_y), task.query_x),
                        cyc_curve=tuple(c.cyc for c in curve),
                        seed=e,
                        batch=e,
                        dim=task.query_x.shape[1],
                    )
                )
    return reports


def run_protocol(
    dist: TaskDistribution,
    hp: Hyperparams,
    pcfg: ProtocolConfig,
    folds: Sequence[int] | None = None,
    on_fold: Callable[[int, MetaState, list[RunReport]], None] | None = None,
) -> list[RunReport]:
    """Meta-train on N tasks and evaluate on the held-out one, for each selected fold."""
    all_folds = holdout_folds(list(range(pcfg.n_tasks)))
    chosen = range(len(all_folds)) if folds is None else folds
    reports: list[RunReport] = []
    for fold_id in chosen:
        train, test = all_folds[fold_id]
        fold_hp = replace(hp, episode=replace(hp.episode, N=len(train)))
        logger.info("fold %d: meta-training on %s, testing on task %d", fold_id, train, test)
        meta = meta_train(dist, fold_hp, train_indices=train)
        fold_reports = evaluate_fold(meta, dist, fold_hp, pcfg, fold_id, test)
        if on_fold is not None:
            on_fold(fold_id, meta, fold_reports)
        reports.extend(fold_reports)
    return reports
