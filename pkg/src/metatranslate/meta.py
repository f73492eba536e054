"""Meta-learning of a translation initialization (generator G, discriminator D).

Per task the meta-parameters seed four networks: F and D_Y start from G and D
and stay linked to them; H and D_X start from weight copies of G and D that
are cut from the meta-gradient. All four are fine-tuned on the support set
(generators descend, discriminators ascend the same loss), the fine-tuned
networks are scored on the query set, and that score drives the Adam update
of (G, D).

Two meta-gradient modes share every code path:

* first order (default): query-loss gradients w.r.t. the fine-tuned F and D_Y
  are applied to G and D directly; those w.r.t. H and D_X are dropped.
* second order: the inner updates are recorded with ``create_graph`` and the
  query loss is differentiated through them back to (G, D).
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tape, Var
from .losses import LossBreakdown, LossWeights, composite_objective
from .nn import Net, NetSpec, clone_detached, combine, discriminator_spec, generator_spec, init_params, param_grads
from .optim import AdamState, adam_step, clip_by_global_norm, sgd_step
from .params import ParamSet
from .tasks import EpisodeConfig, TaskDistribution, TranslationTask, sample_task

logger = logging.getLogger(__name__)

DESCENT, ASCENT = "descent", "ascent"
# update direction of (f, h, d_x, d_y)
DIRECTIONS = (DESCENT, DESCENT, ASCENT, ASCENT)


class TrainingDivergence(RuntimeError):
    """A loss went non-finite or a parameter norm blew up."""

    def __init__(self, msg: str, breakdown: LossBreakdown | None = None, task_id: str | None = None, curve=None):
        super().__init__(msg if task_id is None else f"task {task_id}: {msg}")
        self.breakdown = breakdown
        self.task_id = task_id
        self.curve = list(curve or [])


class MetaTrainingAborted(RuntimeError):
    """Too many meta-batches diverged and were skipped."""


@dataclass(frozen=True)
class Hyperparams:
    alpha: float = 1e-4
    beta: float = 2e-4
    weights: LossWeights = field(default_factory=LossWeights)
    inner_iters: int = 100
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    second_order: bool = False
    seed: int = 0
    gen_spec: NetSpec = field(default_factory=generator_spec)
    disc_spec: NetSpec = field(default_factory=discriminator_spec)
    alternating: bool = False
    clip_norm: float | None = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    divergence_norm: float = 1e6
    skip_diverged: bool = False
    max_skip_fraction: float = 0.1

    def __post_init__(self):
        # zero learning rates are allowed: they make an update a no-op
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ContractError(f"Hyperparams: {name} must be finite and >= 0, got {v}")
        if self.inner_iters < 0:
            raise ContractError(f"Hyperparams: inner_iters must be >= 0, got {self.inner_iters}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ContractError(f"Hyperparams: clip_norm must be positive, got {self.clip_norm}")
        if not 0 <= self.max_skip_fraction <= 1:
            raise ContractError(f"Hyperparams: max_skip_fraction must lie in [0, 1], got {self.max_skip_fraction}")
        if self.gen_spec.is_discriminator or not self.disc_spec.is_discriminator:
            raise ContractError("Hyperparams: gen_spec needs identity output and disc_spec sigmoid output")
        g, d = self.gen_spec, self.disc_spec
        if not g.input_dim == g.output_dim == d.input_dim:
            # one meta-generator serves both translation directions
            raise ContractError(
                f"Hyperparams: generator {g.input_dim}->{g.output_dim} and discriminator input {d.input_dim} must agree"
            )

    @property
    def mode(self) -> str:
        return "second_order" if self.second_order else "first_order"


@dataclass(frozen=True)
class MetaState:
    gen_spec: NetSpec
    disc_spec: NetSpec
    theta_g: ParamSet
    theta_d: ParamSet
    adam_g: AdamState
    adam_d: AdamState
    step: int = 0


@dataclass(frozen=True)
class FineTuneState:
    gen_spec: NetSpec
    disc_spec: NetSpec
    f: ParamSet
    h: ParamSet
    d_x: ParamSet
    d_y: ParamSet
    iter: int = 0

    @property
    def sets(self) -> tuple[ParamSet, ParamSet, ParamSet, ParamSet]:
        return (self.f, self.h, self.d_x, self.d_y)

    def with_sets(self, sets: Sequence[ParamSet], iter: int | None = None) -> FineTuneState:
        f, h, dx, dy = sets
        return replace(self, f=f, h=h, d_x=dx, d_y=dy, iter=self.iter if iter is None else iter)

    def numpy(self) -> FineTuneState:
        return self.with_sets([s.numpy() for s in self.sets])

    def translate_x(self, x: Any) -> np.ndarray:
        """F applied to domain-X samples."""
        return np.asarray(ad.value(Net(self.gen_spec, self.f.numpy())(np.asarray(x, dtype=np.float64))))

    def translate_y(self, y: Any) -> np.ndarray:
        """H applied to domain-Y samples."""
        return np.asarray(ad.value(Net(self.gen_spec, self.h.numpy())(np.asarray(y, dtype=np.float64))))


def initial_state(hp: Hyperparams, seed: int | None = None) -> MetaState:
    """Randomly initialized meta-generator and meta-discriminator."""
    seed = hp.seed if seed is None else seed
    tg = init_params(hp.gen_spec, [seed, 0])
    td = init_params(hp.disc_spec, [seed, 1])
    return MetaState(hp.gen_spec, hp.disc_spec, tg, td, _fresh_adam(tg, hp), _fresh_adam(td, hp), 0)


def _fresh_adam(params: ParamSet, hp: Hyperparams) -> AdamState:
    return AdamState.zeros_like(params, hp.adam_beta1, hp.adam_beta2, hp.adam_eps)


def _tape_of(*sets: ParamSet) -> Tape | None:
    for s in sets:
        for v in s.values():
            if type(v) is Var and v.requires_grad:
                return v.tape
    return None


def _as_leaves(sets: Sequence[ParamSet], tape: Tape) -> list[ParamSet]:
    # keep live sets, turn plain arrays into fresh leaves
    return [s if s.is_differentiable() else s.leaves(tape) for s in sets]


def support_objective(
    gen_spec: NetSpec, disc_spec: NetSpec, sets: Sequence[ParamSet], x: Any, y: Any, w: LossWeights
) -> LossBreakdown:
    f, h, dx, dy = sets
    return composite_objective(
        Net(gen_spec, f), Net(gen_spec, h), Net(disc_spec, dx), Net(disc_spec, dy), x, y, w
    )


def _step_sets(
    sets: Sequence[ParamSet], grads: Sequence[ParamSet], lr: float, hp: Hyperparams, which: Sequence[int]
) -> list[ParamSet]:
    out = list(sets)
    for i in which:
        if lr == 0.0:
            continue
        g = clip_by_global_norm(grads[i], hp.clip_norm)
        out[i] = sgd_step(sets[i], g, lr, DIRECTIONS[i])
    return out


def _check_loss(bd: LossBreakdown, where: str) -> None:
    if not bd.is_finite():
        raise TrainingDivergence(f"non-finite loss during {where}: {bd.as_dict()}", breakdown=bd.floats())


def _check_params(sets: Sequence[ParamSet], hp: Hyperparams, where: str, bd: LossBreakdown | None = None) -> None:
    for s in sets:
        for v in s.values():
            a = ad.value(v)
            if not np.all(np.isfinite(a)) or (a.size and np.max(np.abs(a)) > hp.divergence_norm):
                raise TrainingDivergence(
                    f"parameter blow-up during {where} (|theta| > {hp.divergence_norm:g})",
                    breakdown=None if bd is None else bd.floats(),
                )


def _update(
    gen_spec: NetSpec,
    disc_spec: NetSpec,
    sets: Sequence[ParamSet],
    task: TranslationTask,
    hp: Hyperparams,
    where: str,
) -> tuple[list[ParamSet], LossBreakdown]:
    """One simultaneous (or alternating) SGD update of all four networks from the support loss."""
    x, y = task.support_x, task.support_y
    bd = support_objective(gen_spec, disc_spec, sets, x, y, hp.weights)
    _check_loss(bd, where)
    if not hp.alternating:
        grads = param_grads(bd.total, sets, create_graph=hp.second_order)
        new = _step_sets(sets, grads, hp.alpha, hp, range(4))
    else:
        # discriminators first, then generators against the updated discriminators
        grads = param_grads(bd.total, sets, create_graph=hp.second_order)
        new = _step_sets(sets, grads, hp.alpha, hp, (2, 3))
        bd2 = support_objective(gen_spec, disc_spec, new, x, y, hp.weights)
        _check_loss(bd2, where)
        g2 = param_grads(bd2.total, new, create_graph=hp.second_order)
        new = _step_sets(new, g2, hp.alpha, hp, (0, 1))
    _check_params(new, hp, where, bd)
    return new, bd


def init_step(
    meta: MetaState, task: TranslationTask, hp: Hyperparams, theta: tuple[ParamSet, ParamSet] | None = None
) -> FineTuneState:
    """Initialization update of the four task networks from (G, D, wc(G), wc(D)).

    ``theta`` optionally replaces ``(meta.theta_g, meta.theta_d)``; pass tape
    leaves here to differentiate the result w.r.t. the meta-parameters.
    """
    theta_g, theta_d = theta if theta is not None else (meta.theta_g, meta.theta_d)
    tape = _tape_of(theta_g, theta_d) if hp.second_order else None
    tape = tape or Tape()
    g, d = _as_leaves([theta_g, theta_d], tape)
    g_wc = clone_detached(g).leaves(tape)
    d_wc = clone_detached(d).leaves(tape)
    sets, _ = _update(meta.gen_spec, meta.disc_spec, [g, g_wc, d_wc, d], task, hp, "initialization step")
    f0, h0, dx0, dy0 = sets
    if hp.second_order:
        # the dual-task networks start as constants w.r.t. the meta-parameters
        h0, dx0 = clone_detached(h0), clone_detached(dx0)
    else:
        f0, h0, dx0, dy0 = (s.numpy() for s in sets)
    return FineTuneState(meta.gen_spec, meta.disc_spec, f0, h0, dx0, dy0, 0)


def inner_step(state: FineTuneState, task: TranslationTask, hp: Hyperparams) -> FineTuneState:
    """One fine-tuning update on the support set: generators descend, discriminators ascend."""
    tape = (_tape_of(*state.sets) if hp.second_order else None) or Tape()
    sets = _as_leaves(state.sets, tape) if hp.second_order else [s.leaves(tape) for s in state.sets]
    new, _ = _update(state.gen_spec, state.disc_spec, sets, task, hp, f"inner step {state.iter + 1}")
    if not hp.second_order:
        new = [s.numpy() for s in new]
    return state.with_sets(new, iter=state.iter + 1)


def fine_tune(
    meta: MetaState, task: TranslationTask, hp: Hyperparams, theta: tuple[ParamSet, ParamSet] | None = None
) -> FineTuneState:
    """Initialization step followed by ``hp.inner_iters`` inner steps."""
    state = init_step(meta, task, hp, theta)
    for _ in range(hp.inner_iters):
        state = inner_step(state, task, hp)
    return state


def query_objective(state: FineTuneState, task: TranslationTask, hp: Hyperparams) -> LossBreakdown:
    """Composite objective of the fine-tuned networks on the query set."""
    return support_objective(state.gen_spec, state.disc_spec, state.sets, task.query_x, task.query_y, hp.weights)


def _metric_row(step: int, task_id: str, bd: LossBreakdown, mode: str) -> dict[str, Any]:
    return {"step": step, "task_id": task_id, **bd.as_dict(), "mode": mode}


def meta_gradient(
    meta: MetaState, tasks: Sequence[TranslationTask], hp: Hyperparams
) -> tuple[ParamSet, ParamSet, list[dict[str, Any]]]:
    """Gradients of the summed query objectives w.r.t. (theta_g, theta_d), in task order."""
    if len(tasks) < 1:
        raise ContractError("meta_update: at least one task is required")
    g_sum: ParamSet | None = None
    d_sum: ParamSet | None = None
    rows = []
    for task in tasks:
        try:
            if hp.second_order:
                tape = Tape()
                tg, td = meta.theta_g.leaves(tape), meta.theta_d.leaves(tape)
                state = fine_tune(meta, task, hp, theta=(tg, td))
                q = query_objective(state, task, hp)
                _check_loss(q, "query objective")
                gg, gd = param_grads(q.total, [tg, td])
            else:
                state = fine_tune(meta, task, hp)
                tape = Tape()
                leaves = [s.leaves(tape) for s in state.sets]
                q = query_objective(state.with_sets(leaves), task, hp)
                _check_loss(q, "query objective")
                # only the forward direction (F, D_Y) trains the meta-parameters
                gg, gd = param_grads(q.total, [leaves[0], leaves[3]])
        except TrainingDivergence as exc:
            raise TrainingDivergence(str(exc), exc.breakdown, task_id=task.task_id) from exc
        gg, gd = gg.numpy(), gd.numpy()
        g_sum = gg if g_sum is None else combine(g_sum, gg, 1.0)
        d_sum = gd if d_sum is None else combine(d_sum, gd, 1.0)
        rows.append(_metric_row(meta.step, task.task_id, q, hp.mode))
    return g_sum, d_sum, rows


def meta_update(
    meta: MetaState, tasks: Sequence[TranslationTask], hp: Hyperparams
) -> tuple[MetaState, list[dict[str, Any]]]:
    """Adam descent on theta_g and ascent on theta_d along the summed query-loss gradient."""
    g_sum, d_sum, rows = meta_gradient(meta, tasks, hp)
    if hp.beta == 0.0:
        return replace(meta, step=meta.step + 1), rows
    tg, adam_g = adam_step(meta.theta_g, clip_by_global_norm(g_sum, hp.clip_norm), meta.adam_g, hp.beta, DESCENT)
    td, adam_d = adam_step(meta.theta_d, clip_by_global_norm(d_sum, hp.clip_norm), meta.adam_d, hp.beta, ASCENT)
    _check_params([tg, td], hp, "meta update")
    return replace(meta, theta_g=tg, theta_d=td, adam_g=adam_g, adam_d=adam_d, step=meta.step + 1), rows


def sample_meta_batch(
    dist: TaskDistribution, train_indices: Sequence[int], hp: Hyperparams, batch: int
) -> list[TranslationTask]:
    """The J tasks of meta-batch ``batch``; a pure function of the seeds and ``batch``."""
    cfg = hp.episode
    rng = np.random.default_rng([hp.seed, dist.seed, 7, batch])
    picks = rng.choice(len(train_indices), size=cfg.J, replace=cfg.J > len(train_indices))
    return [sample_task(dist, int(train_indices[p]), cfg, draw=batch * cfg.J + j) for j, p in enumerate(picks)]


MetricsSink = Callable[[int, list[dict[str, Any]]], None]
CheckpointSink = Callable[[MetaState, bool], None]


def meta_train(
    dist: TaskDistribution,
    hp: Hyperparams,
    train_indices: Sequence[int] | None = None,
    on_metrics: MetricsSink | None = None,
    on_checkpoint: CheckpointSink | None = None,
    checkpoint_every: int = 0,
    init: MetaState | None = None,
) -> MetaState:
    """Run ``hp.episode.meta_batches`` meta-updates over freshly sampled task batches.

    ``on_metrics(batch, rows)`` is called once per meta-batch; ``rows`` holds
    one record per task (empty when a diverged batch was skipped).
    ``on_checkpoint(state, final)`` fires every ``checkpoint_every`` batches
    and once at the end.
    """
    meta = init if init is not None else initial_state(hp)
    indices = list(train_indices) if train_indices is not None else list(range(hp.episode.N))
    if not indices:
        raise ContractError("meta_train: no training tasks")
    n = hp.episode.meta_batches
    allowed = hp.max_skip_fraction * n
    skipped = 0
    for b in range(n):
        tasks = sample_meta_batch(dist, indices, hp, b)
        try:
            meta, rows = meta_update(meta, tasks, hp)
        except TrainingDivergence as exc:
            if not hp.skip_diverged:
                raise
            skipped += 1
            logger.warning("meta-batch %d skipped: %s", b, exc)
            if skipped > allowed:
                raise MetaTrainingAborted(
                    f"{skipped} of {b + 1} meta-batches diverged (limit {hp.max_skip_fraction:.0%} of {n})"
                ) from exc
            meta, rows = replace(meta, step=meta.step + 1), []
        if on_metrics is not None:
            on_metrics(b, rows)
        if on_checkpoint is not None and checkpoint_every > 0 and (b + 1) % checkpoint_every == 0 and b + 1 < n:
            on_checkpoint(meta, False)
    if on_checkpoint is not None:
        on_checkpoint(meta, True)
    return meta


def adapt(
    meta: MetaState, task: TranslationTask, hp: Hyperparams, steps: int, lr: float | None = None
) -> tuple[FineTuneState, list[LossBreakdown]]:
    """Fine-tune (G, D) on an unseen task's support set with Adam.

    The four networks start as (G, wc(G), wc(D), D) and each gets its own
    fresh Adam state; ``lr`` defaults to ``hp.beta``. ``curve[i]`` is the
    support loss after ``i`` updates, i.e. the evaluation whose gradients
    produce update ``i + 1``.
    """
    if steps < 1:
        raise ContractError(f"adapt: steps must be >= 1, got {steps}")
    lr = hp.beta if lr is None else lr
    if not (math.isfinite(lr) and lr >= 0):
        raise ContractError(f"adapt: learning rate must be finite and >= 0, got {lr}")
    gs, ds = meta.gen_spec, meta.disc_spec
    sets = [meta.theta_g.numpy(), clone_detached(meta.theta_g), clone_detached(meta.theta_d), meta.theta_d.numpy()]
    states = [_fresh_adam(s, hp) for s in sets]
    curve: list[LossBreakdown] = []
    for step in range(steps):
        tape = Tape()
        leaves = [s.leaves(tape) for s in sets]
        bd = support_objective(gs, ds, leaves, task.support_x, task.support_y, hp.weights)
        if not bd.is_finite():
            raise TrainingDivergence(
                f"non-finite loss at adaptation step {step}", bd.floats(), task_id=task.task_id, curve=curve
            )
        curve.append(bd.floats())
        if lr == 0.0:
            continue
        grads = param_grads(bd.total, leaves)
        which = range(4) if not hp.alternating else (2, 3)
        for i in which:
            g = clip_by_global_norm(grads[i], hp.clip_norm)
            sets[i], states[i] = adam_step(sets[i], g, states[i], lr, DIRECTIONS[i])
        if hp.alternating:
            tape = Tape()
            leaves = [s.leaves(tape) for s in sets]
            bd2 = support_objective(gs, ds, leaves, task.support_x, task.support_y, hp.weights)
            grads = param_grads(bd2.total, leaves)
            for i in (0, 1):
                g = clip_by_global_norm(grads[i], hp.clip_norm)
                sets[i], states[i] = adam_step(sets[i], g, states[i], lr, DIRECTIONS[i])
        try:
            _check_params(sets, hp, f"adaptation step {step}", bd)
        except TrainingDivergence as exc:
            raise TrainingDivergence(str(exc), exc.breakdown, task_id=task.task_id, curve=curve) from exc
    return FineTuneState(gs, ds, *sets, iter=steps), curve
