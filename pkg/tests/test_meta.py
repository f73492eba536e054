import functools
import math
from dataclasses import replace

import numpy as np
import pytest

import hand_oracle as ho
from metatranslate import autodiff as ad
from metatranslate.autodiff import ContractError, Tape
from metatranslate.gradcheck import constant_copy_objective, meta_gradient_check
from metatranslate.losses import LossWeights
from metatranslate.meta import (
    FineTuneState,
    Hyperparams,
    MetaState,
    TrainingDivergence,
    adapt,
    fine_tune,
    init_step,
    initial_state,
    inner_step,
    meta_gradient,
    meta_train,
    meta_update,
    query_objective,
    sample_meta_batch,
    support_objective,
)
from metatranslate.nn import NetSpec, clone_detached, param_grads
from metatranslate.optim import first_step_increment
from metatranslate.params import ParamSet
from metatranslate.tasks import EpisodeConfig, TaskDistribution, TranslationTask

SCALAR_G = NetSpec(1, (1,), 1)
SCALAR_D = NetSpec(1, (1,), 1, output_activation="sigmoid")


def scalar_params(u, c, a, b):
    return ParamSet([("W0", [[u]]), ("b0", [c]), ("W1", [[a]]), ("b1", [b])])


def scalar_setup(second_order=False, alpha=0.1):
    hp = Hyperparams(
        alpha=alpha,
        beta=1e-3,
        weights=LossWeights(2.0, 0.5),
        inner_iters=1,
        episode=EpisodeConfig(K=3, L=3, J=1, N=1, meta_batches=1),
        second_order=second_order,
        gen_spec=SCALAR_G,
        disc_spec=SCALAR_D,
    )
    meta = initial_state(hp)
    meta = replace(meta, theta_g=scalar_params(0.8, 0.1, 1.3, -0.2), theta_d=scalar_params(-0.6, 0.3, 0.9, 0.05))
    x = np.array([[-0.7], [0.2], [1.1]])
    y = np.array([[1.9], [0.4], [2.6]])
    task = TranslationTask("toy", x, y, x + 0.05, y - 0.05)
    return meta, task, hp


def values(state):
    return [ho.unpack(s.numpy()) for s in state.sets]


# -- hand-unrolled update rules --------------------------------------------------------


def test_hand_oracle_objective_matches_composite():
    meta, task, hp = scalar_setup()
    G, D = ho.unpack(meta.theta_g), ho.unpack(meta.theta_d)
    x, y = task.support_x[:, 0], task.support_y[:, 0]
    sets = [meta.theta_g, meta.theta_g, meta.theta_d, meta.theta_d]
    ours = support_objective(SCALAR_G, SCALAR_D, sets, task.support_x, task.support_y, hp.weights).total
    assert float(ours) == pytest.approx(ho.objective(G, G, D, D, x, y, 2.0, 0.5), abs=1e-13)


@pytest.mark.parametrize("second_order", [False, True])
def test_init_and_inner_step_match_hand_unrolled_arithmetic(second_order):
    meta, task, hp = scalar_setup(second_order)
    G, D = ho.unpack(meta.theta_g), ho.unpack(meta.theta_d)
    x, y = task.support_x[:, 0], task.support_y[:, 0]

    s0 = ho.simultaneous_step(G, G, D, D, x, y, 0.1, 2.0, 0.5)
    s1 = ho.simultaneous_step(*s0, x, y, 0.1, 2.0, 0.5)

    if second_order:
        tape = Tape()
        state0 = init_step(meta, task, hp, theta=(meta.theta_g.leaves(tape), meta.theta_d.leaves(tape)))
    else:
        state0 = init_step(meta, task, hp)
    state1 = inner_step(state0, task, hp)
    np.testing.assert_allclose(values(state0), s0, rtol=0, atol=1e-12)
    np.testing.assert_allclose(values(state1), s1, rtol=0, atol=1e-12)
    assert state1.iter == 1


def test_generators_descend_discriminators_ascend():
    meta, task, hp = scalar_setup()
    G, D = ho.unpack(meta.theta_g), ho.unpack(meta.theta_d)
    x, y = task.support_x[:, 0], task.support_y[:, 0]
    grads = ho.gradients(G, G, D, D, x, y, 2.0, 0.5)
    state = init_step(meta, task, hp)
    starts = (G, G, D, D)
    for i, sign in enumerate((-1, -1, +1, +1)):
        delta = np.subtract(values(state)[i], starts[i])
        g = np.asarray(grads[i])
        assert delta @ g == pytest.approx(sign * 0.1 * g @ g, rel=1e-10)


def test_zero_alpha_init_copies_meta_parameters():
    meta, task, hp = scalar_setup(alpha=0.0)
    state = init_step(meta, task, hp)
    assert state.f.equal(meta.theta_g) and state.h.equal(meta.theta_g)
    assert state.d_x.equal(meta.theta_d) and state.d_y.equal(meta.theta_d)


def test_zero_alpha_inner_step_changes_only_iter():
    meta, task, hp = scalar_setup(alpha=0.0)
    s0 = init_step(meta, task, hp)
    s1 = inner_step(s0, task, hp)
    assert all(a.equal(b) for a, b in zip(s0.sets, s1.sets)) and s1.iter == s0.iter + 1


def test_f_and_h_init_values_agree_on_symmetric_support():
    # with identical domain batches the loss is symmetric in (F, D_Y) <-> (H, D_X)
    meta, task, hp = scalar_setup()
    sym = TranslationTask("sym", task.support_x, task.support_x, task.query_x, task.query_x)
    state = init_step(meta, sym, hp)
    np.testing.assert_allclose(ho.unpack(state.f), ho.unpack(state.h), rtol=0, atol=1e-14)
    np.testing.assert_allclose(ho.unpack(state.d_x), ho.unpack(state.d_y), rtol=0, atol=1e-14)


def test_second_order_h0_is_constant_and_f0_is_not():
    meta, task, hp = scalar_setup(second_order=True)
    tape = Tape()
    tg = meta.theta_g.leaves(tape)
    state = init_step(meta, task, hp, theta=(tg, meta.theta_d.leaves(tape)))
    assert not state.h.is_differentiable() and not state.d_x.is_differentiable()
    assert state.f.is_differentiable() and state.d_y.is_differentiable()

    # d sum(f0) / d theta_g against central differences of the hand-derived update,
    # with the copies in the H and D_X slots frozen at their nominal values
    total = functools.reduce(ad.add, [ad.sum_(state.f[n]) for n in ho.NAMES])
    (gf,) = param_grads(total, [tg])
    G, D = ho.unpack(meta.theta_g), ho.unpack(meta.theta_d)
    x, y = task.support_x[:, 0], task.support_y[:, 0]

    def f0_sum(g):
        gF = ho.gradients(g, G, D, D, x, y, 2.0, 0.5)[0]
        return sum(v - 0.1 * gi for v, gi in zip(g, gF))

    h = 1e-6
    for i, name in enumerate(ho.NAMES):
        up, dn = list(G), list(G)
        up[i] += h
        dn[i] -= h
        num = (f0_sum(up) - f0_sum(dn)) / (2 * h)
        assert float(np.asarray(gf[name]).reshape(-1)[0]) == pytest.approx(num, rel=1e-6, abs=1e-9)

    # and nothing reaches theta_g through h0
    (gh,) = param_grads(ad.add(ad.scale(ad.sum_(tg["W0"]), 0.0), ad.sum_(ad.detach(state.h["W1"]))), [tg])
    assert not np.any(gh.flat())


# -- fine-tune / query / meta-gradient ------------------------------------------------


def test_fine_tune_loop_bounds_and_determinism():
    meta, task, hp = scalar_setup()
    s0 = fine_tune(meta, task, replace(hp, inner_iters=0))
    assert all(a.equal(b) for a, b in zip(s0.sets, init_step(meta, task, hp).sets))
    s3 = fine_tune(meta, task, replace(hp, inner_iters=3))
    assert s3.iter == 3
    again = fine_tune(meta, task, replace(hp, inner_iters=3))
    assert all(a.equal(b) for a, b in zip(s3.sets, again.sets))


def test_query_equal_to_support_gives_support_loss():
    meta, task, hp = scalar_setup()
    same = TranslationTask("same", task.support_x, task.support_y, task.support_x, task.support_y)
    state = fine_tune(meta, same, hp)
    q = query_objective(state, same, hp).total
    s = support_objective(SCALAR_G, SCALAR_D, state.sets, same.support_x, same.support_y, hp.weights).total
    assert float(q) == float(s)


def test_query_objective_zero_networks():
    g, d = NetSpec(2, (3,), 2), NetSpec(2, (3,), 1, output_activation="sigmoid")
    zg = ParamSet((n, np.zeros(s)) for n, s in g.layout())
    zd = ParamSet((n, np.zeros(s)) for n, s in d.layout())
    hp = Hyperparams(weights=LossWeights(0.0, 0.0), gen_spec=g, disc_spec=d)
    state = FineTuneState(g, d, zg, zg, zd, zd)
    x = np.random.default_rng(0).normal(size=(4, 2))
    task = TranslationTask("z", x, x, x, x)
    assert float(query_objective(state, task, hp).total) == pytest.approx(-4 * math.log(2), abs=1e-14)


@pytest.mark.parametrize("inner_iters", [1, 2])
def test_second_order_meta_gradient_matches_constant_copy_pipeline(inner_iters):
    result = meta_gradient_check(seed=0, inner_iters=inner_iters)
    assert result.error < 1e-3, result.where


def test_constant_copy_objective_matches_query_loss_at_nominal():
    meta, task, hp = scalar_setup(second_order=True)
    state = fine_tune(meta, task, replace(hp, second_order=False))
    ref = float(query_objective(state, task, hp).total)
    assert constant_copy_objective(meta, task, hp, meta.theta_g, meta.theta_d) == pytest.approx(ref, abs=1e-13)


def test_first_order_meta_gradient_is_query_gradient_of_f_and_dy():
    meta, task, hp = scalar_setup()
    gg, gd, rows = meta_gradient(meta, [task], hp)
    state = fine_tune(meta, task, hp)
    tape = Tape()
    leaves = [s.leaves(tape) for s in state.sets]
    q = query_objective(state.with_sets(leaves), task, hp)
    gf, _, _, gdy = param_grads(q.total, leaves)
    assert gg.equal(gf.numpy()) and gd.equal(gdy.numpy())
    assert rows[0]["mode"] == "first_order" and rows[0]["task_id"] == "toy"


def test_meta_gradient_is_additive_over_tasks():
    dist = TaskDistribution(seed=1)
    hp = Hyperparams(
        alpha=1e-2,
        inner_iters=2,
        episode=EpisodeConfig(K=5, L=10, J=2, N=4, meta_batches=1),
        gen_spec=NetSpec(2, (6,), 2),
        disc_spec=NetSpec(2, (6,), 1, output_activation="sigmoid"),
    )
    meta = initial_state(hp)
    tasks = sample_meta_batch(dist, [0, 1, 2, 3], hp, 0)
    g2, d2, _ = meta_gradient(meta, tasks, hp)
    ga, da, _ = meta_gradient(meta, tasks[:1], hp)
    gb, db, _ = meta_gradient(meta, tasks[1:], hp)
    np.testing.assert_allclose(g2.flat(), ga.flat() + gb.flat(), rtol=1e-14, atol=1e-17)
    np.testing.assert_allclose(d2.flat(), da.flat() + db.flat(), rtol=1e-14, atol=1e-17)


def test_meta_update_adam_directions():
    meta, task, hp = scalar_setup()
    gg, gd, _ = meta_gradient(meta, [task], hp)
    new, rows = meta_update(meta, [task], hp)
    np.testing.assert_allclose(
        new.theta_g.flat() - meta.theta_g.flat(), first_step_increment(gg.flat(), hp.beta), rtol=1e-12, atol=0
    )
    np.testing.assert_allclose(
        new.theta_d.flat() - meta.theta_d.flat(), -first_step_increment(gd.flat(), hp.beta), rtol=1e-12, atol=0
    )
    assert new.step == 1 and new.adam_g.t == 1 and len(rows) == 1


def test_meta_update_with_zero_gradient_keeps_parameters(monkeypatch):
    import metatranslate.meta as meta_mod

    meta, task, hp = scalar_setup()
    zero = meta.theta_g.map(np.zeros_like), meta.theta_d.map(np.zeros_like)
    monkeypatch.setattr(meta_mod, "meta_gradient", lambda m, t, h: (*zero, []))
    new, _ = meta_update(meta, [task], hp)
    assert new.theta_g.equal(meta.theta_g) and new.theta_d.equal(meta.theta_d)


# -- meta-training and adaptation ---------------------------------------------------------


def _small_hp(**kw):
    base = dict(
        alpha=1e-3,
        beta=1e-3,
        inner_iters=2,
        episode=EpisodeConfig(K=5, L=10, J=2, N=9, meta_batches=3),
        gen_spec=NetSpec(2, (8,), 2),
        disc_spec=NetSpec(2, (8,), 1, output_activation="sigmoid"),
    )
    base.update(kw)
    return Hyperparams(**base)


def test_meta_train_zero_batches_returns_initial_state():
    hp = _small_hp(episode=EpisodeConfig(meta_batches=0))
    out = meta_train(TaskDistribution(), hp)
    init = initial_state(hp)
    assert out.theta_g.equal(init.theta_g) and out.step == 0


def test_meta_train_is_reproducible_and_streams_metrics():
    hp = _small_hp()
    calls_a, calls_b, ckpts = [], [], []
    a = meta_train(TaskDistribution(), hp, on_metrics=lambda b, r: calls_a.append((b, r)))
    b = meta_train(
        TaskDistribution(),
        hp,
        on_metrics=lambda b, r: calls_b.append((b, r)),
        on_checkpoint=lambda m, final: ckpts.append((m.step, final)),
        checkpoint_every=2,
    )
    assert a.theta_g.equal(b.theta_g) and a.theta_d.equal(b.theta_d)
    assert a.adam_g.m.equal(b.adam_g.m) and a.step == b.step == 3
    assert len(calls_a) == 3 and [len(r) for _, r in calls_a] == [2, 2, 2]
    assert calls_a == calls_b
    assert ckpts == [(2, False), (3, True)]


def test_meta_train_divergence_reports_task():
    hp = _small_hp(divergence_norm=1e-3)
    with pytest.raises(TrainingDivergence) as err:
        meta_train(TaskDistribution(), hp)
    assert err.value.task_id is not None and err.value.task_id.startswith("affine2d-")


def test_meta_train_skips_then_aborts():
    from metatranslate.meta import MetaTrainingAborted

    hp = _small_hp(divergence_norm=1e-3, skip_diverged=True, max_skip_fraction=0.5)
    with pytest.raises(MetaTrainingAborted):
        meta_train(TaskDistribution(), hp)


def test_adapt_first_step_closed_form():
    meta, task, hp = scalar_setup()
    lr = 1e-3
    state, curve = adapt(meta, task, hp, steps=1, lr=lr)
    assert len(curve) == 1
    tape = Tape()
    sets = [meta.theta_g.leaves(tape), clone_detached(meta.theta_g).leaves(tape)]
    sets += [clone_detached(meta.theta_d).leaves(tape), meta.theta_d.leaves(tape)]
    grads = param_grads(support_objective(SCALAR_G, SCALAR_D, sets, task.support_x, task.support_y, hp.weights).total, sets)
    for new, old, g, sign in zip(state.sets, sets, grads, (1, 1, -1, -1)):
        np.testing.assert_allclose(new.flat() - old.flat(), sign * first_step_increment(g.flat(), lr), rtol=1e-12)


def test_adapt_curve_length_and_zero_lr():
    meta, task, hp = scalar_setup()
    _, curve = adapt(meta, task, hp, steps=7)
    assert len(curve) == 7
    _, flat = adapt(meta, task, hp, steps=5, lr=0.0)
    assert len({c.total for c in flat}) == 1


def test_adapt_rejects_zero_steps():
    meta, task, hp = scalar_setup()
    with pytest.raises(ContractError):
        adapt(meta, task, hp, steps=0)


def test_adapt_is_deterministic():
    meta, task, hp = scalar_setup()
    a, ca = adapt(meta, task, hp, steps=5)
    b, cb = adapt(meta, task, hp, steps=5)
    assert ca == cb and all(x.equal(y) for x, y in zip(a.sets, b.sets))


def test_hyperparams_validation():
    with pytest.raises(ContractError):
        Hyperparams(alpha=-1.0)
    with pytest.raises(ContractError):
        Hyperparams(gen_spec=NetSpec(2, (3,), 3))
    assert Hyperparams().mode == "first_order" and Hyperparams(second_order=True).mode == "second_order"


def test_meta_state_round_trip_types():
    hp = _small_hp()
    m = initial_state(hp, seed=4)
    assert isinstance(m, MetaState) and m.adam_g.t == 0
    assert not initial_state(hp, seed=5).theta_g.equal(m.theta_g)
