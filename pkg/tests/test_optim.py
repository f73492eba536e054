import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from metatranslate.autodiff import ContractError
from metatranslate.optim import AdamState, adam_step, clip_by_global_norm, first_step_increment, sgd_step
from metatranslate.params import ParamSet


def ps(**kw):
    return ParamSet((k, np.asarray(v, dtype=float)) for k, v in kw.items())


def test_sgd_descent_and_ascent_hand_values():
    p, g = ps(w=[1.0]), ps(w=[0.5])
    assert sgd_step(p, g, 0.1, "descent")["w"][0] == pytest.approx(0.95, abs=1e-15)
    assert sgd_step(p, g, 0.1, "ascent")["w"][0] == pytest.approx(1.05, abs=1e-15)


def test_sgd_rejects_bad_arguments():
    with pytest.raises(ContractError):
        sgd_step(ps(w=[1.0]), ps(w=[1.0]), 0.0)
    with pytest.raises(ContractError):
        sgd_step(ps(w=[1.0]), ps(w=[1.0]), 0.1, "sideways")


def test_ascent_step_increases_objective_to_first_order():
    # f(w) = sum(sin(w)); grad = cos(w)
    rng = np.random.default_rng(0)
    w = rng.normal(size=5)
    g = np.cos(w)
    lr = 1e-6
    new = sgd_step(ps(w=w), ps(w=g), lr, "ascent")["w"]
    step = new - w
    assert step @ g == pytest.approx(lr * g @ g, rel=1e-9)
    assert np.sum(np.sin(new)) > np.sum(np.sin(w))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4,), elements=st.floats(-100, 100).filter(lambda v: abs(v) > 1e-3)))
def test_adam_first_step_closed_form(g):
    p = ps(w=np.zeros(4))
    new, state = adam_step(p, ps(w=g), AdamState.zeros_like(p), 1e-3, "descent")
    inc = new["w"] - p["w"]
    np.testing.assert_allclose(inc, first_step_increment(g, 1e-3), rtol=1e-12, atol=0)
    np.testing.assert_allclose(np.abs(inc), 1e-3, rtol=1e-5)
    assert np.all(np.sign(inc) == -np.sign(g)) and state.t == 1


def test_adam_zero_gradient_keeps_params_and_advances_t():
    p = ps(w=[1.0, -2.0])
    new, state = adam_step(p, ps(w=[0.0, 0.0]), AdamState.zeros_like(p), 0.1)
    assert new.equal(p) and state.t == 1


@settings(max_examples=30, deadline=None)
@given(
    arrays(np.float64, (3,), elements=st.floats(-5, 5)),
    arrays(np.float64, (3,), elements=st.floats(-5, 5)),
    st.integers(0, 4),
)
def test_adam_ascent_equals_descent_on_negated_gradient(w, g, warmup):
    p = ps(w=w)
    state = AdamState.zeros_like(p)
    rng = np.random.default_rng(warmup)
    for _ in range(warmup):
        p, state = adam_step(p, ps(w=rng.normal(size=3)), state, 0.01)
    a, sa = adam_step(p, ps(w=g), state, 0.01, "ascent")
    d, sd = adam_step(p, ps(w=-g), state, 0.01, "descent")
    assert a.equal(d) and sa.m.equal(sd.m) and sa.v.equal(sd.v) and sa.t == sd.t


def test_adam_is_functional():
    p = ps(w=[1.0])
    s0 = AdamState.zeros_like(p)
    adam_step(p, ps(w=[3.0]), s0, 0.1)
    assert s0.t == 0 and not np.any(s0.m["w"])


def test_adam_matches_reference_recurrence():
    # direct transcription of the bias-corrected moment updates
    rng = np.random.default_rng(1)
    grads = rng.normal(size=(6, 3))
    w = rng.normal(size=3)
    p, state = ps(w=w), AdamState.zeros_like(ps(w=w))
    m = v = np.zeros(3)
    ref = w.copy()
    for t, g in enumerate(grads, start=1):
        p, state = adam_step(p, ps(w=g), state, 0.05)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.05 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p["w"], ref, rtol=1e-13)


def test_clip_by_global_norm():
    g = ps(a=[3.0], b=[4.0])
    assert clip_by_global_norm(g, None) is g
    clipped = clip_by_global_norm(g, 1.0)
    assert clipped.norm() == pytest.approx(1.0)
    assert clip_by_global_norm(g, 10.0).equal(g)
