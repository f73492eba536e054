import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from metatranslate import autodiff as ad
from metatranslate.autodiff import ContractError, NonFiniteError, Tape, Var


def leaf(x):
    return Tape().param(x)


# -- forward values -----------------------------------------------------------


def test_matmul_hand_values():
    out = ad.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [1.0]]))
    np.testing.assert_array_equal(out, [[3.0], [7.0]])


def test_sigmoid_and_log_sigmoid_at_zero():
    assert ad.sigmoid(np.array(0.0)) == 0.5
    assert ad.log_sigmoid(np.array(0.0)) == pytest.approx(-math.log(2.0), abs=1e-15)


def test_mean_abs():
    assert ad.mean(ad.abs_(np.array([-1.0, 3.0]))) == 2.0


def test_plain_inputs_return_plain_arrays():
    out = ad.tanh(np.ones(3))
    assert type(out) is np.ndarray


def test_var_inputs_are_recorded():
    t = Tape()
    w = t.param([1.0, 2.0])
    out = ad.mul(w, w)
    assert type(out) is Var and out.op == "mul" and out.tape is t
    assert len(t) == 2


def test_log_sigmoid_is_stable_for_large_arguments():
    x = np.array([-800.0, -40.0, 0.0, 40.0, 800.0])
    out = ad.log_sigmoid(x)
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out[0], -800.0)
    assert out[-1] == 0.0 or abs(out[-1]) < 1e-300


def test_sigmoid_is_stable_for_large_arguments():
    out = ad.sigmoid(np.array([-1000.0, 1000.0]))
    np.testing.assert_array_equal(out, [0.0, 1.0])


def test_shape_mismatch_names_the_op():
    t = Tape()
    with pytest.raises(ContractError, match="add.*\\(2,\\).*\\(3,\\)"):
        ad.add(t.param(np.ones(2)), t.param(np.ones(3)))


def test_matmul_inner_dimension_mismatch():
    with pytest.raises(ContractError, match="matmul"):
        ad.matmul(leaf(np.ones((2, 3))), np.ones((2, 3)))


def test_log_of_nonpositive_is_rejected():
    with pytest.raises((ContractError, NonFiniteError)):
        ad.log(leaf([1.0, 0.0]))


def test_division_by_zero_is_nonfinite():
    with pytest.raises(NonFiniteError):
        ad.div(leaf([1.0]), np.array([0.0]))


# -- backward ---------------------------------------------------------------------


def test_grad_of_sum_of_squares():
    w = leaf([1.0, 2.0, 3.0])
    g = ad.backward(ad.sum_(ad.mul(w, w)), [w])
    np.testing.assert_array_equal(g[w], [2.0, 4.0, 6.0])


def test_grad_of_sigmoid_at_zero():
    t = Tape()
    w = t.param(0.0)
    g = ad.backward(ad.sigmoid(ad.mul(w, np.array(1.0))), [w])
    assert float(g[w]) == 0.25


def test_detach_product_rule():
    w = leaf([1.0, 2.0])
    g = ad.backward(ad.sum_(ad.mul(ad.detach(w), w)), [w])
    np.testing.assert_array_equal(g[w], [1.0, 2.0])


def test_detach_only_gives_zero_gradient():
    t = Tape()
    w = t.param([1.0, 2.0])
    other = t.param(1.0)
    loss = ad.add(ad.sum_(ad.detach(w)), other)
    g = ad.backward(loss, [w])
    np.testing.assert_array_equal(g[w], [0.0, 0.0])


def test_detach_copies_values_bitwise():
    w = leaf([0.1, -2.5e-300, 3.0])
    d = ad.detach(w)
    assert d.value.tobytes() == w.value.tobytes()
    assert not d.requires_grad and d.value is not w.value


def test_backward_requires_scalar():
    w = leaf([1.0, 2.0])
    with pytest.raises(ContractError):
        ad.backward(ad.mul(w, w), [w])


def test_unreachable_parameter_gets_zero():
    t = Tape()
    a, b = t.param([1.0]), t.param([5.0, 6.0])
    g = ad.backward(ad.sum_(ad.mul(a, a)), [a, b])
    np.testing.assert_array_equal(g[b], [0.0, 0.0])


def test_repeated_backward_does_not_accumulate():
    w = leaf([1.0, 2.0])
    loss = ad.sum_(ad.mul(w, w))
    g1 = ad.backward(loss, [w])[w]
    g2 = ad.backward(loss, [w])[w]
    np.testing.assert_array_equal(g1, g2)
    assert g1 is not g2


def test_fan_out_accumulates():
    w = leaf(3.0)
    loss = ad.add(ad.mul(w, w), ad.mul(w, np.array(2.0)))
    assert float(ad.backward(loss, [w])[w]) == 8.0


def test_create_graph_second_derivative():
    # d2/dw2 of w^3 is 6w
    t = Tape()
    w = t.param(2.0)
    y = ad.mul(ad.mul(w, w), w)
    (g,) = ad.backward(y, [w], create_graph=True).values()
    assert type(g) is Var
    (h,) = ad.backward(g, [w]).values()
    assert float(h) == 12.0


def test_truncate_discards_later_nodes():
    t = Tape()
    w = t.param([1.0])
    n = len(t)
    y = ad.mul(w, w)
    t.truncate(n)
    assert len(t) == n and not y.requires_grad
    z = ad.sum_(ad.mul(w, np.array([3.0])))
    assert float(ad.backward(z, [w])[w][0]) == 3.0


def test_vjp_registry_covers_every_recorded_op():
    t = Tape()
    a = t.param(np.ones((2, 2)))
    ops = [
        ad.add(a, a), ad.sub(a, a), ad.mul(a, a), ad.div(a, a), ad.neg(a), ad.scale(a, 2.0),
        ad.matmul(a, a), ad.add_bias(a, t.param(np.ones(2))), ad.transpose(a), ad.tanh(a), ad.relu(a),
        ad.sigmoid(a), ad.log_sigmoid(a), ad.log(a), ad.abs_(a), ad.sum_(a), ad.mean(a),
        ad.expand(t.param(1.0), (2, 2)), ad.concat([a, a]), ad.slice_last(a, 0, 1), ad.pad_last(a, 1, 4),
    ]
    assert {o.op for o in ops} == set(ad.VJP)


# -- finite-difference oracle ---------------------------------------------------------


def _mlp_loss(p):
    h = ad.tanh(ad.add_bias(ad.matmul(X, p["W0"]), p["b0"]))
    return ad.mean(ad.add_bias(ad.matmul(h, p["W1"]), p["b1"]))


rng0 = np.random.default_rng(3)
X = rng0.normal(size=(5, 3))


def test_two_layer_mlp_matches_finite_differences():
    rng = np.random.default_rng(11)
    params = {
        "W0": rng.normal(size=(3, 4)),
        "b0": rng.normal(size=(4,)),
        "W1": rng.normal(size=(4, 1)),
        "b1": rng.normal(size=(1,)),
    }
    assert ad.grad_check(_mlp_loss, params) < 1e-6


def test_grad_check_on_quadratic_form():
    rng = np.random.default_rng(5)
    A = rng.normal(size=(4, 4))
    A = A @ A.T + np.eye(4)

    def f(p):
        x = p["x"]
        return ad.sum_(ad.mul(ad.matmul(A, ad.transpose(x)), ad.transpose(x)))

    assert ad.grad_check(f, {"x": rng.normal(size=(1, 4))}) < 1e-9


def test_grad_check_rejects_nonpositive_step():
    with pytest.raises(ContractError):
        ad.grad_check(lambda p: ad.sum_(p["w"]), {"w": np.ones(2)}, h=0.0)


def test_grad_check_detects_a_wrong_rule(monkeypatch):
    monkeypatch.setitem(ad.VJP, "tanh", lambda g, out, p, ctx, needs: (-g * (1.0 - out * out),))
    err = ad.grad_check(lambda p: ad.sum_(ad.tanh(p["w"])), {"w": np.array([0.3, -0.2])})
    assert err > 1.0


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 3), elements=st.floats(-3, 3)), arrays(np.float64, (3,), elements=st.floats(-3, 3)))
def test_smooth_composite_gradients_property(a, b):
    def f(p):
        z = ad.add_bias(p["a"], p["b"])
        return ad.add(ad.sum_(ad.mul(ad.tanh(z), ad.sigmoid(z))), ad.mean(ad.log_sigmoid(z)))

    assert ad.grad_check(f, {"a": a, "b": b}) < 1e-5


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (4,), elements=st.floats(-50, 50)))
def test_log_sigmoid_matches_direct_formula_property(x):
    direct = -np.logaddexp(0.0, -x)
    np.testing.assert_allclose(ad.log_sigmoid(x), direct, rtol=1e-12, atol=1e-300)
