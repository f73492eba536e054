"""Tape-based reverse-mode automatic differentiation over float64 arrays.

Every primitive accepts plain ``numpy`` arrays, Python scalars or :class:`Var`
objects. With no ``Var`` among the inputs it returns a bare ``ndarray``; this
is what lets each vector-Jacobian rule below be written once and reused both
for a plain backward pass and for a ``create_graph`` pass, where the rules
run on ``Var`` objects and are themselves recorded.

Gradients never live on the variables: :func:`backward` returns a fresh map
per call, so several backward passes over one tape cannot alias each other.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Iterable, Mapping, Sequence
from typing import Any

import numpy as np

__all__ = [
    "ContractError",
    "NonFiniteError",
    "Tape",
    "Var",
    "VJP",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "matmul",
    "add_bias",
    "transpose",
    "tanh",
    "relu",
    "sigmoid",
    "log_sigmoid",
    "log",
    "abs_",
    "sum_",
    "mean",
    "expand",
    "concat",
    "slice_last",
    "pad_last",
    "value",
    "detach",
    "backward",
    "grad_check",
    "grad_check_details",
]


class ContractError(ValueError):
    """A precondition of an operation was violated (shapes, arguments)."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf from its inputs."""


class Tape:
    """Append-only record of the operations that produced differentiable values."""

    def __init__(self) -> None:
        self.nodes: list[Var] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def param(self, data: Any) -> Var:
        """Create a differentiable leaf on this tape (always a private copy)."""
        arr = np.array(data, dtype=np.float64)
        v = Var(arr, requires_grad=True)
        v.tape = self
        v.index = len(self.nodes)
        self.nodes.append(v)
        return v

    def truncate(self, length: int) -> None:
        """Drop every node recorded after ``length``; dropped Vars become constants."""
        if length < 0 or length > len(self.nodes):
            raise ContractError(f"truncate: length {length} outside [0, {len(self.nodes)}]")
        for node in self.nodes[length:]:
            node.tape = None
            node.requires_grad = False
            node.parents = ()
        del self.nodes[length:]


class Var:
    """A value plus its position on a tape."""

    __slots__ = ("value", "tape", "index", "requires_grad", "op", "parents", "ctx")
    __array_priority__ = 1000  # make ndarray <op> Var defer to Var's reflected ops

    def __init__(self, data: Any, requires_grad: bool = False) -> None:
        self.value = np.asarray(data, dtype=np.float64)
        self.tape: Tape | None = None
        self.index = -1
        self.requires_grad = requires_grad
        self.op: str | None = None
        self.parents: tuple = ()
        self.ctx: Any = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def T(self) -> Var:
        return transpose(self)

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else self.value.item()

    def __repr__(self) -> str:
        tag = f"{self.op or 'leaf'}#{self.index}" if self.requires_grad else "const"
        return f"Var({tag}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)


def value(x: Any) -> np.ndarray:
    """The numeric value of ``x`` whether it is a Var or array-like."""
    if type(x) is Var:
        return x.value
    return np.asarray(x, dtype=np.float64)


def _shape(x: Any) -> tuple[int, ...]:
    return np.shape(x.value if type(x) is Var else x)


def _record(op: str, out: np.ndarray, parents: tuple, ctx: Any = None) -> Var:
    tape = None
    for p in parents:
        if type(p) is Var and p.requires_grad:
            if tape is None:
                tape = p.tape
            elif p.tape is not tape:
                raise ContractError(f"{op}: operands live on different tapes")
    v = Var.__new__(Var)
    v.value = out
    v.op = op
    v.ctx = ctx
    if tape is None:
        v.tape = None
        v.index = -1
        v.requires_grad = False
        v.parents = ()
        return v
    v.tape = tape
    v.index = len(tape.nodes)
    v.requires_grad = True
    v.parents = parents
    tape.nodes.append(v)
    return v


def _check_elementwise(op: str, a: Any, b: Any, out_shape: tuple[int, ...]) -> None:
    # Broadcasting is only allowed for operands that never need a gradient.
    for x in (a, b):
        if type(x) is Var and x.requires_grad and x.value.shape != out_shape:
            raise ContractError(
                f"{op}: shape mismatch {_shape(a)} vs {_shape(b)} (differentiable operands must not broadcast)"
            )


def _binary(op: str, fn: Callable, a: Any, b: Any) -> Any:
    av = a.value if type(a) is Var else a
    bv = b.value if type(b) is Var else b
    try:
        out = fn(av, bv)
    except ValueError as exc:
        raise ContractError(f"{op}: shape mismatch {_shape(a)} vs {_shape(b)}") from exc
    if type(a) is not Var and type(b) is not Var:
        return out
    out = np.asarray(out, dtype=np.float64)
    _check_elementwise(op, a, b, out.shape)
    return _record(op, out, (a, b))


def _unary(op: str, out: np.ndarray, x: Any, ctx: Any = None) -> Any:
    if type(x) is not Var:
        return out
    return _record(op, out, (x,), ctx)


# -- primitives ---------------------------------------------------------------


def add(a, b):
    return _binary("add", np.add, a, b)


def sub(a, b):
    return _binary("sub", np.subtract, a, b)


def mul(a, b):
    return _binary("mul", np.multiply, a, b)


def div(a, b):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = _binary("div", np.divide, a, b)
    if not np.all(np.isfinite(value(out))):
        raise NonFiniteError("div: non-finite result")
    return out


def neg(x):
    return _unary("neg", -value(x), x)


def scale(x, c: float):
    """Multiply by a Python scalar constant."""
    return _unary("scale", value(x) * c, x, float(c))


def matmul(a, b):
    sa, sb = _shape(a), _shape(b)
    if len(sa) != 2 or len(sb) != 2 or sa[1] != sb[0]:
        raise ContractError(f"matmul: shape mismatch {sa} vs {sb}")
    av = a.value if type(a) is Var else a
    bv = b.value if type(b) is Var else b
    out = av @ bv
    if type(a) is not Var and type(b) is not Var:
        return out
    return _record("matmul", out, (a, b))


def add_bias(x, b):
    """``x[B, n] + b[n]`` broadcast over the leading batch axis."""
    sx, sb = _shape(x), _shape(b)
    if len(sx) != 2 or len(sb) != 1 or sx[1] != sb[0]:
        raise ContractError(f"add_bias: shape mismatch {sx} vs {sb}")
    out = value(x) + value(b)
    if type(x) is not Var and type(b) is not Var:
        return out
    return _record("add_bias", out, (x, b))


def transpose(x):
    if len(_shape(x)) != 2:
        raise ContractError(f"transpose: expected a matrix, got shape {_shape(x)}")
    return _unary("transpose", value(x).T, x)


def tanh(x):
    return _unary("tanh", np.tanh(value(x)), x)


def relu(x):
    return _unary("relu", np.maximum(value(x), 0.0), x)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # branch form: exp() only ever sees non-positive arguments
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x):
    return _unary("sigmoid", _sigmoid(value(x)), x)


def log_sigmoid(x):
    """``log(sigmoid(x))`` without forming ``sigmoid`` (stable for large |x|)."""
    v = value(x)
    return _unary("log_sigmoid", np.minimum(v, 0.0) - np.log1p(np.exp(-np.abs(v))), x)


def log(x):
    v = value(x)
    if np.any(v <= 0):
        raise NonFiniteError("log: argument must be strictly positive")
    return _unary("log", np.log(v), x)


def abs_(x):
    return _unary("abs", np.abs(value(x)), x)


def _axis_ok(op: str, x, axis: int | None) -> None:
    nd = len(_shape(x))
    if axis is not None and not -nd <= axis < nd:
        raise ContractError(f"{op}: axis {axis} out of range for shape {_shape(x)}")


def sum_(x, axis: int | None = None):
    _axis_ok("sum", x, axis)
    v = value(x)
    return _unary("sum", np.sum(v, axis=axis), x, (v.shape, axis))


def mean(x, axis: int | None = None):
    _axis_ok("mean", x, axis)
    v = value(x)
    if v.size == 0:
        raise ContractError(f"mean: empty input of shape {v.shape}")
    return _unary("mean", np.mean(v, axis=axis), x, (v.shape, axis))


def expand(x, shape: tuple[int, ...], axis: int | None = None):
    """Broadcast a reduced tensor back to ``shape`` (adjoint of :func:`sum_`)."""
    v = value(x)
    if axis is not None:
        v = np.expand_dims(v, axis)
    try:
        out = np.array(np.broadcast_to(v, shape))
    except ValueError as exc:
        raise ContractError(f"expand: cannot broadcast {_shape(x)} to {shape}") from exc
    return _unary("expand", out, x, (tuple(shape), axis))


def concat(xs: Sequence[Any]):
    """Concatenate along the last axis."""
    if not xs:
        raise ContractError("concat: no inputs")
    vals = [value(x) for x in xs]
    lead = vals[0].shape[:-1]
    for v in vals:
        if v.shape[:-1] != lead:
            raise ContractError(f"concat: shape mismatch {vals[0].shape} vs {v.shape}")
    out = np.concatenate(vals, axis=-1)
    if not any(type(x) is Var for x in xs):
        return out
    widths = tuple(v.shape[-1] for v in vals)
    return _record("concat", out, tuple(xs), widths)


def slice_last(x, start: int, stop: int):
    return _unary("slice_last", value(x)[..., start:stop], x, (start, stop, _shape(x)[-1]))


def pad_last(x, start: int, width: int):
    """Embed ``x`` into zeros of last-axis size ``width`` at offset ``start``."""
    v = value(x)
    out = np.zeros(v.shape[:-1] + (width,))
    out[..., start : start + v.shape[-1]] = v
    return _unary("pad_last", out, x, (start, v.shape[-1]))


def detach(v: Any) -> Var:
    """Value copy cut from the graph: no parents and never differentiable."""
    return Var(np.array(value(v), dtype=np.float64, copy=True), requires_grad=False)


# -- vector-Jacobian products -------------------------------------------------
# Signature: rule(g, out, parents, ctx, needs) -> one gradient (or None) per parent.
# In a plain pass everything is an ndarray; under create_graph, g/out/parents
# are Vars and the rule's own arithmetic lands on the tape.


def _vjp_add(g, out, p, ctx, needs):
    return g, g


def _vjp_sub(g, out, p, ctx, needs):
    return g, (neg(g) if needs[1] else None)


def _vjp_mul(g, out, p, ctx, needs):
    a, b = p
    return (mul(g, b) if needs[0] else None), (mul(g, a) if needs[1] else None)


def _vjp_div(g, out, p, ctx, needs):
    a, b = p
    ga = div(g, b) if needs[0] else None
    gb = neg(div(mul(g, out), b)) if needs[1] else None
    return ga, gb


def _vjp_neg(g, out, p, ctx, needs):
    return (neg(g),)


def _vjp_scale(g, out, p, ctx, needs):
    return (scale(g, ctx),)


def _vjp_matmul(g, out, p, ctx, needs):
    a, b = p
    ga = matmul(g, transpose(b)) if needs[0] else None
    gb = matmul(transpose(a), g) if needs[1] else None
    return ga, gb


def _vjp_add_bias(g, out, p, ctx, needs):
    return g, (sum_(g, axis=0) if needs[1] else None)


def _vjp_transpose(g, out, p, ctx, needs):
    return (transpose(g),)


def _vjp_tanh(g, out, p, ctx, needs):
    return (mul(g, sub(1.0, mul(out, out))),)


def _vjp_relu(g, out, p, ctx, needs):
    return (mul(g, (value(p[0]) > 0).astype(np.float64)),)


def _vjp_sigmoid(g, out, p, ctx, needs):
    return (mul(g, mul(out, sub(1.0, out))),)


def _vjp_log_sigmoid(g, out, p, ctx, needs):
    return (mul(g, sigmoid(neg(p[0]))),)


def _vjp_log(g, out, p, ctx, needs):
    return (div(g, p[0]),)


def _vjp_abs(g, out, p, ctx, needs):
    return (mul(g, np.sign(value(p[0]))),)


def _vjp_sum(g, out, p, ctx, needs):
    shape, axis = ctx
    return (expand(g, shape, axis),)


def _vjp_mean(g, out, p, ctx, needs):
    shape, axis = ctx
    n = math.prod(shape) if axis is None else shape[axis]
    return (scale(expand(g, shape, axis), 1.0 / n),)


def _vjp_expand(g, out, p, ctx, needs):
    shape, axis = ctx
    in_shape = _shape(p[0])
    if axis is not None:
        return (sum_(g, axis=axis),)
    if in_shape == ():
        return (sum_(g),)
    # leading broadcast of a lower-rank tensor
    lead = len(shape) - len(in_shape)
    red = g
    for _ in range(lead):
        red = sum_(red, axis=0)
    return (red,)


def _vjp_concat(g, out, p, ctx, needs):
    grads = []
    start = 0
    for w, need in zip(ctx, needs):
        grads.append(slice_last(g, start, start + w) if need else None)
        start += w
    return tuple(grads)


def _vjp_slice_last(g, out, p, ctx, needs):
    start, _stop, width = ctx
    return (pad_last(g, start, width),)


def _vjp_pad_last(g, out, p, ctx, needs):
    start, w = ctx
    return (slice_last(g, start, start + w),)


VJP: dict[str, Callable] = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "div": _vjp_div,
    "neg": _vjp_neg,
    "scale": _vjp_scale,
    "matmul": _vjp_matmul,
    "add_bias": _vjp_add_bias,
    "transpose": _vjp_transpose,
    "tanh": _vjp_tanh,
    "relu": _vjp_relu,
    "sigmoid": _vjp_sigmoid,
    "log_sigmoid": _vjp_log_sigmoid,
    "log": _vjp_log,
    "abs": _vjp_abs,
    "sum": _vjp_sum,
    "mean": _vjp_mean,
    "expand": _vjp_expand,
    "concat": _vjp_concat,
    "slice_last": _vjp_slice_last,
    "pad_last": _vjp_pad_last,
}


def backward(loss: Var, wrt: Iterable[Var] | None = None, create_graph: bool = False) -> dict[Var, Any]:
    """Gradients of a scalar ``loss`` with respect to ``wrt``.

    ``wrt`` defaults to every differentiable leaf recorded before ``loss``.
    Variables the loss does not depend on map to zero arrays. With
    ``create_graph`` the returned gradients are Vars recorded on the same
    tape, so they can be differentiated again.
    """
    if type(loss) is not Var:
        raise ContractError(f"backward: loss must be a Var, got {type(loss).__name__}")
    if loss.value.size != 1 or loss.value.ndim > 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.value.shape}")
    tape = loss.tape
    if wrt is None:
        wrt = [n for n in tape.nodes[: loss.index + 1] if n.op is None] if tape is not None else []
    wrt = list(wrt)
    result: dict[Var, Any] = {}
    want: dict[int, list[Var]] = {}
    for v in wrt:
        if type(v) is Var and v.requires_grad and tape is not None and v.tape is tape and v.index <= loss.index:
            want.setdefault(v.index, []).append(v)
        else:
            result[v] = np.zeros_like(value(v))
    if not want:
        return result

    seed = np.ones_like(loss.value)
    grads: dict[int, Any] = {loss.index: Var(seed) if create_graph else seed}
    nodes = tape.nodes
    lowest = min(want)
    for i in range(loss.index, lowest - 1, -1):
        g = grads.pop(i, None)
        if g is None:
            continue
        if i in want:
            for v in want[i]:
                result[v] = g
        node = nodes[i]
        if node.op is None:
            continue
        parents = node.parents
        needs = tuple(type(p) is Var and p.requires_grad for p in parents)
        rule = VJP[node.op]
        if create_graph:
            pgrads = rule(g, node, parents, node.ctx, needs)
        else:
            pvals = tuple(p.value if type(p) is Var else p for p in parents)
            pgrads = rule(g, node.value, pvals, node.ctx, needs)
        for p, need, gp in zip(parents, needs, pgrads):
            if not need:
                continue
            j = p.index
            prev = grads.get(j)
            grads[j] = gp if prev is None else add(prev, gp)
    for idx, vs in want.items():
        for v in vs:
            if v not in result:
                result[v] = np.zeros_like(v.value)
    return result


def grad_check_details(
    f: Callable[[Any], Any], params: Mapping[str, Any], h: float = 1e-5
) -> tuple[float, str, tuple[int, ...], float, float]:
    """Like :func:`grad_check` but also reports where the worst error sits.

    Returns ``(max_rel_err, name, index, analytic, numeric)``.
    """
    if not h > 0:
        raise ContractError(f"grad_check: step size must be positive, got {h}")
    ptype = type(params)
    base = {k: np.array(value(v), dtype=np.float64) for k, v in params.items()}

    def rebuild(entries):
        return ptype(entries) if ptype is not dict else dict(entries)

    tape = Tape()
    leaves = {k: tape.param(v) for k, v in base.items()}
    loss = f(rebuild(leaves))
    if type(loss) is not Var:
        raise ContractError("grad_check: f must return a Var when given tape parameters")
    if not np.all(np.isfinite(loss.value)):
        raise NonFiniteError("grad_check: f returned a non-finite value")
    grads = backward(loss, list(leaves.values()))

    def evaluate(entries) -> float:
        out = float(np.asarray(value(f(rebuild(entries)))).reshape(-1)[0])
        if not math.isfinite(out):
            raise NonFiniteError("grad_check: f returned a non-finite value")
        return out

    worst = (0.0, "", (), 0.0, 0.0)
    for name, arr in base.items():
        analytic = np.asarray(value(grads[leaves[name]]))
        for idx in np.ndindex(arr.shape):
            shifted = dict(base)
            plus = arr.copy()
            plus[idx] += h
            shifted[name] = plus
            fp = evaluate(shifted)
            minus = arr.copy()
            minus[idx] -= h
            shifted[name] = minus
            fm = evaluate(shifted)
            num = (fp - fm) / (2.0 * h)
            a = float(analytic[idx])
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            if err > worst[0]:
                worst = (err, name, idx, a, num)
    return worst


def grad_check(f: Callable[[Any], Any], params: Mapping[str, Any], h: float = 1e-5) -> float:
    """Worst relative error between backward() and central differences.

    ``f`` maps a parameter mapping (of Vars, or of arrays for the numeric
    evaluations) to a scalar. Relative error uses ``max(|a|, |b|, 1e-8)``.
    """
    return grad_check_details(f, params, h)[0]
