"""Finite-difference verification suite for the whole differentiable stack.

Every check yields a :class:`CheckResult` holding the worst relative error
between reverse-mode gradients and central differences. The suite covers each
primitive (first and second order), the loss terms, the composite objectives,
the weights-copy cut and the unrolled second-order meta-gradient.
"""

from __future__ import annotations

import time
from collections.abc import Callable, Iterator
from dataclasses import dataclass, replace
from typing import Any

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .losses import LossWeights, adversarial_loss, composite_objective, cycle_loss, identity_loss
from .meta import FineTuneState, Hyperparams, MetaState, _update, fine_tune, initial_state, meta_gradient, query_objective
from .nn import Net, NetSpec, clone_detached, init_params, param_grads
from .params import ParamSet
from .tasks import EpisodeConfig, TranslationTask

FD_STEP = 1e-5
TOL_FIRST = 1e-5
TOL_META = 1e-3


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float
    tol: float
    where: str = ""

    @property
    def ok(self) -> bool:
        return self.error < self.tol


# -- helpers ----------------------------------------------------------------------


def _weighted_sum(out: Any, w: np.ndarray) -> Any:
    return ad.sum_(ad.mul(out, w))


def _check(name: str, f: Callable[[Any], Any], params: dict[str, np.ndarray], tol: float = TOL_FIRST) -> CheckResult:
    err, pname, idx, a, n = ad.grad_check_details(f, params, FD_STEP)
    return CheckResult(name, err, tol, f"{pname}{list(idx)} analytic={a:.6g} numeric={n:.6g}" if pname else "")


def _second_order(name: str, f: Callable[[Any], Any], params: dict[str, np.ndarray], rng) -> CheckResult:
    """Check the create_graph pass: FD of ``<grad f, u>`` against its recorded gradient."""
    u = {k: rng.normal(size=np.shape(v)) for k, v in params.items()}

    def directional(p):
        if not any(type(v) is ad.Var for v in p.values()):
            # numeric evaluation: rebuild leaves to obtain grad f at these values
            tape = Tape()
            p = {k: tape.param(v) for k, v in p.items()}
            g = ad.backward(f(p), list(p.values()))
            return sum(float(np.sum(g[v] * u[k])) for k, v in p.items())
        g = ad.backward(f(p), list(p.values()), create_graph=True)
        acc = None
        for k, v in p.items():
            term = ad.sum_(ad.mul(g[v], u[k])) if type(g[v]) is ad.Var else np.sum(g[v] * u[k])
            acc = term if acc is None else ad.add(acc, term)
        return acc

    return _check(f"{name} (2nd order)", directional, params)


# -- primitives ---------------------------------------------------------------------


def _primitive_cases(rng) -> Iterator[tuple[str, Callable, dict[str, np.ndarray], bool]]:
    """(op name, scalar function, parameters, smooth) per primitive."""
    A = rng.normal(size=(3, 4))
    B = rng.normal(size=(3, 4))
    M = rng.normal(size=(4, 2))
    W34, W32, W43 = rng.normal(size=(3, 4)), rng.normal(size=(3, 2)), rng.normal(size=(4, 3))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    away = rng.choice([-1.0, 1.0], size=(3, 4)) * rng.uniform(0.2, 1.5, size=(3, 4))
    b = rng.normal(size=(4,))
    W37 = rng.normal(size=(3, 7))
    W36 = rng.normal(size=(3, 6))
    W3 = rng.normal(size=(3,))
    W4 = rng.normal(size=(4,))

    yield "add", lambda p: _weighted_sum(ad.add(p["a"], p["b"]), W34), {"a": A, "b": B}, True
    yield "sub", lambda p: _weighted_sum(ad.sub(p["a"], p["b"]), W34), {"a": A, "b": B}, True
    yield "mul", lambda p: _weighted_sum(ad.mul(p["a"], p["b"]), W34), {"a": A, "b": B}, True
    yield "div", lambda p: _weighted_sum(ad.div(p["a"], p["b"]), W34), {"a": A, "b": away}, True
    yield "neg", lambda p: _weighted_sum(ad.neg(p["a"]), W34), {"a": A}, True
    yield "scale", lambda p: _weighted_sum(ad.scale(p["a"], -1.7), W34), {"a": A}, True
    yield "matmul", lambda p: _weighted_sum(ad.matmul(p["a"], p["m"]), W32), {"a": A, "m": M}, True
    yield "add_bias", lambda p: _weighted_sum(ad.add_bias(p["a"], p["b"]), W34), {"a": A, "b": b}, True
    yield "transpose", lambda p: _weighted_sum(ad.transpose(p["a"]), W43), {"a": A}, True
    yield "tanh", lambda p: _weighted_sum(ad.tanh(p["a"]), W34), {"a": A}, True
    yield "relu", lambda p: _weighted_sum(ad.relu(p["a"]), W34), {"a": away}, False
    yield "sigmoid", lambda p: _weighted_sum(ad.sigmoid(p["a"]), W34), {"a": A}, True
    yield "log_sigmoid", lambda p: _weighted_sum(ad.log_sigmoid(p["a"]), W34), {"a": 3.0 * A}, True
    yield "log", lambda p: _weighted_sum(ad.log(p["a"]), W34), {"a": pos}, True
    yield "abs", lambda p: _weighted_sum(ad.abs_(p["a"]), W34), {"a": away}, False
    yield "sum", lambda p: _weighted_sum(ad.sum_(ad.mul(p["a"], p["a"]), axis=1), W3), {"a": A}, True
    yield "mean", lambda p: _weighted_sum(ad.mean(ad.mul(p["a"], p["a"]), axis=0), W4), {"a": A}, True
    yield "expand", lambda p: _weighted_sum(ad.expand(ad.mul(p["v"], p["v"]), (3, 4)), W34), {"v": b}, True
    yield (
        "concat",
        lambda p: _weighted_sum(ad.concat([ad.mul(p["a"], p["a"]), p["c"]]), W37),
        {"a": A, "c": rng.normal(size=(3, 3))},
        True,
    )
    yield "slice_last", lambda p: _weighted_sum(ad.slice_last(ad.mul(p["a"], p["a"]), 1, 3), W32), {"a": A}, True
    yield "pad_last", lambda p: _weighted_sum(ad.pad_last(ad.mul(p["a"], p["a"]), 1, 6), W36), {"a": A}, True


def primitive_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for name, f, params, smooth in _primitive_cases(rng):
        out.append(_check(name, f, params))
        if smooth:
            out.append(_second_order(name, f, params, rng))
    return out


# -- losses and objectives -----------------------------------------------------------


def _tiny_specs(dim: int = 2, hidden: int = 3) -> tuple[NetSpec, NetSpec]:
    return NetSpec(dim, (hidden,), dim), NetSpec(dim, (hidden,), 1, output_activation="sigmoid")


def _net_params(seed: int, dim: int = 2, hidden: int = 3) -> tuple[NetSpec, NetSpec, dict[str, ParamSet]]:
    gs, ds = _tiny_specs(dim, hidden)
    sets = {
        "F": init_params(gs, [seed, 0]),
        "H": init_params(gs, [seed, 1]),
        "D_X": init_params(ds, [seed, 2]),
        "D_Y": init_params(ds, [seed, 3]),
    }
    # non-zero biases so every parameter matters
    rng = np.random.default_rng([seed, 9])
    sets = {k: s.map(lambda v: v + 0.1 * rng.normal(size=np.shape(v))) for k, s in sets.items()}
    return gs, ds, sets


def _flatten(sets: dict[str, ParamSet]) -> dict[str, np.ndarray]:
    return {f"{k}.{n}": np.asarray(ad.value(v)) for k, s in sets.items() for n, v in s.items()}


def _unflatten(flat: dict[str, Any], keys: tuple[str, ...]) -> dict[str, ParamSet]:
    return {k: ParamSet((n.split(".", 1)[1], v) for n, v in flat.items() if n.split(".", 1)[0] == k) for k in keys}


def loss_checks(seed: int = 0) -> list[CheckResult]:
    gs, ds, sets = _net_params(seed)
    rng = np.random.default_rng([seed, 5])
    x, y = rng.normal(size=(4, 2)), 1.5 * rng.normal(size=(4, 2)) + 0.5
    keys = tuple(sets)
    flat = _flatten(sets)
    w = LossWeights(10.0, 5.0)

    def nets(p):
        s = _unflatten(p, keys)
        return Net(gs, s["F"]), Net(gs, s["H"]), Net(ds, s["D_X"]), Net(ds, s["D_Y"])

    def adv(p):
        F, _, _, D_Y = nets(p)
        return adversarial_loss(F, D_Y, x, y)

    def adv_prob(p):
        # probability path (no logits) exercises the plain log primitive
        F, _, _, D_Y = nets(p)
        return adversarial_loss(F, lambda b: D_Y(b), x, y)

    def cyc(p):
        F, H, _, _ = nets(p)
        return cycle_loss(F, H, x, y)

    def idt(p):
        F, H, _, _ = nets(p)
        return identity_loss(F, H, x, y)

    def composite(p):
        return composite_objective(*nets(p), x, y, w).total

    def inner_objective(p):
        # support loss after one simultaneous update: the objective inner steps differentiate
        s = _unflatten(p, keys)
        sets_ = [s["F"], s["H"], s["D_X"], s["D_Y"]]
        if not any(type(v) is ad.Var for v in p.values()):
            tape = Tape()
            sets_ = [q.leaves(tape) for q in sets_]
        hp = Hyperparams(alpha=0.05, weights=w, inner_iters=0, second_order=True, gen_spec=gs, disc_spec=ds)
        task = TranslationTask("check", x, y, x, y)
        new, _ = _update(gs, ds, sets_, task, hp, "check")
        return composite_objective(
            Net(gs, new[0]), Net(gs, new[1]), Net(ds, new[2]), Net(ds, new[3]), y, x, w
        ).total

    sub = {k: v for k, v in flat.items() if k.startswith(("F.", "D_Y."))}
    gen_only = {k: v for k, v in flat.items() if k.startswith(("F.", "H."))}

    def restrict(f, part):
        rest = {k: v for k, v in flat.items() if k not in part}
        return lambda p: f({**rest, **p})

    return [
        _check("adversarial_loss", restrict(adv, sub), sub),
        _check("adversarial_loss (probabilities)", restrict(adv_prob, sub), sub),
        _check("cycle_loss", restrict(cyc, gen_only), gen_only),
        _check("identity_loss", restrict(idt, gen_only), gen_only),
        _check("composite_objective", composite, flat),
        _check("inner-step objective", inner_objective, flat),
    ]


# -- weights copy and meta-gradient -------------------------------------------------


def detach_check(seed: int = 0) -> CheckResult:
    """Gradient through clone_detached copies must be exactly zero."""
    gs, ds, sets = _net_params(seed)
    rng = np.random.default_rng([seed, 6])
    x, y = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    tape = Tape()
    g, d = sets["F"].leaves(tape), sets["D_Y"].leaves(tape)
    g_wc, d_wc = clone_detached(g).leaves(tape), clone_detached(d).leaves(tape)
    loss = composite_objective(Net(gs, g_wc), Net(gs, g_wc), Net(ds, d_wc), Net(ds, d_wc), x, y, LossWeights()).total
    # keep g and d on the graph with zero weight so a leak cannot hide as "unreachable"
    anchor = ad.scale(ad.add(ad.sum_(g["W0"]), ad.sum_(d["W0"])), 0.0)
    leaked = param_grads(ad.add(loss, anchor), [g, d])
    err = max(float(np.max(np.abs(ad.value(v)))) for s in leaked for v in s.values())
    return CheckResult("clone_detached", err, np.finfo(float).tiny, "max |grad| reaching the originals")


def _meta_fixture(seed: int, inner_iters: int) -> tuple[MetaState, TranslationTask, Hyperparams]:
    gs, ds = NetSpec(1, (3,), 1), NetSpec(1, (3,), 1, output_activation="sigmoid")
    hp = Hyperparams(
        alpha=0.05,
        beta=1e-3,
        weights=LossWeights(1.0, 0.5),
        inner_iters=inner_iters,
        episode=EpisodeConfig(K=4, L=4, J=1, N=1, meta_batches=1),
        second_order=True,
        seed=seed,
        gen_spec=gs,
        disc_spec=ds,
    )
    meta = initial_state(hp)
    rng = np.random.default_rng([seed, 8])
    meta = replace(
        meta,
        theta_g=meta.theta_g.map(lambda v: v + 0.2 * rng.normal(size=np.shape(v))),
        theta_d=meta.theta_d.map(lambda v: v + 0.2 * rng.normal(size=np.shape(v))),
    )
    x = rng.normal(size=(8, 1))
    y = 0.7 * rng.normal(size=(8, 1)) + 1.0
    task = TranslationTask("toy", x[:4], y[:4], x[4:], y[4:])
    return meta, task, hp


def constant_copy_objective(
    meta: MetaState, task: TranslationTask, hp: Hyperparams, theta_g: ParamSet, theta_d: ParamSet
) -> float:
    """Query objective of the unrolled pipeline with every weights copy frozen at ``meta``'s values.

    The copies taken in the initialization step, and the dual networks it
    produces, are evaluated once at the nominal parameters and then held
    fixed, so only the live (F, D_Y) path depends on ``theta_g``/``theta_d``.
    This is the function whose derivative the second-order meta-gradient
    should equal.
    """
    fo = replace(hp, second_order=False)
    gs, ds = meta.gen_spec, meta.disc_spec
    tape = Tape()
    nominal = [meta.theta_g.leaves(tape), clone_detached(meta.theta_g).leaves(tape)]
    nominal += [clone_detached(meta.theta_d).leaves(tape), meta.theta_d.leaves(tape)]
    (_, h0, dx0, _), _ = _update(gs, ds, nominal, task, fo, "oracle")
    tape = Tape()
    live = [theta_g.leaves(tape), clone_detached(meta.theta_g).leaves(tape)]
    live += [clone_detached(meta.theta_d).leaves(tape), theta_d.leaves(tape)]
    (f0, _, _, dy0), _ = _update(gs, ds, live, task, fo, "oracle")
    sets = [f0.numpy(), h0.numpy(), dx0.numpy(), dy0.numpy()]
    for _ in range(hp.inner_iters):
        tape = Tape()
        sets, _ = _update(gs, ds, [s.leaves(tape) for s in sets], task, fo, "oracle")
        sets = [s.numpy() for s in sets]
    state = FineTuneState(gs, ds, *sets)
    return float(ad.value(query_objective(state, task, hp).total))


def meta_gradient_check(seed: int = 0, inner_iters: int = 1, h: float = FD_STEP) -> CheckResult:
    """Second-order meta-gradient against central differences of :func:`constant_copy_objective`."""
    meta, task, hp = _meta_fixture(seed, inner_iters)
    g_an, d_an, _ = meta_gradient(meta, [task], hp)
    worst = (0.0, "")
    for which, analytic in (("theta_g", g_an), ("theta_d", d_an)):
        base = meta.theta_g if which == "theta_g" else meta.theta_d
        for name in base.names:
            arr = np.asarray(base[name])
            for idx in np.ndindex(arr.shape):
                vals = []
                for sgn in (1.0, -1.0):
                    shifted = arr.copy()
                    shifted[idx] += sgn * h
                    p = ParamSet((k, shifted if k == name else v) for k, v in base.items())
                    tg, td = (p, meta.theta_d) if which == "theta_g" else (meta.theta_g, p)
                    vals.append(constant_copy_objective(meta, task, hp, tg, td))
                num = (vals[0] - vals[1]) / (2 * h)
                a = float(np.asarray(analytic[name])[idx])
                err = abs(a - num) / max(abs(a), abs(num), 1e-8)
                if err > worst[0]:
                    worst = (err, f"{which}.{name}{list(idx)} analytic={a:.6g} numeric={num:.6g}")
    return CheckResult(f"meta_gradient (second order, I={inner_iters})", worst[0], TOL_META, worst[1])


def fine_tune_is_detached(seed: int = 0) -> CheckResult:
    """In second-order mode H and D_X after the initialization step carry no graph history."""
    meta, task, hp = _meta_fixture(seed, 0)
    tape = Tape()
    state = fine_tune(meta, task, hp, theta=(meta.theta_g.leaves(tape), meta.theta_d.leaves(tape)))
    live = sum(1 for s in (state.h, state.d_x) for v in s.values() if type(v) is ad.Var and v.requires_grad)
    return CheckResult("wc initialization (H, D_X detached)", float(live), 0.5)


# -- suite ------------------------------------------------------------------------


def run_suite(seed: int = 0) -> tuple[list[CheckResult], float]:
    """All checks, plus the elapsed wall time in seconds."""
    t0 = time.perf_counter()
    results = primitive_checks(seed)
    results += loss_checks(seed)
    results.append(detach_check(seed))
    results.append(fine_tune_is_detached(seed))
    results += [meta_gradient_check(seed, inner_iters=i) for i in (1, 2)]
    return results, time.perf_counter() - t0
