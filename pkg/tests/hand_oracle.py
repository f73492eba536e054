"""Tape-free reference for one simultaneous update of four scalar networks.

Each network is ``n(x) = a * tanh(u * x + c) + b`` on 1-D inputs (the
parameter names follow the MLP layout: W0=u, b0=c, W1=a, b1=b). Every
derivative below is written out by hand with the chain rule, so it shares no
code with the autodiff engine.
"""

import numpy as np

NAMES = ("W0", "b0", "W1", "b1")


def unpack(ps):
    return tuple(float(np.asarray(ps[n]).reshape(-1)[0]) for n in NAMES)


def net(p, x):
    u, c, a, b = p
    return a * np.tanh(u * x + c) + b


def dnet_dx(p, x):
    u, c, a, _ = p
    h = np.tanh(u * x + c)
    return a * (1 - h * h) * u


def dnet_dp(p, x):
    """Per-sample derivatives w.r.t. (u, c, a, b), shape [4, n]."""
    u, c, a, _ = p
    h = np.tanh(u * x + c)
    s = a * (1 - h * h)
    return np.stack([s * x, s, h, np.ones_like(x)])


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def log_sigmoid(z):
    return -np.log1p(np.exp(-z))


def objective(F, H, DX, DY, x, y, lc, li):
    Fx, Hy = net(F, x), net(H, y)
    adv_f = np.mean(log_sigmoid(net(DY, y))) + np.mean(log_sigmoid(-net(DY, Fx)))
    adv_b = np.mean(log_sigmoid(net(DX, x))) + np.mean(log_sigmoid(-net(DX, Hy)))
    cyc = np.mean(np.abs(net(H, Fx) - x)) + np.mean(np.abs(net(F, Hy) - y))
    idt = np.mean(np.abs(net(H, x) - x)) + np.mean(np.abs(net(F, y) - y))
    return adv_f + adv_b + lc * cyc + li * idt


def gradients(F, H, DX, DY, x, y, lc, li):
    """Gradients of the composite objective w.r.t. (F, H, DX, DY) parameters."""
    Fx, Hy = net(F, x), net(H, y)
    HFx, FHy = net(H, Fx), net(F, Hy)

    # discriminators: d log s(z) = (1 - s(z)) dz ; d log s(-z) = -s(z) dz
    gDY = np.mean((1 - sigmoid(net(DY, y))) * dnet_dp(DY, y), axis=1) + np.mean(
        -sigmoid(net(DY, Fx)) * dnet_dp(DY, Fx), axis=1
    )
    gDX = np.mean((1 - sigmoid(net(DX, x))) * dnet_dp(DX, x), axis=1) + np.mean(
        -sigmoid(net(DX, Hy)) * dnet_dp(DX, Hy), axis=1
    )

    # forward generator F
    gF = np.mean(-sigmoid(net(DY, Fx)) * dnet_dx(DY, Fx) * dnet_dp(F, x), axis=1)
    gF += lc * np.mean(np.sign(HFx - x) * dnet_dx(H, Fx) * dnet_dp(F, x), axis=1)
    gF += lc * np.mean(np.sign(FHy - y) * dnet_dp(F, Hy), axis=1)
    gF += li * np.mean(np.sign(net(F, y) - y) * dnet_dp(F, y), axis=1)

    # backward generator H
    gH = np.mean(-sigmoid(net(DX, Hy)) * dnet_dx(DX, Hy) * dnet_dp(H, y), axis=1)
    gH += lc * np.mean(np.sign(HFx - x) * dnet_dp(H, Fx), axis=1)
    gH += lc * np.mean(np.sign(FHy - y) * dnet_dx(F, Hy) * dnet_dp(H, y), axis=1)
    gH += li * np.mean(np.sign(net(H, x) - x) * dnet_dp(H, x), axis=1)
    return gF, gH, gDX, gDY


def simultaneous_step(F, H, DX, DY, x, y, alpha, lc, li):
    """Generators descend, discriminators ascend, all from one gradient evaluation."""
    gF, gH, gDX, gDY = gradients(F, H, DX, DY, x, y, lc, li)
    step = lambda p, g, sgn: tuple(v + sgn * alpha * gi for v, gi in zip(p, g))  # noqa: E731
    return step(F, gF, -1), step(H, gH, -1), step(DX, gDX, +1), step(DY, gDY, +1)
