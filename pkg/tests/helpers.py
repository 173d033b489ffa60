"""Shared fixture builders for the unit and acceptance tests."""

from __future__ import annotations

import numpy as np

import oracles
from mculab.mcu_eval import MetricRecord
from mculab.nn import Arch, softmax_xent
from mculab.training import loss_and_grad

GRAD_ARCHS = [
    ((2, 8, 2), "relu"),
    ((2, 8, 2), "tanh"),
    ((3, 5, 4, 3), "tanh"),
    ((2, 16, 2), "relu"),
    ((4, 6, 6, 2), "relu"),
]


def _kink_margin(arch, values, x):
    """Smallest |pre-activation| relative to how far one coordinate step can move it."""
    if arch.activation != "relu":
        return np.inf
    pre = oracles.preactivations64(arch.layer_dims, values, x)
    scale = max(1.0, float(np.abs(x).max()))
    return min(float(np.abs(z).min()) for z in pre) / scale


def gradient_fixtures(count=25, h=1e-3):
    """``count`` seeded (arch, params, x, y) cases.

    ReLU cases whose pre-activations sit within a few FD steps of a kink are
    skipped, since central differences are not a valid oracle across a kink.
    """
    out, seed = [], 0
    while len(out) < count:
        dims, act = GRAD_ARCHS[seed % len(GRAD_ARCHS)]
        arch = Arch(dims, act)
        rng = np.random.default_rng(1000 + seed)
        batch = 1 + seed % 8
        x = rng.normal(size=(batch, dims[0])).astype(np.float32)
        y = rng.integers(0, dims[-1], size=batch)
        params = arch.init_params(seed)
        # non-zero biases so the bias gradients are exercised away from 0
        params = params.replace(params.values + 0.1 * rng.normal(size=len(params)))
        seed += 1
        if _kink_margin(arch, params.values, x) < 20 * h:
            continue
        out.append((arch, params, x, y))
    return out


def check_gradient(arch, params, x, y, h=1e-3, rtol=1e-4, atol=1e-6):
    """Return the number of coordinates where autodiff and central differences disagree."""
    model = arch.build(params)
    _, g = loss_and_grad(params, lambda leaves: softmax_xent(model.forward(x, leaves), y))

    def f(theta):
        return oracles.xent64(oracles.forward64(arch.layer_dims, arch.activation, theta, x), y)

    fd = oracles.central_diff(f, params.values.astype(np.float64), h)
    ad = g.values.astype(np.float64)
    bad = np.abs(ad - fd) > np.maximum(rtol * np.abs(fd), atol)
    return int(bad.sum()), float(np.max(np.abs(ad - fd)))


def record(t, lr, lf, **kw):
    base = dict(acc_test=0.5, acc_forget=0.5, acc_retain=0.5, zrf=0.5, forget_quality=0.5)
    base.update(kw)
    return MetricRecord(t=t, loss_retain=lr, loss_forget=lf, **base)


def records_from(ts, retain, forget):
    return [record(t, a, b) for t, a, b in zip(ts, retain, forget)]
