"""First- and second-order update rules and curriculum ordering.

All rules take and return immutable :class:`ParamVector` snapshots. The
arithmetic runs in float64 and the result is rounded back to float32.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError
from .nn import tensor as T
from .nn.model import ParamVector, grads_from_leaves
from .rng import Xoshiro256

KINDS = ("sgd", "adam", "so_diag")
DEFAULT_LR = {"sgd": 0.05, "adam": 1e-3, "so_diag": 0.01}


@dataclass
class OptimizerState:
    """Mutable optimizer state owned by exactly one training loop.

    ``clip_factor`` is the curvature scale gamma of the clipped Newton rule;
    callers normally set it to ``0.01 * batch_size``.
    """

    kind: str = "sgd"
    lr: float | None = None
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_factor: float = 0.01
    damping: float = 1e-12
    curvature_ema: float = 0.99
    refresh_every: int = 10
    step_count: int = 0
    curvature_updates: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    h: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"optimizer kind must be one of {KINDS}, got {self.kind!r}")
        if self.lr is None:
            self.lr = DEFAULT_LR[self.kind]
        if self.lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")
        if self.damping <= 0:
            raise ConfigError(f"damping must be > 0, got {self.damping}")
        if self.refresh_every < 1:
            raise ConfigError("refresh_every must be >= 1")

    def needs_curvature(self) -> bool:
        """True when the next ``so_diag`` step should receive a fresh Hessian estimate."""
        return self.kind == "so_diag" and self.step_count % self.refresh_every == 0


def _check_finite(grads: ParamVector) -> None:
    if np.all(np.isfinite(grads.values)):
        return
    for entry, arr in grads.items():
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite gradient in parameter {entry.name!r}")


def _check_pair(params: ParamVector, grads: ParamVector) -> None:
    if not params.same_layout(grads):
        raise ConfigError("parameter and gradient layouts differ")
    _check_finite(grads)


def _buffer(store: dict, name: str, shape) -> np.ndarray:
    buf = store.get(name)
    if buf is None:
        buf = store[name] = np.zeros(shape, dtype=np.float64)
    elif buf.shape != tuple(shape):
        raise ConfigError(f"moment buffer {name!r} has shape {buf.shape}, parameter has {tuple(shape)}")
    return buf


def sgd_step(params: ParamVector, grads: ParamVector, lr: float) -> ParamVector:
    if lr < 0:
        raise ConfigError(f"learning rate must be >= 0, got {lr}")
    _check_pair(params, grads)
    new = params.values.astype(np.float64) - lr * grads.values.astype(np.float64)
    return params.replace(new)


def adam_step(state: OptimizerState, params: ParamVector, grads: ParamVector) -> ParamVector:
    if state.kind != "adam":
        raise ConfigError(f"adam_step called with a {state.kind!r} state")
    _check_pair(params, grads)
    state.step_count += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.step_count
    c2 = 1.0 - b2**state.step_count
    out = params.values.astype(np.float64)
    for entry, g in grads.items():
        g = g.astype(np.float64)
        m = _buffer(state.m, entry.name, entry.shape)
        v = _buffer(state.v, entry.name, entry.shape)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        upd = (m / c1) / (np.sqrt(v / c2) + state.eps)
        out[entry.offset : entry.offset + entry.size] -= state.lr * upd.reshape(-1)
    return params.replace(out)


def so_diag_step(
    state: OptimizerState,
    params: ParamVector,
    grads: ParamVector,
    hessian_diag_estimate: ParamVector | None = None,
) -> ParamVector:
    """Clipped diagonal-Newton step ``theta - lr * clip(m / max(gamma*h, eps), -1, 1)``.

    ``m`` is the bias-corrected gradient EMA (beta1) and ``h`` the
    bias-corrected EMA of non-negative curvature estimates. Passing ``None``
    for the estimate reuses the current curvature EMA.
    """
    if state.kind != "so_diag":
        raise ConfigError(f"so_diag_step called with a {state.kind!r} state")
    if state.damping <= 0:
        raise ConfigError(f"damping must be > 0, got {state.damping}")
    _check_pair(params, grads)
    state.step_count += 1
    b1 = state.betas[0]
    b2 = state.curvature_ema
    if hessian_diag_estimate is not None:
        if len(hessian_diag_estimate) != len(params):
            raise ConfigError("curvature estimate length differs from parameters")
        state.curvature_updates += 1
    c1 = 1.0 - b1**state.step_count
    c2 = 1.0 - b2**state.curvature_updates if state.curvature_updates else 1.0
    out = params.values.astype(np.float64)
    for entry, g in grads.items():
        m = _buffer(state.m, entry.name, entry.shape)
        h = _buffer(state.h, entry.name, entry.shape)
        m *= b1
        m += (1.0 - b1) * g.astype(np.float64)
        if hessian_diag_estimate is not None:
            est = hessian_diag_estimate.values[entry.offset : entry.offset + entry.size].reshape(entry.shape)
            h *= b2
            h += (1.0 - b2) * np.maximum(est.astype(np.float64), 0.0)
        denom = np.maximum(state.clip_factor * (h / c2), state.damping)
        ratio = np.clip((m / c1) / denom, -1.0, 1.0)
        out[entry.offset : entry.offset + entry.size] -= state.lr * ratio.reshape(-1)
    return params.replace(out)


def apply_update(state: OptimizerState, params: ParamVector, grads: ParamVector, curvature=None) -> ParamVector:
    """Dispatch to the rule named by ``state.kind``."""
    if state.kind == "sgd":
        _check_pair(params, grads)
        state.step_count += 1
        return sgd_step(params, grads, state.lr)
    if state.kind == "adam":
        return adam_step(state, params, grads)
    return so_diag_step(state, params, grads, curvature)


def hutchinson_diag(objective, params: ParamVector, probes: int = 1, seed: int = 0) -> ParamVector:
    """Mean of ``z * (H z)`` over Rademacher probes, clamped at zero.

    ``objective(leaves)`` must return a scalar tensor built from the leaf
    tensors of ``params``; ``H z`` comes from differentiating ``grad . z``.
    """
    if probes < 1:
        raise ConfigError(f"probes must be >= 1, got {probes}")
    leaves = params.leaves(requires_grad=True)
    loss = objective(leaves)
    first = T.grad(loss, leaves, create_graph=True)
    rng = Xoshiro256.derived(seed, "hutchinson")
    acc = np.zeros(len(params), dtype=np.float64)
    for _ in range(probes):
        z = rng.rademacher(len(params))
        dot = None
        for leaf, g in zip(leaves, first):
            if g is None or not g.requires_grad:
                continue
            entry = leaf.param_ref[1]
            zt = T.Tensor(z[entry.offset : entry.offset + entry.size].reshape(entry.shape))
            term = T.tsum(g * zt)
            dot = term if dot is None else dot + term
        if dot is None:
            continue
        hz = grads_from_leaves(leaves, T.grad(dot, leaves))
        acc += z.astype(np.float64) * hz.values.astype(np.float64)
    return params.replace(np.maximum(acc / probes, 0.0))


def estimate_hessian_diag(model, batch, probes: int = 1, seed: int = 0, objective=None) -> ParamVector:
    """Hutchinson estimate of the cross-entropy Hessian diagonal on ``batch = (x, y)``.

    ``objective(model, leaves, batch)`` replaces the default loss when given.
    """
    from .nn.losses import softmax_xent

    if objective is None:
        x, y = batch

        def loss_fn(leaves):
            return softmax_xent(model.forward(x, leaves), y)

    else:

        def loss_fn(leaves):
            return objective(model, leaves, batch)

    return hutchinson_diag(loss_fn, model.params, probes, seed)


def curriculum_order(per_sample_losses, direction: str = "ascending") -> np.ndarray:
    """Stable ordering of sample indices by loss; ties keep their original order."""
    losses = np.asarray(per_sample_losses, dtype=np.float64)
    if np.any(np.isnan(losses)):
        raise NumericError("curriculum scores contain NaN")
    if direction == "ascending":
        return np.argsort(losses, kind="stable")
    if direction == "descending":
        return np.argsort(-losses, kind="stable")
    raise ConfigError(f"direction must be 'ascending' or 'descending', got {direction!r}")
