"""Supervised fitting shared by base-model training and the retrain oracle."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, TrainingError
from .nn import tensor as T
from .nn.losses import softmax_xent, xent_per_sample
from .nn.model import Arch, ParamVector, backward
from .optim import OptimizerState, apply_update, hutchinson_diag
from .rng import Xoshiro256


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 200
    batch_size: int = 32
    optimizer: str = "adam"
    lr: float = 0.01
    accuracy_floor: float = 0.97

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.accuracy_floor <= 1.0:
            raise ConfigError("accuracy_floor must lie in [0, 1]")


class AccessLog:
    """Record of which sample indices fed a gradient computation, per role and epoch."""

    def __init__(self):
        self.by_role: dict[str, set] = {}
        self.by_epoch: dict[tuple[str, int], set] = {}

    def record(self, role: str, idx, epoch: int = 0) -> None:
        idx = [int(i) for i in np.asarray(idx).reshape(-1)]
        if not idx:
            return
        self.by_role.setdefault(role, set()).update(idx)
        self.by_epoch.setdefault((role, epoch), set()).update(idx)

    def seen(self, role: str) -> set:
        return self.by_role.get(role, set())


def batches(order, batch_size: int):
    order = np.asarray(order, dtype=np.int64)
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


def loss_and_grad(params: ParamVector, objective):
    """Evaluate ``objective(leaves)`` and its gradient as a ParamVector."""
    leaves = params.leaves(requires_grad=True)
    loss = objective(leaves)
    value = loss.item()
    return value, backward(loss)


def make_state(kind: str, lr: float | None, batch_size: int) -> OptimizerState:
    return OptimizerState(kind=kind, lr=lr, clip_factor=0.01 * batch_size)


def predict(arch: Arch, params: ParamVector, x) -> np.ndarray:
    return arch.build(params).logits(x)


def accuracy(arch: Arch, params: ParamVector, x, y) -> float:
    if len(y) == 0:
        return math.nan
    return float(np.mean(np.argmax(predict(arch, params, x), axis=1) == np.asarray(y)))


def per_sample_xent(arch: Arch, params: ParamVector, x, y) -> np.ndarray:
    with T.no_grad():
        return xent_per_sample(arch.build(params).forward(x), y).data.astype(np.float64)


def mean_xent(arch: Arch, params: ParamVector, x, y) -> float:
    return float(np.mean(per_sample_xent(arch, params, x, y))) if len(y) else math.nan


def fit(
    arch: Arch,
    features: np.ndarray,
    labels: np.ndarray,
    indices,
    schedule: TrainSchedule,
    seed: int,
    init: ParamVector | None = None,
    access_log: AccessLog | None = None,
    role: str = "train",
):
    """Minibatch cross-entropy training on ``indices`` from a seeded init.

    Returns ``(params, curve)`` where ``curve`` holds per-epoch
    ``(loss, accuracy)`` on the training indices. Raises
    :class:`TrainingError` when the final accuracy is below the floor.
    """
    indices = np.asarray(indices, dtype=np.int64)
    params = init if init is not None else arch.init_params(seed)
    if schedule.epochs == 0:
        return params, []
    model = arch.build(params)
    state = make_state(schedule.optimizer, schedule.lr, schedule.batch_size)
    rng = Xoshiro256.derived(seed, "fit-order")
    x_all, y_all = features[indices], labels[indices]
    curve = []
    for epoch in range(schedule.epochs):
        for chunk in batches(rng.shuffled(indices), schedule.batch_size):
            if access_log is not None:
                access_log.record(role, chunk, epoch)
            x, y = features[chunk], labels[chunk]

            def objective(leaves, x=x, y=y):
                return softmax_xent(model.forward(x, leaves), y)

            _, g = loss_and_grad(params, objective)
            curvature = None
            if state.needs_curvature():
                curvature = hutchinson_diag(objective, params, 1, seed + state.step_count)
            params = apply_update(state, params, g, curvature)
        curve.append((mean_xent(arch, params, x_all, y_all), accuracy(arch, params, x_all, y_all)))
    if curve[-1][1] < schedule.accuracy_floor:
        raise TrainingError(
            f"training accuracy {curve[-1][1]:.4f} below floor {schedule.accuracy_floor} "
            f"after {schedule.epochs} epochs",
            curve,
        )
    return params, curve
