"""Paths in parameter space between two unlearned minimizers.

Both curve kinds run from ``phi(0) = theta1`` to ``phi(1) = theta2``:

* linear: ``phi(t) = (1 - t) theta1 + t theta2``
* bezier: ``phi(t) = (1 - t)^2 theta1 + 2 t (1 - t) theta12 + t^2 theta2``

Points are evaluated with the parameter folded onto ``[0.5, 1]`` (swapping
the endpoints for ``t < 0.5``). For ``s >= 0.5`` the complement ``1 - s`` is
exact in binary floating point, so swapping the endpoints and reflecting
``t`` gives a bit-identical point. The cost is that a ``t < 0.5`` is
evaluated at ``1 - fl(1 - t)``, which is at most one ulp away.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .data import SplitDataset
from .errors import ConfigError, DimensionError, DomainError, NumericError
from .nn.model import Arch, ParamVector
from .optim import KINDS, OptimizerState, apply_update, hutchinson_diag
from .rng import Xoshiro256, derive_seed
from .training import batches, loss_and_grad
from .unlearn import Objective, UnlearnConfig, salun_mask

CURVE_KINDS = ("linear", "bezier")
WEIGHTINGS = ("uniform", "arclength")
DEFAULT_STEPS = 500


@dataclass(frozen=True)
class CurveSpec:
    kind: str
    theta1: ParamVector
    theta2: ParamVector
    theta12: ParamVector | None = None
    trained: bool = False
    history: tuple = ()

    def __post_init__(self):
        if self.kind not in CURVE_KINDS:
            raise ConfigError(f"curve kind must be one of {CURVE_KINDS}, got {self.kind!r}")
        if not self.theta1.same_layout(self.theta2):
            raise DimensionError(f"endpoint lengths differ: {len(self.theta1)} vs {len(self.theta2)}")
        if self.kind == "linear" and self.theta12 is not None:
            raise ConfigError("a linear curve has no midpoint")
        if self.theta12 is not None and not self.theta12.same_layout(self.theta1):
            raise DimensionError("midpoint layout differs from the endpoints")

    @classmethod
    def linear(cls, theta1: ParamVector, theta2: ParamVector) -> "CurveSpec":
        return cls("linear", theta1, theta2)

    @classmethod
    def bezier(cls, theta1: ParamVector, theta2: ParamVector, theta12: ParamVector | None = None) -> "CurveSpec":
        return cls("bezier", theta1, theta2, theta12 if theta12 is not None else init_midpoint(theta1, theta2))

    def reversed(self) -> "CurveSpec":
        return replace(self, theta1=self.theta2, theta2=self.theta1)


def _check_t(t) -> float:
    t = float(t)
    if not (0.0 <= t <= 1.0):
        raise DomainError(f"curve parameter t={t!r} outside [0, 1]")
    return t


def curve_point(spec: CurveSpec, t: float) -> ParamVector:
    """``phi(t)``; ``t`` exactly 0 or 1 returns the stored endpoint itself."""
    t = _check_t(t)
    if t == 0.0:
        return spec.theta1
    if t == 1.0:
        return spec.theta2
    near, far, s = spec.theta2, spec.theta1, t
    if t < 0.5:
        near, far, s = spec.theta1, spec.theta2, 1.0 - t
    if s == 1.0:
        return near  # 1 - t rounded to 1: match the reversed curve's endpoint, signed zeros included
    r = 1.0 - s
    a = near.values.astype(np.float64)
    b = far.values.astype(np.float64)
    if spec.kind == "linear":
        out = s * a + r * b
    else:
        mid = _midpoint(spec).values.astype(np.float64)
        out = (s * s * a + r * r * b) + (2.0 * s * r) * mid
    return spec.theta1.replace(out)


def _midpoint(spec: CurveSpec) -> ParamVector:
    if spec.theta12 is None:
        return init_midpoint(spec.theta1, spec.theta2)
    return spec.theta12


def init_midpoint(theta1: ParamVector, theta2: ParamVector) -> ParamVector:
    """``(theta1 + theta2) / 2``: the Bezier curve starts on the linear path."""
    if len(theta1) != len(theta2) or not theta1.same_layout(theta2):
        raise DimensionError(f"endpoint lengths differ: {len(theta1)} vs {len(theta2)}")
    return theta1.replace(0.5 * (theta1.values.astype(np.float64) + theta2.values.astype(np.float64)))


def grid(n_points: int) -> list[float]:
    if n_points < 2:
        raise ConfigError(f"n_points must be >= 2, got {n_points}")
    return [i / (n_points - 1) for i in range(n_points)]


def sample_curve(spec: CurveSpec, n_points: int) -> list[tuple[float, ParamVector]]:
    """Points at ``t_i = i / (n_points - 1)``, both endpoints included."""
    return [(t, curve_point(spec, t)) for t in grid(n_points)]


def tangent_norm(spec: CurveSpec, t: float) -> float:
    """``|phi'(t)|`` in parameter space."""
    a = spec.theta1.values.astype(np.float64)
    b = spec.theta2.values.astype(np.float64)
    if spec.kind == "linear":
        return float(np.linalg.norm(b - a))
    m = _midpoint(spec).values.astype(np.float64)
    return float(np.linalg.norm(2.0 * (1.0 - t) * (m - a) + 2.0 * t * (b - m)))


class _Cycler:
    """Endless stream of shuffled minibatches; reshuffles after each pass."""

    def __init__(self, idx, batch_size, rng):
        self.idx = np.asarray(idx, dtype=np.int64)
        self.batch_size = batch_size
        self.rng = rng
        self.queue = []

    def next(self):
        if self.idx.size == 0:
            return self.idx
        if not self.queue:
            self.queue = batches(self.rng.shuffled(self.idx), self.batch_size)[::-1]
        return self.queue.pop()


def train_midpoint(
    spec: CurveSpec,
    arch: Arch,
    ds: SplitDataset,
    unlearn_cfg: UnlearnConfig,
    steps: int = DEFAULT_STEPS,
    seed: int = 0,
    original: ParamVector | None = None,
    lr: float | None = None,
    optimizer: str | None = None,
    weighting: str = "uniform",
) -> CurveSpec:
    """Fit ``theta12`` by stochastic descent on ``E_t[J(phi(t))]``, ``t ~ U(0, 1)``.

    ``J`` is the unlearning objective of ``unlearn_cfg.method``. Its gradient
    at ``phi(t)`` reaches the midpoint through the factor ``2 t (1 - t)``.
    With ``weighting="arclength"`` each sample is reweighted by
    ``|phi'(t)|`` over its mean on a 16-point grid. ``original`` is the
    pre-unlearning model; it is required by the methods whose objective
    references it (bt, npo, salun).
    """
    if spec.kind != "bezier":
        raise ConfigError("only a bezier curve has a midpoint to train")
    if steps < 0:
        raise ConfigError(f"steps must be >= 0, got {steps}")
    if weighting not in WEIGHTINGS:
        raise ConfigError(f"weighting must be one of {WEIGHTINGS}, got {weighting!r}")
    kind = optimizer or unlearn_cfg.optimizer
    if kind not in KINDS:
        raise ConfigError(f"optimizer must be one of {KINDS}, got {kind!r}")
    method = unlearn_cfg.method
    if original is None:
        if method in ("bt", "npo", "salun"):
            raise ConfigError(f"{method} curve training needs the original model parameters")
        original = spec.theta1
    objective = Objective(arch, ds, unlearn_cfg, original)
    mask = salun_mask(arch.build(original), ds, unlearn_cfg.salun_fraction) if method == "salun" else None
    state = OptimizerState(
        kind=kind,
        lr=unlearn_cfg.learning_rate if lr is None and kind == unlearn_cfg.optimizer else lr,
        clip_factor=0.01 * unlearn_cfg.batch_size,
    )
    rng = Xoshiro256.derived(seed, "curve")
    retain = _Cycler(ds.retain_idx if unlearn_cfg.uses_retain else [], unlearn_cfg.batch_size, rng)
    forget = _Cycler(ds.forget_idx, unlearn_cfg.batch_size, rng)
    theta12 = _midpoint(spec)
    history = []
    for step in range(steps):
        t = rng.random()
        r_idx, f_idx = retain.next(), forget.next()
        current = replace(spec, theta12=theta12)
        phi = curve_point(current, t)

        def j(leaves, r_idx=r_idx, f_idx=f_idx):
            return objective(leaves, r_idx, f_idx)

        value, g = loss_and_grad(phi, j)
        if not math.isfinite(value):
            raise NumericError(f"curve objective became non-finite at t={t!r} (step {step})")
        history.append(value)
        factor = 2.0 * t * (1.0 - t)
        if factor == 0.0:
            continue
        if weighting == "arclength":
            norms = [tangent_norm(current, u) for u in grid(16)]
            mean = sum(norms) / len(norms)
            if mean > 0:
                factor *= tangent_norm(current, t) / mean
        g_mid = theta12.replace(factor * g.values.astype(np.float64))
        curvature = None
        if state.needs_curvature():
            h = hutchinson_diag(j, phi, unlearn_cfg.hessian_probes, derive_seed(seed, "curv", step))
            curvature = h.replace(factor * factor * h.values.astype(np.float64))
        updated = apply_update(state, theta12, g_mid, curvature)
        if mask is not None:
            updated = theta12.replace(np.where(mask, updated.values, theta12.values))
        theta12 = updated
    return replace(spec, theta12=theta12, trained=True, history=tuple(history))
