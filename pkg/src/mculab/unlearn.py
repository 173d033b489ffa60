"""Unlearning procedures and the retrain-from-scratch oracle.

Every method starts from the original parameters and descends a method
objective J over paired (retain batch, forget batch) steps:

* ``ga``    J = -L(D_f)                                  (forget batches only)
* ``gd``    J = L(D_r) - w * L(D_f)
* ``rl``    J = L(corrupted D_f  U  subsample of D_r)
* ``salun`` the ``rl`` objective, updates masked to salient coordinates
* ``bt``    J = KL(f'(D_r) || f(D_r)) + s * alpha * KL(f'(D_f) || f_dumb(D_f))
* ``npo``   J = (2/beta) mean log(1 + (p/p_ref)^beta) on D_f  [+ L(D_r)]

The same objectives drive Bezier midpoint training in :mod:`mculab.curves`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import SplitDataset, corrupt_labels
from .errors import ConfigError, NumericError
from .nn import tensor as T
from .nn.losses import kl_divergence, log_prob_of, softmax_xent, xent_per_sample
from .nn.model import Arch, MlpModel, ParamVector
from .optim import DEFAULT_LR, KINDS, apply_update, curriculum_order, hutchinson_diag
from .rng import Xoshiro256, derive_seed
from .training import (
    AccessLog,
    TrainSchedule,
    batches,
    fit,
    loss_and_grad,
    make_state,
    mean_xent,
    per_sample_xent,
)

METHODS = ("ga", "rl", "gd", "bt", "salun", "npo")
USES_RETAIN = {"ga": False, "rl": True, "gd": True, "bt": True, "salun": True, "npo": True}
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class UnlearnConfig:
    method: str
    epochs: int = 20
    batch_size: int = 32
    optimizer: str = "sgd"
    lr: float | None = None
    curriculum: str | None = None
    seed: int = 0
    salun_fraction: float = 0.5
    bt_weight: float = 1.0
    bt_forget_sign: int = 1
    npo_beta: float = 0.1
    npo_retain: bool = True
    rl_retain_fraction: float = 1.0
    gd_forget_weight: float = 1.0
    divergence_factor: float = 50.0
    hessian_probes: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.optimizer not in KINDS:
            raise ConfigError(f"optimizer must be one of {KINDS}, got {self.optimizer!r}")
        if self.curriculum not in (None, "ascending", "descending"):
            raise ConfigError(f"curriculum must be ascending, descending or None, got {self.curriculum!r}")
        if not 0.0 < self.salun_fraction <= 1.0:
            raise ConfigError("salun_fraction must lie in (0, 1]")
        if self.npo_beta <= 0:
            raise ConfigError("npo_beta must be > 0")
        if self.bt_weight < 0:
            raise ConfigError("bt_weight must be >= 0")
        if self.bt_forget_sign not in (1, -1):
            raise ConfigError("bt_forget_sign must be +1 or -1")
        if not 0.0 < self.rl_retain_fraction <= 1.0:
            raise ConfigError("rl_retain_fraction must lie in (0, 1]")
        if self.divergence_factor <= 0 or self.hessian_probes < 1:
            raise ConfigError("divergence_factor must be > 0 and hessian_probes >= 1")

    @property
    def learning_rate(self) -> float:
        return DEFAULT_LR[self.optimizer] if self.lr is None else self.lr

    @property
    def uses_retain(self) -> bool:
        return USES_RETAIN[self.method] and not (self.method == "npo" and not self.npo_retain)


@dataclass
class UnlearnResult:
    params: ParamVector
    method: str
    training_log: list = field(default_factory=list)
    seed: int = 0
    stopped_early: bool = False
    access: AccessLog = field(default_factory=AccessLog)
    prob_clamps: int = 0


class Objective:
    """Method objective J evaluated on a (retain batch, forget batch) pair.

    ``forget_labels`` holds the labels the objective trains the forget set
    towards (corrupted for ``rl``/``salun``, original otherwise).
    """

    def __init__(self, arch: Arch, ds: SplitDataset, cfg: UnlearnConfig, original: ParamVector):
        self.arch = arch
        self.ds = ds
        self.cfg = cfg
        self.model = arch.build(original)
        self.original = arch.build(original)
        self.forget_labels = ds.labels
        if cfg.method in ("rl", "salun"):
            self.forget_labels = corrupt_labels(ds, ds.forget_idx, cfg.seed)
        self.dumb = None
        if cfg.method == "bt":
            self.dumb = arch.build(dumb_params(arch, cfg.seed))
        self.prob_clamps = 0

    def __call__(self, leaves, retain_idx, forget_idx) -> T.Tensor:
        ds, cfg, method = self.ds, self.cfg, self.cfg.method
        xr, yr = ds.features[retain_idx], ds.labels[retain_idx]
        xf, yf = ds.features[forget_idx], self.forget_labels[forget_idx]
        has_r, has_f = len(retain_idx) > 0, len(forget_idx) > 0
        fwd = self.model.forward
        if method == "ga":
            return -softmax_xent(fwd(xf, leaves), yf)
        if method == "gd":
            j = softmax_xent(fwd(xr, leaves), yr) if has_r else T.Tensor(0.0)
            if has_f and cfg.gd_forget_weight != 0:
                j = j - cfg.gd_forget_weight * softmax_xent(fwd(xf, leaves), yf)
            return j
        if method in ("rl", "salun"):
            x = np.concatenate([xf, xr]) if has_r else xf
            y = np.concatenate([yf, yr]) if has_r else yf
            return softmax_xent(fwd(x, leaves), y)
        if method == "bt":
            with T.no_grad():
                teach_r = self.original.forward(xr) if has_r else None
                teach_f = self.dumb.forward(xf) if has_f else None
            j = kl_divergence(fwd(xr, leaves), teach_r) if has_r else T.Tensor(0.0)
            if has_f and cfg.bt_weight != 0:
                j = j + (cfg.bt_forget_sign * cfg.bt_weight) * kl_divergence(fwd(xf, leaves), teach_f)
            return j
        if method == "npo":
            beta = cfg.npo_beta
            with T.no_grad():
                ref = log_prob_of(self.original.forward(xf), yf).data
            floor = math.log(PROB_FLOOR)
            self.prob_clamps += int(np.sum(ref < floor))
            ref = T.Tensor(np.maximum(ref, floor))
            ratio = log_prob_of(fwd(xf, leaves), yf) - ref
            j = (2.0 / beta) * T.mean(T.softplus(beta * ratio))
            if has_r and cfg.npo_retain:
                j = j + softmax_xent(fwd(xr, leaves), yr)
            return j
        raise ConfigError(method)


def dumb_params(arch: Arch, seed: int) -> ParamVector:
    """The incompetent teacher / random reference model: a fresh seeded init."""
    return arch.init_params(derive_seed(seed, "dumb"))


def salun_mask(model: MlpModel, ds: SplitDataset, fraction: float) -> np.ndarray:
    """Boolean mask over the top ``ceil(fraction * |theta|)`` coordinates by ``|dL(D_f)/dtheta|``.

    Ties go to the lower coordinate index.
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigError("salun fraction must lie in (0, 1]")
    params = model.params
    xf, yf = ds.subset(ds.forget_idx)
    _, g = loss_and_grad(params, lambda leaves: softmax_xent(model.forward(xf, leaves), yf))
    return top_k_mask(np.abs(g.values), math.ceil(fraction * len(params)))


def top_k_mask(scores, k: int) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(scores.size), -scores))
    mask = np.zeros(scores.size, dtype=bool)
    mask[order[:k]] = True
    return mask


def forget_schedule(arch, ds, original: ParamVector, cfg: UnlearnConfig):
    """Fixed curriculum order of D_f (scored by original-model loss), or None for shuffling."""
    if cfg.curriculum is None:
        return None
    scores = per_sample_xent(arch, original, *ds.subset(ds.forget_idx))
    return ds.forget_idx[curriculum_order(scores, cfg.curriculum)]


def _run(arch: Arch, original: ParamVector, ds: SplitDataset, cfg: UnlearnConfig, mask=None, on_epoch=None) -> UnlearnResult:
    if len(ds.forget_idx) == 0:
        raise ConfigError("dataset has an empty forget set")
    objective = Objective(arch, ds, cfg, original)
    state = make_state(cfg.optimizer, cfg.learning_rate, cfg.batch_size)
    rng = Xoshiro256.derived(cfg.seed, "unlearn-order")
    curriculum = forget_schedule(arch, ds, original, cfg)
    result = UnlearnResult(params=original, method=cfg.method, seed=cfg.seed)
    xf, yf = ds.subset(ds.forget_idx)
    ceiling = None
    if cfg.method in ("ga", "gd"):
        # reference loss floored at the uniform-prediction loss so saturated bases can still ascend
        ceiling = cfg.divergence_factor * max(mean_xent(arch, original, xf, yf), math.log(ds.classes))
    n_retain = len(ds.retain_idx)
    params = original
    for epoch in range(cfg.epochs):
        forget_order = curriculum if curriculum is not None else rng.shuffled(ds.forget_idx)
        forget_batches = batches(forget_order, cfg.batch_size)
        if cfg.uses_retain:
            retain_pool = ds.retain_idx
            if cfg.method in ("rl", "salun") and cfg.rl_retain_fraction < 1.0:
                keep = math.ceil(cfg.rl_retain_fraction * n_retain)
                retain_pool = np.sort(rng.shuffled(ds.retain_idx)[:keep])
            retain_batches = batches(rng.shuffled(retain_pool), cfg.batch_size)
        else:
            retain_batches = []
        steps = max(len(retain_batches), len(forget_batches))
        for k in range(steps):
            r_idx = retain_batches[k % len(retain_batches)] if retain_batches else np.zeros(0, np.int64)
            f_idx = forget_batches[k % len(forget_batches)]
            if ceiling is not None:
                batch_loss = mean_xent(arch, params, *ds.subset(f_idx))
                if not batch_loss <= ceiling:
                    result.stopped_early = True
                    break
            result.access.record("retain", r_idx, epoch)
            result.access.record("forget", f_idx, epoch)

            def j(leaves, r_idx=r_idx, f_idx=f_idx):
                return objective(leaves, r_idx, f_idx)

            value, g = loss_and_grad(params, j)
            if not math.isfinite(value):
                raise NumericError(f"{cfg.method}: objective became non-finite at epoch {epoch}")
            curvature = None
            if state.needs_curvature():
                curvature = hutchinson_diag(j, params, cfg.hessian_probes, derive_seed(cfg.seed, "curv", state.step_count))
            updated = apply_update(state, params, g, curvature)
            if mask is not None:
                updated = params.replace(np.where(mask, updated.values, params.values))
            params = updated
        result.training_log.append(
            (mean_xent(arch, params, *ds.subset(ds.retain_idx)), mean_xent(arch, params, xf, yf))
        )
        if on_epoch is not None:
            on_epoch(epoch, params)
        if result.stopped_early:
            break
    result.params = params
    result.prob_clamps = objective.prob_clamps
    return result


def _expect(cfg: UnlearnConfig, method: str) -> None:
    if cfg.method != method:
        raise ConfigError(f"config is for method {cfg.method!r}, expected {method!r}")


def unlearn_ga(model: MlpModel, ds: SplitDataset, cfg: UnlearnConfig) -> UnlearnResult:
    _expect(cfg, "ga")
    return _run(model.arch, model.params, ds, cfg)


def unlearn_rl(model: MlpModel, ds: SplitDataset, cfg: UnlearnConfig) -> UnlearnResult:
    _expect(cfg, "rl")
    return _run(model.arch, model.params, ds, cfg)


def unlearn_gd(model: MlpModel, ds: SplitDataset, cfg: UnlearnConfig) -> UnlearnResult:
    _expect(cfg, "gd")
    return _run(model.arch, model.params, ds, cfg)


def unlearn_bt(model: MlpModel, ds: SplitDataset, cfg: UnlearnConfig) -> UnlearnResult:
    _expect(cfg, "bt")
    return _run(model.arch, model.params, ds, cfg)


def unlearn_salun(model: MlpModel, ds: SplitDataset, cfg: UnlearnConfig) -> UnlearnResult:
    _expect(cfg, "salun")
    mask = salun_mask(model, ds, cfg.salun_fraction)
    return _run(model.arch, model.params, ds, cfg, mask=mask)


def unlearn_npo(model: MlpModel, ds: SplitDataset, cfg: UnlearnConfig) -> UnlearnResult:
    _expect(cfg, "npo")
    return _run(model.arch, model.params, ds, cfg)


_DISPATCH = {
    "ga": unlearn_ga,
    "rl": unlearn_rl,
    "gd": unlearn_gd,
    "bt": unlearn_bt,
    "salun": unlearn_salun,
    "npo": unlearn_npo,
}


def unlearn(model: MlpModel, ds: SplitDataset, cfg: UnlearnConfig) -> UnlearnResult:
    """Run the method named by ``cfg.method`` starting from ``model.params``."""
    return _DISPATCH[cfg.method](model, ds, cfg)


def retrain_oracle(arch: Arch, ds: SplitDataset, seed: int, schedule: TrainSchedule | None = None,
                   access_log: AccessLog | None = None) -> ParamVector:
    """Train from a fresh seeded init on D_r only, with the base-model schedule."""
    schedule = schedule or TrainSchedule()
    params, _ = fit(arch, ds.features, ds.labels, ds.retain_idx, schedule, seed, access_log=access_log, role="retrain")
    return params
