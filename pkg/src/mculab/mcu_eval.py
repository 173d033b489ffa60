"""Metrics along a curve and the two-sided barrier verdict.

A curve between unlearned minimizers theta1' and theta2' satisfies mode
connectivity in unlearning on a grid of t values when, at every t,

    L(D_r; phi(t)) <= (1 - t) L(D_r; theta1') + t L(D_r; theta2') + tau
    L(D_f; phi(t)) >= (1 - t) L(D_f; theta1') + t L(D_f; theta2') - tau

The first excess is the retain barrier, the second shortfall the forget cliff.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import kolmogorov

from .data import SplitDataset
from .errors import ConfigError, ContractError, DimensionError, NumericError
from .nn.model import Arch, ParamVector
from .training import per_sample_xent, predict

FQ_THRESHOLD = 0.05
DEFAULT_TAU = 0.05
STATISTICS = ("xent", "true_class_prob")
ZRF_REFERENCES = ("random", "original")
WORKERS_ENV = "MCULAB_WORKERS"

METRIC_FIELDS = ("loss_retain", "loss_forget", "acc_test", "acc_forget", "acc_retain", "zrf", "forget_quality")


@dataclass(frozen=True)
class MetricRecord:
    """Evaluation snapshot at one curve parameter. NaN marks a metric that was not computed."""

    t: float
    loss_retain: float
    loss_forget: float
    acc_test: float = math.nan
    acc_forget: float = math.nan
    acc_retain: float = math.nan
    zrf: float = math.nan
    forget_quality: float = math.nan

    def __post_init__(self):
        if not 0.0 <= self.t <= 1.0:
            raise ConfigError(f"t={self.t} outside [0, 1]")
        for name in ("acc_test", "acc_forget", "acc_retain", "zrf", "forget_quality"):
            v = getattr(self, name)
            if not (math.isnan(v) or 0.0 <= v <= 1.0):
                raise ConfigError(f"{name}={v} outside [0, 1]")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class BarrierReport:
    retain_barrier_height: float
    forget_cliff_depth: float
    tau: float
    mcu_holds: bool
    argmax_t_retain: float
    argmax_t_forget: float

    def as_dict(self) -> dict:
        return asdict(self)


class KSResult(NamedTuple):
    statistic: float
    pvalue: float


def _log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    m = z.max(axis=1, keepdims=True)
    return z - m - np.log(np.sum(np.exp(z - m), axis=1, keepdims=True))


def js_divergence_bits(logits_p, logits_q) -> np.ndarray:
    """Row-wise Jensen-Shannon divergence (base 2) between softmax distributions."""
    p = np.exp(_log_softmax(logits_p))
    q = np.exp(_log_softmax(logits_q))
    m = 0.5 * (p + q)
    with np.errstate(divide="ignore", invalid="ignore"):
        kp = np.where(p > 0, p * (np.log2(p) - np.log2(m)), 0.0)
        kq = np.where(q > 0, q * (np.log2(q) - np.log2(m)), 0.0)
    return np.clip(0.5 * kp.sum(axis=1) + 0.5 * kq.sum(axis=1), 0.0, 1.0)


def zrf_score(model_logits, reference_logits) -> float:
    """``1 - mean JS_2`` between the model's and the reference model's predictions on D_f."""
    a = np.asarray(model_logits)
    b = np.asarray(reference_logits)
    if a.shape != b.shape:
        raise DimensionError(f"zrf_score shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 2 or a.shape[0] == 0:
        raise ConfigError("zrf_score needs a non-empty [batch, classes] array")
    return float(min(1.0, max(0.0, 1.0 - float(np.mean(js_divergence_bits(a, b))))))


def ks_two_sample(a, b) -> KSResult:
    """Two-sample Kolmogorov-Smirnov statistic and its asymptotic p-value.

    ``p = Q(lambda)`` with ``lambda = (sqrt(ne) + 0.12 + 0.11 / sqrt(ne)) * D``
    and ``ne = n m / (n + m)``; ``Q`` is the Kolmogorov survival function.
    """
    a = np.sort(np.asarray(a, dtype=np.float64).reshape(-1))
    b = np.sort(np.asarray(b, dtype=np.float64).reshape(-1))
    n, m = a.size, b.size
    if n == 0 or m == 0:
        raise ConfigError("ks_two_sample needs two non-empty samples")
    if np.isnan(a).any() or np.isnan(b).any():
        raise NumericError("ks_two_sample input contains NaN")
    pts = np.concatenate([a, b])
    ia = np.searchsorted(a, pts, side="right").astype(np.int64)
    ib = np.searchsorted(b, pts, side="right").astype(np.int64)
    # integer numerators keep D correctly rounded: D = max|ia/n - ib/m|
    d = int(np.max(np.abs(ia * m - ib * n))) / (n * m)
    en = math.sqrt(n * m / (n + m))
    lam = (en + 0.12 + 0.11 / en) * d
    return KSResult(d, float(min(1.0, max(0.0, kolmogorov(lam)))))


def forget_scores(arch: Arch, params: ParamVector, ds: SplitDataset, statistic: str = "xent") -> np.ndarray:
    if statistic not in STATISTICS:
        raise ConfigError(f"statistic must be one of {STATISTICS}, got {statistic!r}")
    if len(ds.forget_idx) == 0:
        raise ConfigError("forget set is empty")
    xent = per_sample_xent(arch, params, *ds.subset(ds.forget_idx))
    return xent if statistic == "xent" else np.exp(-xent)


def forget_quality(unlearned: ParamVector, retrained: ParamVector, arch: Arch, ds: SplitDataset,
                   statistic: str = "xent") -> float:
    """KS p-value between per-sample D_f statistics of the unlearned and retrained models."""
    return ks_two_sample(forget_scores(arch, unlearned, ds, statistic), forget_scores(arch, retrained, ds, statistic)).pvalue


def _acc(logits, y) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == y))


def evaluate_point(
    arch: Arch,
    params: ParamVector,
    ds: SplitDataset,
    reference: ParamVector | None,
    retrained: ParamVector | None,
    t: float = 0.0,
    statistic: str = "xent",
) -> MetricRecord:
    """All metrics of one parameter vector. ``reference`` is the ZRF comparison model."""
    for name in ("forget_idx", "retain_idx", "test_idx"):
        if len(getattr(ds, name)) == 0:
            raise ConfigError(f"cannot evaluate on an empty split ({name})")
    xf, yf = ds.subset(ds.forget_idx)
    xr, yr = ds.subset(ds.retain_idx)
    xt, yt = ds.subset(ds.test_idx)
    logits_f = predict(arch, params, xf)
    zrf = math.nan if reference is None else zrf_score(logits_f, predict(arch, reference, xf))
    fq = math.nan if retrained is None else forget_quality(params, retrained, arch, ds, statistic)
    return MetricRecord(
        t=float(t),
        loss_retain=float(np.mean(per_sample_xent(arch, params, xr, yr))),
        loss_forget=float(np.mean(per_sample_xent(arch, params, xf, yf))),
        acc_test=_acc(predict(arch, params, xt), yt),
        acc_forget=_acc(logits_f, yf),
        acc_retain=_acc(predict(arch, params, xr), yr),
        zrf=zrf,
        forget_quality=fq,
    )


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw is None or raw == "":
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be a positive integer, got {raw!r}")
    return n


def evaluate_points(arch, points, ds, reference, retrained, statistic="xent", workers=None) -> list[MetricRecord]:
    """Evaluate ``(t, params)`` pairs, in parallel when more than one worker is allowed.

    Records come back sorted by t whatever order the workers finish in.
    """
    workers = worker_count() if workers is None else workers

    def one(item):
        t, params = item
        return evaluate_point(arch, params, ds, reference, retrained, t, statistic)

    if workers <= 1 or len(points) <= 1:
        records = [one(p) for p in points]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(one, points))
    return sorted(records, key=lambda r: r.t)


def _check_records(records) -> list:
    records = list(records)
    if len(records) < 2:
        raise ContractError("a barrier profile needs at least two records")
    ts = [r.t for r in records]
    for a, b in zip(ts, ts[1:]):
        if not a < b:
            raise ContractError(f"records must be sorted by strictly increasing t (got {a} then {b})")
    return records


def _excess(records, endpoints, field, sign):
    """Max of ``sign * (value - interpolant)`` over the records and the t where it occurs."""
    first, last = endpoints
    v1, v2 = getattr(first, field), getattr(last, field)
    best, best_t = -math.inf, records[0].t
    for r in records:
        gap = sign * (getattr(r, field) - ((1.0 - r.t) * v1 + r.t * v2))
        if gap > best:
            best, best_t = gap, r.t
    return best + 0.0, best_t  # fold -0.0 into 0.0


def barrier_profile(records, endpoints=None, tau: float = DEFAULT_TAU) -> BarrierReport:
    """Retain barrier height and forget cliff depth against the endpoint interpolant.

    ``endpoints`` defaults to the first and last record. Ties in the
    maximum resolve to the smallest t.
    """
    if not tau >= 0:
        raise ConfigError(f"tau must be >= 0, got {tau}")
    records = _check_records(records)
    endpoints = endpoints or (records[0], records[-1])
    barrier, t_b = _excess(records, endpoints, "loss_retain", 1.0)
    cliff, t_c = _excess(records, endpoints, "loss_forget", -1.0)
    holds = barrier <= tau and cliff <= tau
    return BarrierReport(barrier, cliff, tau, bool(holds), t_b, t_c)


def mc_barrier_standard(records, endpoints=None, tau: float = DEFAULT_TAU) -> float:
    """Single-dataset barrier height on the retain losses (classical mode connectivity)."""
    if not tau >= 0:
        raise ConfigError(f"tau must be >= 0, got {tau}")
    records = _check_records(records)
    return _excess(records, endpoints or (records[0], records[-1]), "loss_retain", 1.0)[0]
