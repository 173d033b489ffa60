"""End-to-end runs of one experimental setting, with a content-addressed stage cache.

Stages and what keys their cache entries:

* ``base``       data spec, model spec, base schedule
* ``retrain``    the same plus the retrain seed (shared by every setting on that split)
* ``reference``  architecture and reference seed (the random model for ZRF)
* ``endpoint``   base key plus the full unlearning config of that endpoint
* ``curve``      endpoint ids plus curve settings and the midpoint objective
* ``eval``       curve id, grid size, reference and retrain ids, statistic

Every stage writes once. A rerun with the same config finds each entry
and skips the work, so the final report is byte-identical.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .. import __version__
from ..curves import CurveSpec, sample_curve, train_midpoint
from ..data import SplitDataset
from ..errors import CheckpointError, ConfigError, StageFailure
from ..mcu_eval import MetricRecord, evaluate_points
from ..nn.model import Arch, ParamVector
from ..training import TrainSchedule, fit
from ..unlearn import dumb_params, retrain_oracle, unlearn
from .checkpoint import checkpoint_id, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, render_config, stable_hash


def train_base(arch: Arch, ds: SplitDataset, schedule: TrainSchedule, seed: int, path=None):
    """Train the original model on D_f U D_r; optionally persist it. Returns ``(params, curve)``."""
    params, curve = fit(arch, ds.features, ds.labels, ds.train_idx, schedule, seed, role="base")
    if path is not None:
        save_checkpoint(params, path)
    return params, curve


@dataclass
class RunManifest:
    config_hash: str
    setting: str
    version: str = __version__
    status: str = "running"
    failed_stage: str | None = None
    error: str | None = None
    checkpoints: dict = field(default_factory=dict)
    endpoints: list = field(default_factory=list)
    curves: dict = field(default_factory=dict)
    metric_tables: dict = field(default_factory=dict)
    barrier_reports: dict = field(default_factory=dict)
    report_csv: str | None = None
    report_json: str | None = None
    wall_clock_s: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunManifest":
        return cls(**data)

    def save(self, path) -> None:
        _write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "RunManifest":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def checkpoint_refs(self):
        for name, ref in self.checkpoints.items():
            yield name, ref
        for i, ep in enumerate(self.endpoints):
            yield f"endpoint{i + 1}", ep
        for kind, ref in self.curves.items():
            if ref.get("path"):
                yield f"curve:{kind}", ref


def verify_manifest(manifest: RunManifest, root) -> None:
    """Check every referenced checkpoint exists and carries the recorded id."""
    for name, ref in manifest.checkpoint_refs():
        path = os.path.join(root, ref["path"])
        if not os.path.exists(path):
            raise CheckpointError(f"{name}: missing checkpoint {path}")
        if checkpoint_id(load_checkpoint(path)) != ref["id"]:
            raise CheckpointError(f"{name}: checkpoint {path} does not match its recorded id")


def _clean(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def _write_json(path, obj) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(_clean(obj), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")
    os.replace(tmp, path)


def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


class StageCache:
    """Write-once store of checkpoints and JSON sidecars named ``<stage>-<key>``."""

    def __init__(self, root):
        self.root = os.fspath(root)
        os.makedirs(self.root, exist_ok=True)
        self.hits: list[str] = []
        self.misses: list[str] = []

    def path(self, stage: str, key: str, ext: str) -> str:
        return os.path.join(self.root, f"{stage}-{key}.{ext}")

    def params(self, stage: str, key: str, compute) -> tuple[ParamVector, str, str]:
        """Load the cached vector or compute and store it. Returns ``(params, path, id)``."""
        path = self.path(stage, key, "mcu")
        if os.path.exists(path):
            try:
                params = load_checkpoint(path)
                self.hits.append(stage)
                return params, path, checkpoint_id(params)
            except CheckpointError:
                pass  # damaged entry: recompute and overwrite
        params = compute()
        cid = save_checkpoint(params, path)
        self.misses.append(stage)
        return params, path, cid

    def document(self, stage: str, key: str, compute):
        path = self.path(stage, key, "json")
        if os.path.exists(path):
            self.hits.append(stage)
            return _read_json(path), path
        doc = _clean(compute())
        _write_json(path, doc)
        self.misses.append(stage)
        return _read_json(path), path


def _records_to_doc(records) -> list[dict]:
    return [r.as_dict() for r in records]


def records_from_doc(doc) -> list[MetricRecord]:
    return [MetricRecord(**{k: (math.nan if v is None else v) for k, v in row.items()}) for row in doc]


def run_setting(cfg: ExperimentConfig, out_dir, cache_dir=None, workers: int | None = None,
                plots: bool = True) -> RunManifest:
    """Run one setting end to end and write ``manifest.json``, reports and plots into ``out_dir``.

    A failing stage raises :class:`StageFailure` carrying a partial manifest
    (also written to disk); completed stages stay cached for the rerun.
    """
    from .report import emit_report

    start = time.perf_counter()
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    cache = StageCache(cache_dir if cache_dir is not None else os.path.join(out_dir, "cache"))
    manifest = RunManifest(config_hash=cfg.hash(), setting=cfg.setting)
    with open(os.path.join(out_dir, "config.cfg"), "w") as fh:
        fh.write(render_config(cfg))

    def rel(path):
        return os.path.relpath(path, out_dir)

    stage = "data"
    try:
        ds = cfg.data.build()
        arch = cfg.model.arch(ds)
        base_key = stable_hash({"data": asdict(cfg.data), "model": asdict(cfg.model), "base": asdict(cfg.base)})

        stage = "base"
        base, path, cid = cache.params(
            "base", base_key, lambda: train_base(arch, ds, cfg.base.schedule(), cfg.base.seed)[0]
        )
        manifest.checkpoints["base"] = {"path": rel(path), "id": cid}

        stage = "retrain"
        retrain_key = stable_hash([base_key, "retrain", cfg.retrain_seed])
        retrained, path, rid = cache.params(
            "retrain", retrain_key, lambda: retrain_oracle(arch, ds, cfg.retrain_seed, cfg.base.schedule())
        )
        manifest.checkpoints["retrain"] = {"path": rel(path), "id": rid}

        stage = "reference"
        if cfg.zrf_reference == "random":
            ref_key = stable_hash([list(arch.layer_dims), arch.activation, cfg.reference_seed])
            reference, path, refid = cache.params("reference", ref_key, lambda: dumb_params(arch, cfg.reference_seed))
            manifest.checkpoints["reference"] = {"path": rel(path), "id": refid}
        else:
            reference, refid = base, cid

        endpoints = []
        for i, ucfg in enumerate(cfg.endpoint_configs(), start=1):
            stage = f"endpoint{i}"
            key = stable_hash([base_key, asdict(ucfg)])
            info = {}

            def compute(ucfg=ucfg, info=info):
                res = unlearn(arch.build(base), ds, ucfg)
                info.update(stopped_early=res.stopped_early, training_log=res.training_log, prob_clamps=res.prob_clamps)
                return res.params

            params, path, eid = cache.params("endpoint", key, compute)
            log, _ = cache.document("endpoint", key, lambda info=info: info)
            endpoints.append(params)
            manifest.endpoints.append({
                "path": rel(path), "id": eid, "method": ucfg.method, "seed": ucfg.seed,
                "optimizer": ucfg.optimizer, "curriculum": ucfg.curriculum,
                "stopped_early": log.get("stopped_early", False), "epochs_run": len(log.get("training_log", [])),
            })

        for kind in cfg.curve.kinds:
            stage = f"curve:{kind}"
            ids = [ep["id"] for ep in manifest.endpoints]
            if kind == "linear":
                spec = CurveSpec.linear(*endpoints)
                curve_id = stable_hash(["linear", *ids])
                manifest.curves[kind] = {"path": None, "id": curve_id}
            else:
                ccfg = cfg.curve_config()
                key = stable_hash([ids, asdict(cfg.curve), asdict(ccfg), cid])
                hist = {}

                def compute(ccfg=ccfg, hist=hist):
                    spec = train_midpoint(
                        CurveSpec.bezier(*endpoints), arch, ds, ccfg, steps=cfg.curve.steps, seed=cfg.curve.seed,
                        original=base, lr=cfg.curve.lr, optimizer=cfg.curve.optimizer, weighting=cfg.curve.weighting,
                    )
                    hist["history"] = list(spec.history)
                    return spec.theta12

                mid, path, curve_id = cache.params("curve", key, compute)
                cache.document("curve", key, lambda hist=hist: hist)
                spec = CurveSpec.bezier(endpoints[0], endpoints[1], mid)
                manifest.curves[kind] = {"path": rel(path), "id": curve_id, "method": ccfg.method}

            stage = f"eval:{kind}"
            key = stable_hash([curve_id, cfg.n_points, refid, rid, cfg.fq_statistic])
            doc, path = cache.document(
                "eval", key,
                lambda spec=spec: _records_to_doc(
                    evaluate_points(arch, sample_curve(spec, cfg.n_points), ds, reference, retrained, cfg.fq_statistic, workers)
                ),
            )
            manifest.metric_tables[kind] = rel(path)

        stage = "report"
        emit_report(manifest, out_dir, cfg, plots=plots)
        manifest.status = "complete"
    except Exception as exc:
        manifest.status = "failed"
        manifest.failed_stage = stage
        manifest.error = f"{type(exc).__name__}: {exc}"
        manifest.wall_clock_s = time.perf_counter() - start
        manifest.save(os.path.join(out_dir, "manifest.json"))
        raise StageFailure(stage, exc, manifest) from exc
    manifest.wall_clock_s = time.perf_counter() - start
    manifest.save(os.path.join(out_dir, "manifest.json"))
    return manifest


def load_run(out_dir) -> tuple[RunManifest, ExperimentConfig]:
    from .config import parse_config

    manifest = RunManifest.load(os.path.join(out_dir, "manifest.json"))
    with open(os.path.join(out_dir, "config.cfg")) as fh:
        cfg = parse_config(fh.read())
    return manifest, cfg


def reevaluate(out_dir, workers: int | None = None) -> float:
    """Recompute every metric from the persisted checkpoints alone.

    Returns the largest absolute difference to the stored metric tables.
    """
    manifest, cfg = load_run(out_dir)
    verify_manifest(manifest, out_dir)

    def ckpt(ref):
        return load_checkpoint(os.path.join(out_dir, ref["path"]))

    ds = cfg.data.build()
    arch = cfg.model.arch(ds)
    e1, e2 = (ckpt(ep) for ep in manifest.endpoints)
    retrained = ckpt(manifest.checkpoints["retrain"])
    reference = ckpt(manifest.checkpoints["reference" if cfg.zrf_reference == "random" else "base"])
    worst = 0.0
    for kind, table in manifest.metric_tables.items():
        spec = CurveSpec.linear(e1, e2) if kind == "linear" else CurveSpec.bezier(e1, e2, ckpt(manifest.curves[kind]))
        fresh = evaluate_points(arch, sample_curve(spec, cfg.n_points), ds, reference, retrained, cfg.fq_statistic, workers)
        stored = records_from_doc(_read_json(os.path.join(out_dir, table)))
        if len(fresh) != len(stored):
            raise ConfigError(f"{kind}: {len(stored)} stored records, {len(fresh)} recomputed")
        for a, b in zip(fresh, stored):
            for name, va in a.as_dict().items():
                vb = getattr(b, name)
                if math.isnan(va) and math.isnan(vb):
                    continue
                worst = max(worst, abs(va - vb))
    return worst


def replicate_configs(cfg: ExperimentConfig, replicates: int) -> list[ExperimentConfig]:
    """Replicate ``r`` shifts both endpoint seeds by ``10 r`` and the curve seed by ``r``."""
    if replicates < 1:
        raise ConfigError(f"replicates must be >= 1, got {replicates}")
    out = []
    for r in range(replicates):
        seeds = (cfg.seeds[0] + 10 * r, cfg.seeds[1] + 10 * r)
        out.append(replace(cfg, seeds=seeds, curve=replace(cfg.curve, seed=cfg.curve.seed + r)))
    return out


def run_replicates(cfg: ExperimentConfig, out_dir, replicates: int, workers: int | None = None) -> dict:
    """Run replicates into ``rep-<r>`` subdirectories and write ``aggregate.json`` (mean and range)."""
    from .report import aggregate_reports

    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    cache_dir = os.path.join(out_dir, "cache")
    runs = []
    for r, rcfg in enumerate(replicate_configs(cfg, replicates)):
        sub = os.path.join(out_dir, f"rep-{r}")
        run_setting(rcfg, sub, cache_dir=cache_dir, workers=workers)
        runs.append(_read_json(os.path.join(sub, "report.json")))
    agg = aggregate_reports(runs)
    _write_json(os.path.join(out_dir, "aggregate.json"), agg)
    return agg
