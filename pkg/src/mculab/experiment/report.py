"""CSV and JSON reports of a completed run.

Reports contain no timestamps or durations, so rerunning an unchanged
configuration reproduces them byte for byte. Floats are written with
``repr`` (shortest round-tripping decimal, at most 17 significant digits).
"""

from __future__ import annotations

import csv
import io
import json
import math
import os

from .. import __version__
from ..errors import ConfigError
from ..mcu_eval import METRIC_FIELDS, barrier_profile, mc_barrier_standard
from .config import ExperimentConfig
from .pipeline import RunManifest, _clean, _read_json, _write_json, records_from_doc

CSV_HEADER = ("t", "kind", *METRIC_FIELDS)


def _num(x) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def csv_text(tables: dict) -> str:
    """``tables`` maps curve kind to its MetricRecords; one row per (kind, t)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for kind, records in tables.items():
        for r in records:
            writer.writerow([_num(r.t), kind, *(_num(getattr(r, f)) for f in METRIC_FIELDS)])
    return buf.getvalue()


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_HEADER:
            raise ConfigError(f"{path}: unexpected CSV header {header}")
        rows = []
        for row in reader:
            rec = dict(zip(header, row))
            rows.append({k: (v if k == "kind" else float(v)) for k, v in rec.items()})
        return rows


def curve_summary(records, tau: float, fq_threshold: float) -> dict:
    report = barrier_profile(records, tau=tau)
    fq = [r.forget_quality for r in records if not math.isnan(r.forget_quality)]
    return {
        "barrier": report.as_dict(),
        "mc_barrier_standard": mc_barrier_standard(records, tau=tau),
        "forget_quality_min": min(fq) if fq else None,
        "forget_quality_pass": bool(fq) and min(fq) >= fq_threshold,
        "n_points": len(records),
    }


def emit_report(manifest: RunManifest, out_dir, cfg: ExperimentConfig, plots: bool = True) -> tuple[str, str]:
    """Write ``report.csv``, ``report.json`` and one barrier JSON per curve kind."""
    out_dir = os.fspath(out_dir)
    tables = {
        kind: records_from_doc(_read_json(os.path.join(out_dir, path)))
        for kind, path in manifest.metric_tables.items()
    }
    csv_path = os.path.join(out_dir, "report.csv")
    try:
        with open(csv_path, "w", newline="") as fh:
            fh.write(csv_text(tables))
    except OSError as exc:
        raise OSError(f"cannot write {csv_path}: {exc}") from exc
    curves = {}
    for kind, records in tables.items():
        summary = curve_summary(records, cfg.tau, cfg.fq_threshold)
        path = os.path.join(out_dir, f"barrier-{kind}.json")
        _write_json(path, summary["barrier"])
        manifest.barrier_reports[kind] = os.path.relpath(path, out_dir)
        curves[kind] = summary
    doc = {
        "version": __version__,
        "config_hash": manifest.config_hash,
        "config": cfg.as_dict(),
        "protocol": {"n_points": cfg.n_points, "tau": cfg.tau, "fq_threshold": cfg.fq_threshold,
                     "zrf_reference": cfg.zrf_reference, "fq_statistic": cfg.fq_statistic},
        "provenance": {
            "checkpoints": {k: v["id"] for k, v in manifest.checkpoints.items()},
            "endpoints": [{k: v for k, v in ep.items() if k != "path"} for ep in manifest.endpoints],
            "curves": {k: v["id"] for k, v in manifest.curves.items()},
        },
        "curves": curves,
    }
    json_path = os.path.join(out_dir, "report.json")
    _write_json(json_path, doc)
    manifest.report_csv = os.path.relpath(csv_path, out_dir)
    manifest.report_json = os.path.relpath(json_path, out_dir)
    if plots:
        from .plotting import emit_plot

        os.makedirs(os.path.join(out_dir, "plots"), exist_ok=True)
        for metric in ("loss_retain", "loss_forget", "acc_forget", "forget_quality"):
            emit_plot(tables, metric, os.path.join(out_dir, "plots", f"{metric}.svg"), tau=cfg.tau)
    return csv_path, json_path


def aggregate_reports(reports: list[dict]) -> dict:
    """Mean and range of the barrier quantities across replicate reports."""
    out = {"replicates": len(reports), "curves": {}}
    kinds = sorted({k for r in reports for k in r["curves"]})
    for kind in kinds:
        rows = [r["curves"][kind] for r in reports if kind in r["curves"]]
        stats = {}
        for name in ("retain_barrier_height", "forget_cliff_depth"):
            vals = [row["barrier"][name] for row in rows]
            stats[name] = {"mean": sum(vals) / len(vals), "min": min(vals), "max": max(vals)}
        stats["mcu_holds"] = sum(bool(row["barrier"]["mcu_holds"]) for row in rows)
        out["curves"][kind] = stats
    return _clean(out)


def load_report(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
