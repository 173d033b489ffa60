"""Command-line entry point: ``mculab <subcommand> [options]``.

Exit status is 0 on success, 2 for configuration errors and 3 for numeric
failures (NaN, divergence, unreachable accuracy floor).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from ..curves import CurveSpec, sample_curve, train_midpoint
from ..errors import ConfigError, MculabError, StageFailure
from ..mcu_eval import METRIC_FIELDS, barrier_profile, evaluate_points
from ..training import accuracy
from ..unlearn import METHODS, dumb_params, retrain_oracle, unlearn
from .checkpoint import load_checkpoint, save_checkpoint
from .config import SETTINGS, load_config
from .pipeline import RunManifest, load_run, reevaluate, run_replicates, run_setting, train_base
from .plotting import emit_plot
from .report import csv_text, emit_report


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="config file layered over the packaged defaults")
    p.add_argument("--seed", type=int, help="seed for this command's stochastic stage")
    p.add_argument("--out", help="output path (file or directory, per command)")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value; repeatable")


def _overrides(args, extra=None) -> dict:
    out = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    out.update({k: v for k, v in (extra or {}).items() if v is not None})
    return out


def _config(args, extra=None):
    return load_config(args.config, _overrides(args, extra))


def _dataset(cfg):
    ds = cfg.data.build()
    return ds, cfg.model.arch(ds)


def _base(args, cfg, ds, arch):
    if getattr(args, "base", None):
        return load_checkpoint(args.base)
    return train_base(arch, ds, cfg.base.schedule(), cfg.base.seed)[0]


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_train_base(args) -> int:
    cfg = _config(args, {"base.seed": args.seed})
    ds, arch = _dataset(cfg)
    out = args.out or "base.mcu"
    params, curve = train_base(arch, ds, cfg.base.schedule(), cfg.base.seed, out)
    _emit({"checkpoint": out, "parameters": len(params), "train_accuracy": curve[-1][1] if curve else None,
           "test_accuracy": accuracy(arch, params, *ds.subset(ds.test_idx)) if len(ds.test_idx) else None})
    return 0


def cmd_unlearn(args) -> int:
    cfg = _config(args)
    ds, arch = _dataset(cfg)
    base = _base(args, cfg, ds, arch)
    ucfg = cfg.unlearn.config(args.method, args.seed if args.seed is not None else cfg.seeds[0],
                              curriculum=args.curriculum, second_order=args.second_order)
    res = unlearn(arch.build(base), ds, ucfg)
    out = args.out or f"{args.method}.mcu"
    save_checkpoint(res.params, out)
    _emit({"checkpoint": out, "method": ucfg.method, "stopped_early": res.stopped_early,
           "forget_accuracy": accuracy(arch, res.params, *ds.subset(ds.forget_idx)),
           "retain_accuracy": accuracy(arch, res.params, *ds.subset(ds.retain_idx))})
    return 0


def cmd_curve(args) -> int:
    cfg = _config(args)
    ds, arch = _dataset(cfg)
    base = _base(args, cfg, ds, arch)
    theta1, theta2 = load_checkpoint(args.theta1), load_checkpoint(args.theta2)
    ucfg = cfg.unlearn.config(args.method or cfg.methods[0], cfg.seeds[0])
    seed = args.seed if args.seed is not None else cfg.curve.seed
    spec = train_midpoint(CurveSpec.bezier(theta1, theta2), arch, ds, ucfg, steps=args.steps or cfg.curve.steps,
                          seed=seed, original=base, lr=cfg.curve.lr, optimizer=cfg.curve.optimizer,
                          weighting=cfg.curve.weighting)
    out = args.out or "midpoint.mcu"
    save_checkpoint(spec.theta12, out)
    h = spec.history
    _emit({"checkpoint": out, "steps": len(h), "objective_first100": sum(h[:100]) / max(1, len(h[:100])),
           "objective_last100": sum(h[-100:]) / max(1, len(h[-100:]))})
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args, {"protocol.n_points": args.n_points})
    ds, arch = _dataset(cfg)
    theta1, theta2 = load_checkpoint(args.theta1), load_checkpoint(args.theta2)
    spec = CurveSpec.bezier(theta1, theta2, load_checkpoint(args.midpoint)) if args.midpoint else CurveSpec.linear(theta1, theta2)
    retrained = load_checkpoint(args.retrained) if args.retrained else retrain_oracle(arch, ds, cfg.retrain_seed, cfg.base.schedule())
    ref_seed = args.seed if args.seed is not None else cfg.reference_seed
    reference = dumb_params(arch, ref_seed)
    records = evaluate_points(arch, sample_curve(spec, cfg.n_points), ds, reference, retrained, cfg.fq_statistic)
    report = barrier_profile(records, tau=cfg.tau)
    out = args.out or "eval"
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "report.csv"), "w", newline="") as fh:
        fh.write(csv_text({spec.kind: records}))
    with open(os.path.join(out, "barrier.json"), "w") as fh:
        json.dump(report.as_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    _emit(report.as_dict())
    return 0


def cmd_run(args) -> int:
    extra = {
        "experiment.setting": args.setting,
        "experiment.methods": ",".join(args.methods) if args.methods else None,
        "experiment.seeds": f"{args.seed},{args.seed + 1}" if args.seed is not None else None,
        "protocol.n_points": args.n_points,
        "protocol.tau": args.tau,
    }
    cfg = _config(args, extra)
    out = args.out or "run"
    if args.replicates > 1:
        _emit(run_replicates(cfg, out, args.replicates, workers=args.workers))
        return 0
    manifest = run_setting(cfg, out, cache_dir=args.cache, workers=args.workers)
    summary = json.load(open(os.path.join(out, manifest.report_json)))["curves"]
    _emit({kind: s["barrier"] for kind, s in summary.items()})
    return 0


def cmd_report(args) -> int:
    run = args.run or args.out or "run"
    manifest, cfg = load_run(run)
    if manifest.status != "complete":
        raise ConfigError(f"{run}: run is {manifest.status} (failed stage: {manifest.failed_stage})")
    emit_report(manifest, run, cfg, plots=False)
    manifest.save(os.path.join(run, "manifest.json"))
    if args.verify:
        worst = reevaluate(run)
        print(f"re-evaluation max abs difference: {worst:.3e}")
        if worst > 1e-6:
            return 3
    print(os.path.join(run, manifest.report_csv))
    print(os.path.join(run, manifest.report_json))
    return 0


def cmd_plot(args) -> int:
    from .pipeline import _read_json, records_from_doc

    run = args.run or "run"
    manifest = RunManifest.load(os.path.join(run, "manifest.json"))
    _, cfg = load_run(run)
    tables = {k: records_from_doc(_read_json(os.path.join(run, p))) for k, p in manifest.metric_tables.items()}
    out = args.out or os.path.join(run, "plots", f"{args.metric}.svg")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    emit_plot(tables, args.metric, out, tau=cfg.tau)
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mculab", description="Mode connectivity in unlearning, at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-base", help="train the original model and write its checkpoint")
    _common(p)
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("unlearn", help="unlearn the forget set from a base checkpoint")
    _common(p)
    p.add_argument("--base", help="base checkpoint (trained from the config when omitted)")
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--curriculum", action="store_true", help="order forget batches by original-model loss")
    p.add_argument("--second-order", action="store_true", help="use the clipped diagonal-Newton optimizer")
    p.set_defaults(func=cmd_unlearn)

    p = sub.add_parser("curve", help="train a Bezier midpoint between two endpoint checkpoints")
    _common(p)
    p.add_argument("--theta1", required=True)
    p.add_argument("--theta2", required=True)
    p.add_argument("--base", help="original model checkpoint")
    p.add_argument("--method", choices=METHODS, help="objective for the midpoint (default: first configured method)")
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_curve)

    p = sub.add_parser("eval", help="evaluate a linear or Bezier curve and report its barriers")
    _common(p)
    p.add_argument("--theta1", required=True)
    p.add_argument("--theta2", required=True)
    p.add_argument("--midpoint", help="Bezier midpoint checkpoint (linear curve when omitted)")
    p.add_argument("--retrained", help="retrain-oracle checkpoint (trained when omitted)")
    p.add_argument("--n-points", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run", help="run one experimental setting end to end")
    _common(p)
    p.add_argument("--setting", choices=SETTINGS)
    p.add_argument("--methods", nargs="+", choices=METHODS)
    p.add_argument("--n-points", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--replicates", type=int, default=1)
    p.add_argument("--workers", type=int, help="parallel curve-evaluation workers")
    p.add_argument("--cache", help="stage cache directory (default: <out>/cache)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="rewrite the CSV/JSON reports of a finished run")
    _common(p)
    p.add_argument("--run", help="run directory")
    p.add_argument("--verify", action="store_true", help="recompute all metrics from the checkpoints")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("plot", help="render one metric of a finished run to SVG")
    _common(p)
    p.add_argument("--run", help="run directory")
    p.add_argument("--metric", required=True, choices=METRIC_FIELDS)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except StageFailure as exc:
        print(f"mculab: {exc}", file=sys.stderr)
        return exc.exit_code if exc.exit_code in (2, 3) else 1
    except MculabError as exc:
        print(f"mculab: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"mculab: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
