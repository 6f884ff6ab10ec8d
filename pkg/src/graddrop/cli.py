"""Command line entry point: ``graddrop {run,grid,compare,export,check}``.

Exit codes: 0 success, 1 failed self-check, 2 config/input error,
3 numerical abort, 4 I/O error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError, InputError, NumericalAbort
from .gradmask import PolicyKind

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4


def _base_config(args):
    from .harness import RunConfig, load_config

    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "epochs", None):
        policy = dataclasses.replace(cfg.policy, T=args.epochs)
        cfg = cfg.replace(epochs=args.epochs, policy=policy)
    if getattr(args, "policy", None):
        cfg = cfg.replace(policy=dataclasses.replace(cfg.policy, kind=PolicyKind(args.policy)))
    if getattr(args, "p", None) is not None:
        cfg = cfg.replace(policy=dataclasses.replace(cfg.policy, p=args.p))
    if getattr(args, "pretrain", False):
        cfg = cfg.replace(pretrain=dataclasses.replace(cfg.pretrain, enabled=True))
    return cfg


def cmd_run(args) -> int:
    from .harness import Seeds, export_timeline, run_experiment

    cfg = _base_config(args)
    if args.seed is not None:
        cfg = cfg.replace(seeds=Seeds(args.seed, args.seed, args.seed))
    out = args.out or cfg.output_dir
    if not out:
        raise ConfigError("no output directory: pass --out or set output_dir in the config")
    record = run_experiment(cfg, out_dir=out)
    export_timeline(record, out, figures=not args.no_figures)
    s = record.summary()
    print(f"{s['policy']}: best {s['best_accuracy']:.4f} (epoch {s['best_epoch']}), final {s['final_accuracy']:.4f} -> {out}")
    return EXIT_OK


def cmd_grid(args) -> int:
    from .harness import RunRecord, export_timeline, grid_configs, load_sweep, run_grid, sweep_overlay

    cfg = _base_config(args)
    policies = [PolicyKind(p).value for p in args.policies.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]
    cells = grid_configs(cfg, policies, seeds, args.out)
    results = run_grid(cells, workers=args.workers)
    aborted = 0
    for run_dir, status in results:
        print(f"{status:9s} {run_dir}")
        if status == "completed":
            export_timeline(RunRecord.load(run_dir), run_dir, figures=not args.no_figures)
        else:
            aborted += 1
    if not args.no_figures:
        sweep_overlay(load_sweep(args.out), Path(args.out) / "accuracy_by_policy.png")
    return EXIT_NUMERIC if aborted else EXIT_OK


def cmd_compare(args) -> int:
    from .harness import compare_sweep, load_sweep, sweep_overlay, write_comparison

    records = load_sweep(args.sweep)
    rows = compare_sweep(records, baseline=args.baseline, metric=args.metric)
    out = Path(args.out or args.sweep)
    path = write_comparison(rows, out)
    sweep_overlay(records, out / "accuracy_by_policy.png")
    print(f"{'policy':22s} {'n':>3s} {'mean diff':>10s} {'t':>10s} {'p':>8s}")
    for r in rows:
        flag = "  (degenerate)" if r["degenerate"] else ""
        print(f"{r['policy']:22s} {r['n']:3d} {r['mean_diff']:10.4f} {r['t']:10.4f} {r['p_value']:8.4f}{flag}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_export(args) -> int:
    from .harness import RunRecord, export_timeline

    record = RunRecord.load(args.run_dir)
    for path in export_timeline(record, args.out or args.run_dir, figures=not args.no_figures):
        print(path)
    return EXIT_OK


def cmd_check(args) -> int:
    from .checks import CHECKS, run_checks

    names = args.only.split(",") if args.only else None
    if names:
        unknown = sorted(set(names) - set(CHECKS))
        if unknown:
            raise ConfigError(f"unknown check(s): {', '.join(unknown)}")
    return EXIT_OK if run_checks(names) else EXIT_CHECK


def cmd_config(args) -> int:
    from .harness import RunConfig

    print(json.dumps(RunConfig().to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graddrop", description="Gradient-dropout fine-tuning experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)
    kinds = [k.value for k in PolicyKind]

    def common(p):
        p.add_argument("--config", help="JSON run config (unknown keys are rejected)")
        p.add_argument("--epochs", type=int, help="override epochs (and policy T)")
        p.add_argument("--p", type=float, help="override the dropout probability")
        p.add_argument("--pretrain", action="store_true", help="enable masked-token pretraining")
        p.add_argument("--no-figures", action="store_true", help="write CSVs only")

    p = sub.add_parser("run", help="run one config")
    common(p)
    p.add_argument("--policy", choices=kinds)
    p.add_argument("--seed", type=int, help="use this value for data, init and mask seeds")
    p.add_argument("--out", help="run directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("grid", help="policy x seed sweep")
    common(p)
    p.add_argument("--policies", default="SFT,GradDrop", help="comma-separated policy kinds")
    p.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated seeds")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True, help="sweep root directory")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("compare", help="paired t-tests of a sweep against a baseline policy")
    p.add_argument("sweep", help="sweep root directory")
    p.add_argument("--baseline", default="SFT", choices=kinds)
    p.add_argument("--metric", default="final_accuracy", choices=["final_accuracy", "best_accuracy"])
    p.add_argument("--out", help="where to write compare.csv / compare.png (default: sweep root)")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("export", help="timeline CSVs and figures for one run")
    p.add_argument("run_dir")
    p.add_argument("--out")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("check", help="gradient and mask invariant self-tests")
    p.add_argument("--only", help="comma-separated subset of checks")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("config", help="print the default run config")
    p.set_defaults(func=cmd_config)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, InputError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
