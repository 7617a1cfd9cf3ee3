"""Command-line entry points: gradcheck, run, sweep, ablate, export.

Exit codes: 0 success, 1 invalid configuration, 2 numeric failure, 3 I/O.
The output root defaults to ``$TENSOR_MEMORY_OUT`` (or ``./runs``).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import diagnostics
from .config import ExperimentConfig
from .errors import ConfigError, NumericError, SnapshotFormatError
from .experiment import build_model, load_checkpoint, run_experiment, trace_model
from .sweep import SweepSpec, ablation_configs, run_cells, write_pivots
from .trainer import stream_seeds

OUT_ENV = "TENSOR_MEMORY_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


def default_out() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _load_config(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("--config is required", key="config")
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "trace", False):
        cfg.trace = True
    return cfg


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    report = diagnostics.run_scan_gradcheck(seed=seed)
    for group, err in diagnostics.group_errors(report).items():
        print(f"{group:<12} {err:.3e}")
    worst_name = report.worst_param
    print(f"worst {report.max_rel_error:.3e} at {worst_name} (tol {args.tol:g})")
    if not report.max_rel_error < args.tol:
        print(f"FAIL: gradient of {worst_name} exceeds tolerance", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load_config(args)
    _, row = run_experiment(cfg, args.out or default_out(), log=_log)
    print(json.dumps(row, sort_keys=True))
    return EXIT_NUMERIC if row["status"] == "diverged" else EXIT_OK


def _finish_table(rows, out) -> int:
    write_pivots(rows, out)
    failed = [r for r in rows if r["status"] in ("failed", "diverged")]
    print(f"{len(rows)} rows in {Path(out) / 'results.csv'}, {len(failed)} failed")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_sweep(args) -> int:
    if not args.config:
        raise ConfigError("--config is required", key="config")
    spec = SweepSpec.load(args.config)
    if args.seed is not None:
        spec.seeds = [args.seed]
    out = args.out or default_out()
    return _finish_table(run_cells(spec.expand(), out, jobs=args.jobs, log=_log), out)


def cmd_ablate(args) -> int:
    base = None
    if args.config:
        import yaml
        base = yaml.safe_load(Path(args.config).read_text()) or {}
    seeds = (args.seed,) if args.seed is not None else (0, 1, 2)
    out = args.out or default_out()
    return _finish_table(run_cells(ablation_configs(base, seeds), out, jobs=args.jobs, log=_log),
                         out)


def cmd_export(args) -> int:
    cfg = _load_config(args)
    if cfg.model.variant != "tensor":
        raise ConfigError("trace export needs model.variant: tensor", key="model.variant")
    model = build_model(cfg)
    if args.checkpoint:
        load_checkpoint(model, args.checkpoint)
    out = Path(args.out) if args.out else default_out() / "trace.tmsnap"
    eval_toy = cfg.toy.with_(seed=stream_seeds(cfg.seed)["data/eval"])
    trace_model(model, eval_toy, out, config=cfg.to_dict())
    print(out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tensor-memory", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="YAML/JSON config or sweep document")
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./runs)")
        p.add_argument("--seed", type=int, default=None)
        return p

    g = sub.add_parser("gradcheck", help="finite-difference check of the full memory scan")
    g.add_argument("--config", help="accepted for symmetry; the probe shape is fixed")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--tol", type=float, default=1e-5)
    g.set_defaults(func=cmd_gradcheck)

    r = common(sub.add_parser("run", help="train one variant on one toy"))
    r.add_argument("--trace", action="store_true", help="export a StepTrace snapshot")
    r.set_defaults(func=cmd_run)

    s = common(sub.add_parser("sweep", help="Cartesian sweep into a results table"))
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    a = common(sub.add_parser("ablate", help="ablation grid at W=20, sigma=0.05"))
    a.add_argument("--jobs", type=int, default=1)
    a.set_defaults(func=cmd_ablate)

    e = common(sub.add_parser("export", help="export a trace snapshot from a checkpoint"))
    e.add_argument("--checkpoint", help="best.ckpt written by a run")
    e.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        key = f" [{exc.key}]" if exc.key else ""
        print(f"config error{key}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, SnapshotFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
