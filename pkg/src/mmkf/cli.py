"""Command-line interface.

Subcommands: simulate, train-rff, train-koopman, estimate, evaluate, compare.
Exit codes: 0 success, 2 config error, 3 numeric failure (with phase/timestep
context), 4 I/O or data-format error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, DataFormatError, NumericError
from .pipeline import (
    _section,
    compare_models,
    evaluate,
    load_config,
    parse_scenario,
    parse_sensors,
    parse_vehicle,
    read_covariances,
    run_pipeline,
    train_koopman,
    train_rff,
)
from .simulator import export_csv, import_csv, sense, simulate_truth

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _add_common(sub):
    sub.add_argument("--config", required=True, help="path to the JSON run configuration")
    sub.add_argument("--out", default=None, help="output directory (default: config 'out_dir' or 'out')")
    sub.add_argument("--seed", type=int, default=None, help="master seed override")


def _out_dir(args, cfg) -> Path:
    out = args.out if args.out is not None else cfg.get("out_dir", "out")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _master(args, cfg) -> int:
    return int(args.seed) if args.seed is not None else int(cfg.get("seed", 0))


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args, cfg)
    master = _master(args, cfg)
    scenario = parse_scenario(_section(cfg, "scenario", required=True), master)
    sensors = parse_sensors(_section(cfg, "sensors"), master)
    traj = sense(simulate_truth(scenario, parse_vehicle(_section(cfg, "vehicle"))), sensors)
    path = out / "truth.csv"
    export_csv(traj, path)
    print(f"wrote {path} ({len(traj)} steps, n={traj.n} q={traj.q} p={traj.p})")
    return EXIT_OK


def cmd_train_rff(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args, cfg)
    path = train_rff(cfg, out, _master(args, cfg), parse_vehicle(_section(cfg, "vehicle")))
    print(f"wrote {path}")
    return EXIT_OK


def cmd_train_koopman(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args, cfg)
    path = train_koopman(cfg, out, _master(args, cfg), parse_vehicle(_section(cfg, "vehicle")))
    print(f"wrote {path}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args, cfg)
    result = run_pipeline(cfg, out, master_seed=args.seed)
    for line in result.report.lines():
        if not line.startswith("#"):
            print(line)
    print(f"wrote {result.files['report']}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    truth = import_csv(args.truth)
    estimate = import_csv(args.estimate)
    if len(truth) != len(estimate):
        raise DataFormatError(
            f"length mismatch: truth has {len(truth)} steps, estimate has {len(estimate)}"
        )
    if args.covariances is not None:
        _, covs = read_covariances(args.covariances)
        if covs.shape[0] != len(truth):
            raise DataFormatError(
                f"length mismatch: covariances have {covs.shape[0]} steps, truth has {len(truth)}"
            )
    else:
        # Without a covariance trace NEES is not defined; identity keeps the
        # report shape stable and is flagged below.
        covs = np.broadcast_to(np.eye(truth.n), (len(truth), truth.n, truth.n)).copy()
    dt = truth.dt if len(truth) >= 2 else 0.0
    report = evaluate(truth.states, estimate.states, covs, dt=dt)
    for line in report.lines():
        print(line)
    if args.covariances is None:
        print("# nees_mean computed against identity covariances (no --covariances given)")
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text("\n".join(report.lines()) + "\n")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args, cfg)
    roster = args.models.split(",") if args.models else None
    table, _ = compare_models(cfg, out, roster=roster, master_seed=args.seed)
    print(table, end="")
    print(f"wrote {out / 'compare_report.txt'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmkf",
        description="Consensus multi-model Kalman filtering toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate one scenario and write truth.csv")
    _add_common(s)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train-rff", help="train the random-feature predictor from the config's training scenarios")
    _add_common(s)
    s.set_defaults(func=cmd_train_rff)

    s = sub.add_parser("train-koopman", help="train the lifted bilinear model from the config's training scenarios")
    _add_common(s)
    s.set_defaults(func=cmd_train_koopman)

    s = sub.add_parser("estimate", help="run the full pipeline and write report + artifacts")
    _add_common(s)
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("evaluate", help="evaluate an estimate CSV against a truth CSV")
    s.add_argument("--truth", required=True, help="truth trajectory CSV")
    s.add_argument("--estimate", required=True, help="estimate trajectory CSV")
    s.add_argument("--covariances", default=None, help="covariance trace CSV (enables NEES)")
    s.add_argument("--out", default=None, help="optional directory for report.txt")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("compare", help="run single-model baselines and the fused filter side by side")
    _add_common(s)
    s.add_argument("--models", default=None, help="comma-separated roster filter")
    s.set_defaults(func=cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataFormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    raise SystemExit(main())
