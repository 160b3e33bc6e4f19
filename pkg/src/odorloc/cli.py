"""Command-line entry point: ``odorloc <command> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import bayes, harness, rl_agent
from .datagen import build_dataset, save_dataset
from .grid_pde import ConfigError, InstabilityError, load_config, make_config

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_PARTIAL = 0, 2, 3, 4
log = logging.getLogger("odorloc")


def _common(with_defaults: bool) -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand; only the top
    # level carries defaults so a subcommand never overwrites an earlier value
    def dflt(v):
        return v if with_defaults else argparse.SUPPRESS
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, default=dflt(None), help="key=value simulation config file")
    p.add_argument("--seed", type=int, default=dflt(0))
    p.add_argument("--out", type=Path, default=dflt(Path("out")))
    p.add_argument("--format", choices=("csv", "json", "md"), default=dflt("md"))
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common(False)
    parser = argparse.ArgumentParser(prog="odorloc", parents=[_common(True)],
                                     description="Odor source localization experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="run the solver and write field snapshots")
    p.add_argument("--times", type=float, nargs="*", default=list(harness.FIGURE_TIMES))

    p = sub.add_parser("gen-data", parents=[common], help="write a training dataset CSV")
    p.add_argument("--n", type=int, default=4000)

    p = sub.add_parser("localize", parents=[common], help="estimate the source with one method")
    p.add_argument("method", choices=("map", "kf", "mlp", "pinn", "rl"))
    p.add_argument("--epochs", type=int, help="training epochs/episodes for learned methods")

    p = sub.add_parser("bench", parents=[common], help="run all methods and write a report")
    p.add_argument("--reps", type=int, default=5, help="noise seeds; the report shows medians")
    p.add_argument("--methods", nargs="*", default=["map", "kf", "pinn", "mlp", "rl"])

    sub.add_parser("figures", parents=[common], help="snapshots, posterior map and overlays")
    return parser


def _scenario_config(args):
    """The reference scenario config, or the file given with ``--config``."""
    return load_config(args.config) if args.config else None


def _cmd_simulate(args) -> int:
    cfg = load_config(args.config) if args.config else make_config()
    written = harness.emit_figures(args.out, cfg, snapshot_times=args.times)
    print("\n".join(str(p) for p in written))
    return EXIT_OK


def _cmd_gen_data(args) -> int:
    cfg = _scenario_config(args)
    ds = build_dataset(args.n, seed=args.seed, cfg=cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    path = save_dataset(ds, args.out / "dataset.csv")
    print(path)
    return EXIT_OK


def _localize_one(method: str, args):
    method = method.upper()
    overrides = {}
    if args.epochs:
        overrides = {"PINN": {"epochs": args.epochs}, "MLP": {"epochs": args.epochs},
                     "RL": {"episodes": args.epochs}}.get(method, {})
        overrides = {method: overrides} if overrides else {}
    if method == "RL":
        sc = harness.rl_scenario(args.seed, _scenario_config(args), **overrides)
    else:
        sc = harness.reference_scenario(args.seed, _scenario_config(args), methods=(method,), **overrides)
    return harness.run_scenario(sc, 1)


def _cmd_localize(args) -> int:
    report = _localize_one(args.method, args)
    m = args.method.upper()
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / f"estimate_{args.method}.json"
    if report.failures.get(m):
        path.write_text(json.dumps({"method": m, "failures": report.failures[m]}, indent=2))
        print(report.failures[m][0], file=sys.stderr)
        return EXIT_NUMERIC
    est = report.estimates[m][0]
    path.write_text(json.dumps(est.to_dict(), indent=2))
    print(json.dumps(est.to_dict(), indent=2))
    return EXIT_OK


def _cmd_bench(args) -> int:
    methods = [m.upper() for m in args.methods]
    cfg = _scenario_config(args)
    report = harness.BenchmarkReport("reference", environment=harness.fingerprint())
    main = [m for m in methods if m != "RL"]
    if main:
        report = harness.run_scenario(harness.reference_scenario(args.seed, cfg, methods=main), args.reps)
    if "RL" in methods:
        report = report.merge(harness.run_scenario(harness.rl_scenario(args.seed, cfg), args.reps))
    args.out.mkdir(parents=True, exist_ok=True)
    path = harness.export_report(report, args.out / f"report.{args.format}", args.format)
    print(path.read_text())
    return EXIT_PARTIAL if report.partial else EXIT_OK


def _cmd_figures(args) -> int:
    cfg = load_config(args.config) if args.config else make_config()
    sc = harness.reference_scenario(args.seed, _scenario_config(args), methods=("MAP", "KF"))
    cache: dict = {}
    report = harness.run_scenario(sc, 1, cache)
    rl = harness.run_scenario(harness.rl_scenario(args.seed, _scenario_config(args)), 1)
    ests = [e for m in report.methods for e in report.estimates.get(m, [])]
    written = harness.emit_figures(args.out, cfg, posterior=cache["posteriors"][0],
                                   estimates=ests, grid_cfg=sc.config)
    rl_dir = Path(args.out) / "rl"
    written += harness.emit_figures(rl_dir, None, estimates=rl.estimates.get("RL", []),
                                    grid_cfg=sc.config)
    bayes.write_trajectory_csv(cache["trajectories"][0], Path(args.out) / "kf_trajectory.csv")
    print("\n".join(str(p) for p in written))
    return EXIT_PARTIAL if report.partial or rl.partial else EXIT_OK


COMMANDS = {"simulate": _cmd_simulate, "gen-data": _cmd_gen_data, "localize": _cmd_localize,
            "bench": _cmd_bench, "figures": _cmd_figures}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InstabilityError, FloatingPointError, rl_agent.QDivergence) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
