"""Command-line entry point: ``coarsebif <stage> --run-dir DIR [options]``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import PRESETS, RunConfig, preset
from .stages import (RunDir, StageError, cmd_bifurcation, cmd_generate, cmd_report,
                     cmd_select_features, cmd_train)

log = logging.getLogger("coarsebif")


def _subset(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--run-dir", required=True, help="run directory (created on first use)")
    common.add_argument("--config", help="JSON run configuration, used when the run directory is new")
    common.add_argument("--preset", choices=PRESETS, help="built-in configuration instead of --config")
    common.add_argument("--seed", type=int, help="root seed overriding the configuration's")
    common.add_argument("--resume", action="store_true", help="continue an interrupted or completed stage")
    common.add_argument("-v", "--verbose", action="count", default=0)

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--feature-selection", choices=("on", "off"), default="on")

    p = argparse.ArgumentParser(prog="coarsebif", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="simulate the LBM grid and build the dataset")
    sel = sub.add_parser("select-features", parents=[common], help="score feature subsets per equation")
    sel.add_argument("--subset-u", type=_subset, help="force the u-equation subset, e.g. u,v,u_xx")
    sel.add_argument("--subset-v", type=_subset, help="force the v-equation subset")
    tr = sub.add_parser("train", parents=[common, model], help="fit the learned right-hand sides")
    tr.add_argument("--provider", choices=("rpnn", "fnn"), required=True)
    bif = sub.add_parser("bifurcation", parents=[common, model], help="trace the steady-state branch")
    bif.add_argument("--provider", choices=("fd", "rpnn", "fnn"), required=True)
    sub.add_parser("report", parents=[common], help="write the run summary")
    cfg = sub.add_parser("config", help="print a preset configuration as JSON")
    cfg.add_argument("name", choices=PRESETS)
    return p


def _open_run(args) -> RunDir:
    config = None
    if args.config and args.preset:
        raise StageError("pass either --config or --preset, not both")
    if args.config:
        config = RunConfig.load(args.config)
    elif args.preset:
        config = preset(args.preset)
    if config is not None and args.seed is not None:
        config.seed = args.seed
    run = RunDir.open(args.run_dir, config)
    if config is None and args.seed is not None and args.seed != run.config.seed:
        raise StageError(f"run directory was configured with seed {run.config.seed}, not {args.seed}")
    return run


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "config":
        sys.stdout.write(preset(args.name).to_json())
        return 0
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        run = _open_run(args)
        if args.command == "generate":
            st = cmd_generate(run, args.resume)
            print(f"generate: {st['n_records']} records, {len(st['failed_cells'])} failed cells")
        elif args.command == "select-features":
            st = cmd_select_features(run, args.resume, args.subset_u, args.subset_v)
            print(f"select-features: u {tuple(st['subset_u'])}, v {tuple(st['subset_v'])}")
        elif args.command == "train":
            st = cmd_train(run, args.provider, args.feature_selection == "on", args.resume)
            e = st["errors"]
            print(f"train: test mse u {e['u_test']['mse']:.3e}, v {e['v_test']['mse']:.3e}")
        elif args.command == "bifurcation":
            st = cmd_bifurcation(run, args.provider, args.feature_selection == "on", args.resume)
            print(f"bifurcation: Hopf {st['hopf']}, fold {st['folds']}")
        elif args.command == "report":
            sys.stdout.write(cmd_report(run))
    except (StageError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
