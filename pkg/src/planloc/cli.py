"""Command-line entry point: ``planloc <subcommand> --config exp.toml --out DIR``.

Exit codes: 0 success, 1 usage error (bad arguments, missing or invalid
config), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger("planloc")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _globals(suppress):
    # subcommands repeat the flags with suppressed defaults so either position works
    d = {"default": argparse.SUPPRESS} if suppress else {}
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--config", help="experiment TOML file", **d)
    g.add_argument("--seed", type=int, help="override the config seed (unsigned)", **d)
    g.add_argument("--out", help="output directory (default: $PLANLOC_OUT or ./planloc_out)", **d)
    g.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                   **(d or {"default": "INFO"}))
    return g


def build_parser():
    p = _Parser(prog="planloc", description="Floor-plan-aided indoor localization experiments.",
                parents=[_globals(False)])
    g = _globals(True)
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.add_parser("simulate", parents=[g], help="simulate measurement files for every plan")
    sub.add_parser("train-generator", parents=[g], help="train the measurement generator on the source plan")
    s = sub.add_parser("synthesize", parents=[g], help="synthetic measurements for the target plan")
    s.add_argument("--checkpoint", required=True, help="generator checkpoint")
    sub.add_parser("train-gnn", parents=[g], help="train the graph pre-localizer")
    s = sub.add_parser("train-fpdnn", parents=[g], help="train the range refiner")
    s.add_argument("--gnn", help="GNN checkpoint used to place the crops (default: initial estimates)")
    sub.add_parser("evaluate", parents=[g], help="run the configured protocol and write a report bundle")
    sub.add_parser("report", parents=[g], help="rewrite cdf.csv from errors.csv and print the summary table")
    return p


def _out_dir(args):
    return Path(args.out or os.environ.get("PLANLOC_OUT") or "planloc_out")


def _config(args):
    from planloc.config import ConfigError, load_config, with_seed
    if not args.config:
        raise UsageError(f"{args.command} needs --config")
    try:
        cfg = load_config(args.config)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    except ConfigError as exc:
        raise UsageError(f"{args.config}: {exc}") from exc
    if args.seed is not None:
        if args.seed < 0:
            raise UsageError("--seed must be non-negative")
        cfg = with_seed(cfg, args.seed)
    return cfg


def _cmd_simulate(args, out):
    from planloc import evaluation as ev
    from planloc.floorplan import save_floorplan
    from planloc.simworld import write_world_dataset
    cfg = _config(args)
    specs = list(cfg.plans) or [cfg.source, cfg.target]
    for i, spec in enumerate(specs):
        plan = ev.simulate_plan(spec, cfg.pixels_per_meter, ev._subseed(cfg.seed, 10, i), spec.laps)
        d = out / plan.label
        write_world_dataset(plan.world, d, plan.params)
        save_floorplan(plan.fp, d / "plan.png", d / "plan.json")
        log.info("simulated %s: %d snapshots -> %s", plan.label, len(plan.snapshots), d)


def _cmd_train_generator(args, out):
    from planloc import evaluation as ev
    cfg = _config(args)
    if cfg.source is None:
        raise UsageError("train-generator needs a [source] plan")
    _, sha, n = ev.fit_generator(cfg, out)
    log.info("generator trained on %d samples; sha256 %s", n, sha)


def _cmd_synthesize(args, out):
    from planloc import evaluation as ev
    from planloc.generator import load_generator
    cfg = _config(args)
    if cfg.target is None:
        raise UsageError("synthesize needs a [target] plan")
    gen, sha = load_generator(args.checkpoint)
    plan = ev.synthesize_target(cfg, ev.target_plan(cfg), gen, sha, out)
    log.info("wrote %d synthetic samples to %s", len(plan.snapshots), out / "synthetic")


def _cmd_train_gnn(args, out):
    from planloc import evaluation as ev
    from planloc.config import Stages
    from planloc.gnn import save_gnn
    cfg = _config(args)
    train, _ = ev.prepare_plans(cfg)
    gnn, _ = ev.fit_models(cfg, train, cfg.seed, Stages(gnn=True, fpdnn=False, kf=False))
    log.info("GNN checkpoint sha256 %s", save_gnn(out / "gnn.ckpt", gnn))


def _cmd_train_fpdnn(args, out):
    from planloc import evaluation as ev
    from planloc.config import Stages
    from planloc.fpdnn import save_fpdnn
    from planloc.gnn import load_gnn
    cfg = _config(args)
    train, _ = ev.prepare_plans(cfg)
    gnn = load_gnn(args.gnn) if args.gnn else None
    # the GNN stage is skipped; a loaded model only positions the crops
    _, fpdnn = ev.fit_models(cfg, train, cfg.seed, Stages(gnn=False, fpdnn=True, kf=False), gnn_model=gnn)
    log.info("FPDNN checkpoint sha256 %s", save_fpdnn(out / "fpdnn.ckpt", fpdnn))


def _cmd_evaluate(args, out):
    from planloc.evaluation import format_table, run_experiment
    summary = run_experiment(_config(args), out)
    print(format_table(summary))


def _cmd_report(args, out):
    from planloc.evaluation import cdf_from_errors, format_table
    errs = out / "errors.csv"
    if not errs.is_file():
        raise UsageError(f"no errors.csv in {out}")
    summaries = cdf_from_errors(errs, out / "cdf.csv")
    print(format_table({"methods": {k: v.as_dict() for k, v in summaries.items()}}))
    summary = out / "summary.json"
    if summary.is_file():
        stored = json.loads(summary.read_text())["methods"]
        for k, v in summaries.items():
            if k not in stored or abs(stored[k]["rmse_m"] - v.rmse_m) > 1e-12:
                log.warning("summary.json disagrees with errors.csv for %s", k)


COMMANDS = {
    "simulate": _cmd_simulate,
    "train-generator": _cmd_train_generator,
    "synthesize": _cmd_synthesize,
    "train-gnn": _cmd_train_gnn,
    "train-fpdnn": _cmd_train_fpdnn,
    "evaluate": _cmd_evaluate,
    "report": _cmd_report,
}


def main(argv=None):
    parser = build_parser()
    args = None
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
        out = _out_dir(args)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, out)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:
        log.error("%s failed: %s", getattr(args, "command", "planloc"), exc,
                  exc_info=log.isEnabledFor(logging.DEBUG))
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
