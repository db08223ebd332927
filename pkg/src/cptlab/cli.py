"""``cptlab`` command line.

Exit codes: 0 success, 1 usage error, 2 configuration error, 3 runtime failure.
Outputs go under ``$CPTLAB_OUT`` (default ``./runs``) unless ``--out`` is given.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from cptlab.harness.checkpoint import CheckpointError, load_checkpoint
from cptlab.harness.config import (ConfigError, TrainConfig, apply_overrides, load_config, precision_preset,
                                   save_config)
from cptlab.harness.data import DataError, ingest_dataset
from cptlab.prt import PRTConfig, PRTConfigError, resolve_bounds
from cptlab.schedule import PATTERNS, TRIANGULAR_PHASES, PrecisionSchedule

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("cptlab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def out_root() -> Path:
    return Path(os.environ.get("CPTLAB_OUT", "runs"))


def preset_names():
    return sorted(p.name[:-5] for p in resources.files("cptlab").joinpath("presets").iterdir()
                  if p.name.endswith(".yaml"))


def resolve_config(spec, overrides) -> TrainConfig:
    """Load ``spec`` (a file path or a bundled preset name) and merge dotted overrides."""
    if spec is None:
        cfg = TrainConfig()
    elif Path(spec).exists():
        cfg = load_config(spec)
    else:
        res = resources.files("cptlab").joinpath("presets", f"{spec}.yaml")
        if not res.is_file():
            raise ConfigError(f"{spec!r} is neither a config file nor a preset ({', '.join(preset_names())})")
        with resources.as_file(res) as p:
            cfg = load_config(p)
    return apply_overrides(cfg, overrides).validate()


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _bounds_list(text):
    out = []
    for item in text.split(","):
        try:
            lo, hi = item.split("-")
            out.append((int(lo), int(hi)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bounds look like 3-8,4-8; got {item!r}")
    return out


def _add_config_args(p):
    p.add_argument("--config", help="config file (YAML/JSON) or bundled preset name")
    p.add_argument("--out", help="output directory (default $CPTLAB_OUT/<command>/<name>)")
    p.add_argument("overrides", nargs="*", metavar="key=value", help="dotted config overrides")


def build_parser():
    ap = _Parser(prog="cptlab", description="Cyclic precision training experiments.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one configuration")
    _add_config_args(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--dry-run", action="store_true", help="print the epoch plan and exit")

    p = sub.add_parser("prt", help="precision range test, optionally followed by training")
    _add_config_args(p)
    p.add_argument("--start-bits", type=int, default=2)
    p.add_argument("--max-bits", type=int, default=8)
    p.add_argument("--epochs-per-probe", type=int, default=1)
    p.add_argument("--window", type=int, default=50)
    p.add_argument("--threshold", type=float, default=1.0)
    p.add_argument("--chain", action="store_true", help="train with the identified bounds afterwards")
    p.add_argument("--static-bits", type=int, help="upper bound (default: precision.b_max)")

    p = sub.add_parser("schedule", help="print the epoch -> bits table as CSV")
    p.add_argument("--b-min", type=int, required=True)
    p.add_argument("--b-max", type=int, required=True)
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--cycles", type=int, default=32)
    p.add_argument("--pattern", choices=PATTERNS, default="cosine")
    p.add_argument("--phase", choices=TRIANGULAR_PHASES, default="rising")

    p = sub.add_parser("cost", help="closed-form BitOPs comparison of two precision settings")
    p.add_argument("--a", required=True, help="precision preset, e.g. fw3-8_bw8")
    p.add_argument("--b", required=True, help="baseline preset, e.g. fw8_bw8")
    p.add_argument("--config", help="config file or preset supplying model, data and epochs")
    p.add_argument("--cycles", type=int, help="cycle count for cyclic presets (default precision.num_cycles)")
    p.add_argument("overrides", nargs="*", metavar="key=value")

    p = sub.add_parser("landscape", help="loss grid around a checkpoint")
    p.add_argument("checkpoint", help="checkpoint file or run directory containing last.ckpt")
    p.add_argument("--config", help="config (default: resolved_config.json next to the checkpoint)")
    p.add_argument("--out", help="CSV path")
    p.add_argument("--points", type=int, default=21)
    p.add_argument("--half-width", type=float, default=1.0)
    p.add_argument("--bits", type=int, default=32, help="forward bits during evaluation")
    p.add_argument("--samples", type=int, default=1000, help="training samples used for the loss")
    p.add_argument("--seed", type=int, default=0, help="direction seed")
    p.add_argument("--include-biases", action="store_true")

    p = sub.add_parser("sweep", help="grid over pattern x cycles x bounds")
    _add_config_args(p)
    p.add_argument("--patterns", default="cosine", help="comma-separated")
    p.add_argument("--cycles", type=_int_list, default=[8])
    p.add_argument("--bounds", type=_bounds_list, default=[(3, 8)])
    p.add_argument("--seeds", type=_int_list, default=[0])
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("report", help="aggregate run directories into a comparison table")
    p.add_argument("roots", nargs="+", help="run directories or parents of run directories")
    p.add_argument("--out", help="CSV path (default stdout)")
    p.add_argument("--group-by", default="name", help="comma-separated keys, empty for one row per run")
    return ap


# ---------------------------------------------------------------- commands


def _out_dir(args, command, cfg):
    return Path(args.out) if args.out else out_root() / command / cfg.name


def cmd_train(args):
    from cptlab.harness.train import plan, train

    cfg = resolve_config(args.config, args.overrides)
    if args.dry_run:
        print("epoch,fw_bits,bw_bits,lr")
        for t, fw, bw, lr in plan(cfg):
            print(f"{t},{fw},{bw},{lr!r}")
        return EXIT_OK
    out = _out_dir(args, "train", cfg)
    res = train(cfg, out_dir=out, resume=args.resume)
    print(json.dumps({"out": str(out), "test_acc": res.final_test_acc, "total_bitops": res.ledger.total}))
    return EXIT_OK


def cmd_prt(args):
    from cptlab.harness.train import Trainer, TrainingAccuracySource, train
    from cptlab.prt import run_prt

    cfg = resolve_config(args.config, args.overrides)
    pcfg = PRTConfig(args.start_bits, args.max_bits, args.epochs_per_probe, args.window, args.threshold)
    out = _out_dir(args, "prt", cfg)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "resolved_config.json")
    data = ingest_dataset(cfg.data, np.dtype(cfg.dtype))
    trainer = Trainer(cfg, data)
    result = run_prt(TrainingAccuracySource(trainer), pcfg, cfg.epochs // cfg.precision.num_cycles)
    (out / "prt.json").write_text(json.dumps(result.to_dict(), indent=2) + "\n")
    (out / "prt_trace.csv").write_text(result.trace_csv())
    summary = {"out": str(out), **{k: v for k, v in result.to_dict().items() if k != "trace"}}
    if args.chain:
        b_max = args.static_bits if args.static_bits is not None else cfg.precision.b_max
        b_min, b_max = resolve_bounds(result, b_max)
        chained = replace(cfg, precision=replace(cfg.precision, b_min=b_min, b_max=b_max,
                                                 pattern=cfg.precision.pattern if cfg.precision.pattern != "static"
                                                 else "cosine")).validate()
        res = train(chained, data=data, out_dir=out / "train", initial_ledger=trainer.ledger)
        summary.update(b_min=b_min, b_max=b_max, test_acc=res.final_test_acc, total_bitops=res.ledger.total)
    print(json.dumps(summary))
    return EXIT_OK


def cmd_schedule(args):
    try:
        s = PrecisionSchedule(args.b_min, args.b_max, args.epochs, args.cycles, args.pattern, args.phase)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    lines = ["epoch,bits"] + [f"{t},{b}" for t, b in s.table()]
    print("\n".join(lines))
    return EXIT_OK


def cmd_cost(args):
    from cptlab.harness.protocols import compare_costs, preset_config

    base = resolve_config(args.config, args.overrides)
    a = preset_config(base, args.a, args.cycles)
    b = preset_config(base, args.b, args.cycles)
    report = compare_costs(a, b)
    report.update(a=args.a, b=args.b, epochs=base.epochs, model=base.model)
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_landscape(args):
    from cptlab.harness.landscape import loss_landscape, write_landscape_csv
    from cptlab.harness.train import Trainer

    path = Path(args.checkpoint)
    ckpt_path = path / "last.ckpt" if path.is_dir() else path
    if args.config:
        cfg = resolve_config(args.config, [])
    else:
        cfg_path = ckpt_path.parent / "resolved_config.json"
        if not cfg_path.exists():
            raise ConfigError(f"no config found at {cfg_path}; pass --config")
        cfg = resolve_config(str(cfg_path), [])
    ckpt = load_checkpoint(ckpt_path)
    trainer = Trainer(cfg)
    trainer.restore(ckpt)
    n = min(args.samples, len(trainer.data))
    q = cfg.quantizers
    a, b, grid, _ = loss_landscape(trainer.model, trainer.data.x_train[:n], trainer.data.y_train[:n],
                                   args.half_width, args.points, np.random.default_rng(args.seed),
                                   args.bits, args.include_biases, weight_kind=q.weight,
                                   act_kind=q.activation)
    out = Path(args.out) if args.out else ckpt_path.parent / "landscape.csv"
    write_landscape_csv(out, a, b, grid)
    print(json.dumps({"out": str(out), "center_loss": float(grid[args.points // 2, args.points // 2])}))
    return EXIT_OK


def cmd_sweep(args):
    from cptlab.harness.protocols import run_sweep, summarize, to_csv

    cfg = resolve_config(args.config, args.overrides)
    out = _out_dir(args, "sweep", cfg)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "resolved_config.json")
    patterns = [p for p in args.patterns.split(",") if p]
    rows = run_sweep(cfg, patterns, args.cycles, args.bounds, args.seeds, out_root=out, workers=args.workers)
    (out / "trials.csv").write_text(to_csv(rows))
    table = summarize(rows, ["pattern", "num_cycles", "b_min", "b_max"])
    (out / "summary.csv").write_text(to_csv(table))
    sys.stdout.write(to_csv(table))
    return EXIT_OK


def cmd_report(args):
    from cptlab.harness.protocols import find_runs, read_run, summarize, to_csv

    runs = []
    for root in args.roots:
        found = find_runs(root)
        if not found:
            raise ConfigError(f"no metrics.jsonl found under {root}")
        runs.extend(read_run(r) for r in found)
    keys = [k for k in args.group_by.split(",") if k]
    rows = summarize(runs, keys) if keys else runs
    text = to_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "prt": cmd_prt, "schedule": cmd_schedule, "cost": cmd_cost,
            "landscape": cmd_landscape, "sweep": cmd_sweep, "report": cmd_report}


def main(argv=None) -> int:
    from cptlab.harness.train import TrainingDiverged

    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, PRTConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training diverged: {exc} (last good checkpoint: {exc.last_good})", file=sys.stderr)
        return EXIT_RUNTIME
    except (DataError, CheckpointError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
