"""``grjointnet`` command line: format utilities, training, inference, evaluation."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from . import gradcheck as gc
from .config import RunConfig, from_pairs, read_config_file
from .core import ScalarGrid
from .data import synth_dataset
from .errors import ConfigError, DataError, NumericError, ShapeError
from .gridding import gridding, gridding_reverse
from .harness import evaluate_checkpoint, infer, train
from .io import read_cloud, read_grid, write_cloud, write_grid
from .losses import chamfer_terms

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common_flags() -> argparse.ArgumentParser:
    # SUPPRESS keeps a flag given before the subcommand from being reset after it.
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=argparse.SUPPRESS, help="key=value config file")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    p.add_argument("--precision", choices=("f32", "f64"), default=argparse.SUPPRESS)
    p.add_argument("--frozen-norm", action="store_true", default=argparse.SUPPRESS)
    p.add_argument("--cross-feed", action="store_true", default=argparse.SUPPRESS)
    p.add_argument("--set", action="append", default=argparse.SUPPRESS, metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = _Parser(prog="grjointnet", parents=[common],
                     description="Joint point cloud completion and part segmentation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("grid", parents=[common], help="point cloud -> GRJG grid")
    p.add_argument("cloud")
    p.add_argument("output")
    p.add_argument("--resolution", type=int, default=None)

    p = sub.add_parser("ungrid", parents=[common], help="GRJG grid -> point cloud")
    p.add_argument("grid")
    p.add_argument("output")
    p.add_argument("--threshold", type=float, default=1e-6)

    p = sub.add_parser("chamfer", parents=[common], help="Chamfer distance of two clouds")
    p.add_argument("first")
    p.add_argument("second")
    p.add_argument("--method", choices=("auto", "brute", "hash"), default="auto")

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset directory")
    p.add_argument("output")
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--kinds", default=None, help="comma list of barbell, table, plane-toy")
    p.add_argument("--points-per-part", type=int, default=None)
    p.add_argument("--no-partials", action="store_true",
                   help="omit .partial.xyz files so the loader degrades on the fly")

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--dataset", default=None)
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("infer", parents=[common], help="complete and segment one cloud")
    p.add_argument("checkpoint")
    p.add_argument("partial")
    p.add_argument("prefix")

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on a dataset")
    p.add_argument("checkpoint")
    p.add_argument("dataset", nargs="?", default=None,
                   help="dataset directory (default: the synthetic split)")
    p.add_argument("--split", choices=("train", "holdout"), default="holdout")
    p.add_argument("--dump", default=None, help="directory for per-sample predictions")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suites")
    p.add_argument("--skip-network", action="store_true")
    return parser


def _parse_sets(items) -> dict:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip().replace("-", "_")] = value
    return out


def run_config(args, **extra) -> RunConfig:
    """Config file, then ``--set`` pairs, then dedicated flags, later ones winning."""
    pairs = read_config_file(args.config) if getattr(args, "config", None) else {}
    pairs.update(_parse_sets(getattr(args, "set", None)))
    cfg = from_pairs(RunConfig, pairs)
    overrides = {k: v for k, v in extra.items() if v is not None}
    for name in ("seed", "precision"):
        if hasattr(args, name):
            overrides[name] = getattr(args, name)
    for name in ("frozen_norm", "cross_feed"):
        if getattr(args, name, False):
            overrides[name] = True
    return cfg.replace(**overrides)


def _explicit_model(args) -> bool:
    return bool(getattr(args, "config", None) or getattr(args, "set", None)
                or getattr(args, "cross_feed", False))


def cmd_grid(args, out):
    cfg = run_config(args)
    n = args.resolution or cfg.resolution
    cloud = read_cloud(args.cloud)
    write_grid(gridding(cloud.points, n).data, args.output)
    return EXIT_OK


def cmd_ungrid(args, out):
    grid = read_grid(args.grid)
    if not isinstance(grid, ScalarGrid):
        raise ShapeError("ungrid needs a single-channel grid")
    write_cloud(gridding_reverse(grid, args.threshold).data, args.output)
    return EXIT_OK


def cmd_chamfer(args, out):
    g2m, m2g = chamfer_terms(read_cloud(args.first), read_cloud(args.second), args.method)
    out.write(f"chamfer\t{g2m + m2g:.9e}\n")
    out.write(f"first_to_second\t{g2m:.9e}\n")
    out.write(f"second_to_first\t{m2g:.9e}\n")
    return EXIT_OK


def cmd_synth(args, out):
    kinds = tuple(k.strip() for k in args.kinds.split(",")) if args.kinds else None
    cfg = run_config(args, synth_count=args.count, points_per_part=args.points_per_part,
                     synth_kinds=kinds)
    pairs = synth_dataset(cfg.synth_kinds, cfg.synth_count, cfg.points_per_part, cfg.seed,
                          cfg.degrade_mode, cfg.degrade_fraction)
    root = Path(args.output)
    for pair in pairs:
        folder = root / pair.category
        folder.mkdir(parents=True, exist_ok=True)
        write_cloud(pair.complete, folder / f"{pair.shape_id}.xyz")
        if not args.no_partials:
            write_cloud(pair.partial, folder / f"{pair.shape_id}.partial.xyz")
    (root / "manifest.txt").write_text("".join(f"{p.shape_id}\n" for p in pairs))
    out.write(f"wrote {len(pairs)} shapes to {root}\n")
    return EXIT_OK


def cmd_train(args, out):
    cfg = run_config(args, steps=args.steps, epochs=args.epochs,
                     checkpoint=args.checkpoint, dataset=args.dataset)
    start = time.perf_counter()
    result = train(cfg, out=out, resume=args.resume)
    out.write(f"# trained {result.steps} steps in {time.perf_counter() - start:.1f} s; "
              f"checkpoint {cfg.checkpoint}\n")
    return EXIT_OK


def cmd_infer(args, out):
    cfg = run_config(args)
    explicit = _explicit_model(args)
    paths = infer(args.checkpoint, args.partial, args.prefix, seed=cfg.seed,
                  expected=cfg.model_config() if explicit else None,
                  frozen_norm=cfg.frozen_norm, precision=cfg.precision)
    for key, path in paths.items():
        out.write(f"{key}\t{path}\n")
    return EXIT_OK


def cmd_eval(args, out):
    cfg = run_config(args, dataset=args.dataset)
    explicit = _explicit_model(args)
    report = evaluate_checkpoint(args.checkpoint, cfg, args.split, args.dump,
                                 check_config=explicit)
    out.write(report.format() + "\n")
    return EXIT_OK


def cmd_gradcheck(args, out):
    cfg = run_config(args)
    results = gc.run_all(cfg.seed, include_network=not args.skip_network)
    out.write(gc.format_table(results) + "\n")
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


COMMANDS = {"grid": cmd_grid, "ungrid": cmd_ungrid, "chamfer": cmd_chamfer, "synth": cmd_synth,
            "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck}


def main(argv=None, out=None) -> int:
    out = out if out is not None else sys.stdout
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ShapeError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130


def main_entry():
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
