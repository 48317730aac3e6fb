"""
main.py — command-line entry point.

    python main.py [--seed N] [--out DIR] [--verbose] <command> [options]

The global flags are accepted before or after the command.

Commands
--------
  gen-data        render a procedural dataset (views, segments, manifest)
  train           stage 1, stage 2 or both; --resume continues a checkpoint
  eval            L1 / SSIM over every ordered pose pair of the test split
  synth           novel views of one external image
  probe           intrinsic-representation similarity statistics + mosaic
  sweep-ref-pose  one stage-1 model per reference pose, evaluated
  grad-check      finite-difference gradient suite
  ablate-reverse  test metrics without / with the reverse-mapping stage

Exit codes: 0 success, 1 usage error, 2 runtime error (message on stderr).
Default output locations come from data_paths.py (VIEWSYNTH_DATA_DIR).
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import data_paths
import evaluation
import grad_suite
from dataset import DEFAULT_GRID, Dataset, build_dataset
from geometry import Pose, pose_grid
from models import CATEGORIES
from persistence import load_checkpoint, save_checkpoint
from report_pdf import write_eval_pdf
from tensor_core import precision
from training import (
    ConfigError,
    TrainConfig,
    TrainState,
    config_overrides,
    describe,
    load_config,
    save_config,
    train_stage1,
    train_stage2,
)

logger = logging.getLogger("viewsynth")

DEFAULT_SWEEP = ("0,0", "90,0", "0,10")
LOG_FORMAT = "[%(asctime)s] %(levelname)s %(name)s: %(message)s"


class UsageError(Exception):
    """Raised by the argument parser instead of exiting."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def configure_logging(verbose: bool) -> None:
    formatter = logging.Formatter(LOG_FORMAT, datefmt="%Y-%m-%dT%H:%M:%SZ")
    formatter.converter = time.gmtime
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(formatter)
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, handlers=[handler], force=True)


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def _pose(text: str) -> Pose:
    try:
        return Pose.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _out_dir(args, default: Path) -> Path:
    if args.out:
        return Path(args.out)
    data_paths.ensure_dirs()
    return default


def _base_config(args) -> TrainConfig:
    config = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    return config_overrides(config, seed=args.seed, dataset=getattr(args, "dataset", None))


def _open_dataset(path: Optional[str], config: Optional[TrainConfig] = None) -> Dataset:
    root = path or (config.dataset if config else "") or str(data_paths.DEFAULT_DATASET_DIR)
    return Dataset.open(root)


def _print_table(frame) -> None:
    print(frame.to_csv(sep="\t", index=False, float_format="%.6g", lineterminator="\n"), end="")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    poses = pose_grid(args.azimuths, args.elevations)
    out = _out_dir(args, data_paths.DEFAULT_DATASET_DIR)
    seed = 0 if args.seed is None else args.seed
    categories = list(CATEGORIES) if args.category == "all" else [args.category]
    dataset = build_dataset(args.objects, poses, args.size, seed, out, grid=args.grid,
                            workers=args.workers, progress=args.progress, categories=categories)
    print(f"dataset: {out}")
    print(f"categories: {', '.join(dataset.categories())}")
    print(f"objects: {len(dataset.object_ids())} (train {len(dataset.object_ids('train'))}, "
          f"test {len(dataset.object_ids('test'))})")
    print(f"poses: {len(poses)}")
    return 0


def _train_dir(args, config: TrainConfig) -> Path:
    if args.out:
        return Path(args.out)
    if config.checkpoint_dir:
        return Path(config.checkpoint_dir)
    data_paths.ensure_dirs()
    return data_paths.run_dir("default")


def _run(state: TrainState, config: TrainConfig, dataset: Dataset, stage: int, out: Path, progress: bool):
    def checkpoint(s: TrainState) -> None:
        save_checkpoint(s, data_paths.checkpoint_path(out, stage))

    trainer = train_stage1 if stage == 1 else train_stage2
    kwargs = dict(loss_log=data_paths.loss_log_path(out, stage), on_checkpoint=checkpoint, progress=progress)
    if stage == 1:
        state, history = trainer(config, dataset, state, **kwargs)
    else:
        state, history = trainer(config, state, dataset, **kwargs)
    summary = describe(history)
    print(f"stage {stage}: {summary['steps']} steps", end="")
    if summary["steps"]:
        print(f", smoothed L_Total {summary['first_smoothed_total']:.6g} -> "
              f"{summary['last_smoothed_total']:.6g}", end="")
    print()
    return state


def cmd_train(args) -> int:
    state: Optional[TrainState] = None
    if args.resume:
        state = load_checkpoint(args.resume)
        config = load_config(args.config) if args.config else state.config
        config = config_overrides(config, seed=args.seed, dataset=args.dataset)
    else:
        config = _base_config(args)
    if args.stage == "2" and state is None:
        raise ConfigError("stage 2 continues a stage-1 model: pass --resume <checkpoint>")

    out = _train_dir(args, config)
    save_config(config, data_paths.run_config_path(out))
    dataset = _open_dataset(args.dataset, config)
    logger.info("Training run in %s on %s (precision %s)", out, dataset.root, config.precision)

    with precision(config.precision):
        if args.stage in ("1", "both"):
            state = _run(state, config, dataset, 1, out, args.progress)
        if args.stage in ("2", "both"):
            assert state is not None
            state = _run(state, config, dataset, 2, out, args.progress)
    print(f"checkpoints: {out}")
    return 0


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    config = state.config
    out = _out_dir(args, data_paths.REPORTS_DIR)
    with precision(config.precision):
        dataset = _open_dataset(args.dataset, config)
        sources = list(config.heldout_poses) if args.heldout_only else None
        if args.heldout_only and not sources:
            raise ConfigError("--heldout-only needs a checkpoint trained with heldout_poses")
        report = evaluation.evaluate(state.params, config.model, dataset, args.split,
                                     source_poses=sources, category=args.category, workers=args.workers,
                                     report_path=out / "report.tsv", progress=args.progress)
        noise = None
        if args.pose_noise is not None:
            noise = evaluation.pose_noise_invariance(state.params, config.model, dataset, args.pose_noise,
                                                     seed=config.seed if args.seed is None else args.seed,
                                                     split=args.split)
    for key, value in report.summary().items():
        print(f"{key}: {value:.6g}" if isinstance(value, float) else f"{key}: {value}")
    for row in report.by_category().itertuples(index=False):
        print(f"category {row.category}: rows {row.rows} L1 {row.L1:.6g} SSIM {row.SSIM:.6g} "
              f"beats_copy {row.beats_copy:.6g}")
    print(f"report: {out / 'report.tsv'}")
    if args.pdf:
        path = write_eval_pdf(report, out / "report.pdf", checkpoint=str(args.checkpoint),
                              dataset=str(dataset.root))
        print(f"pdf: {path}")
    if noise is not None:
        print(f"pose-noise: {'identical' if noise.identical else 'CHANGED'} over {noise.views} views "
              f"(max abs diff {noise.max_abs_diff:.6g})")
        if not noise.identical:
            raise RuntimeError("synthesis changed when only the source pose metadata was perturbed")
    return 0


def cmd_synth(args) -> int:
    state = load_checkpoint(args.checkpoint)
    out = _out_dir(args, data_paths.REPORTS_DIR / "synth")
    with precision(state.config.precision):
        written = evaluation.synth_command(state.params, state.config.model, args.image, args.pose, out)
    for path in written:
        print(path)
    return 0


def cmd_probe(args) -> int:
    state = load_checkpoint(args.checkpoint)
    config = state.config
    out = _out_dir(args, data_paths.REPORTS_DIR / "probe")
    with precision(config.precision):
        dataset = _open_dataset(args.dataset, config)
        objects = args.object or dataset.object_ids("test")[:evaluation.PROBE_OTHERS]
        table = evaluation.probe_objects(state.params, config.model, dataset, objects,
                                         n_others=args.others, mosaic_dir=out)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / "probe.tsv", sep="\t", index=False, lineterminator="\n")
    _print_table(table)
    return 0


def cmd_sweep(args) -> int:
    config = _base_config(args)
    out = _out_dir(args, data_paths.REPORTS_DIR)
    poses = args.pose or [Pose.parse(p) for p in DEFAULT_SWEEP]
    with precision(config.precision):
        dataset = _open_dataset(args.dataset, config)
        table = evaluation.reference_pose_sweep(config, dataset, poses, workers=args.workers,
                                                progress=args.progress)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / "sweep.tsv", sep="\t", index=False, lineterminator="\n")
    _print_table(table)
    print(f"L1 spread: {evaluation.l1_spread(table):.6g}")
    if args.pdf:
        path = write_eval_pdf(None, out / "sweep.pdf", title="Reference-pose sweep", dataset=str(dataset.root),
                              extra=table, extra_title="Test metrics per reference pose")
        print(f"pdf: {path}")
    return 0


def cmd_ablate(args) -> int:
    config = _base_config(args)
    out = _out_dir(args, data_paths.REPORTS_DIR)
    with precision(config.precision):
        dataset = _open_dataset(args.dataset, config)
        table = evaluation.reverse_mapping_ablation(config, dataset, workers=args.workers,
                                                    progress=args.progress)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / "ablation.tsv", sep="\t", index=False, lineterminator="\n")
    _print_table(table)
    if args.pdf:
        path = write_eval_pdf(None, out / "ablation.pdf", title="Reverse-mapping ablation",
                              dataset=str(dataset.root), extra=table, extra_title="Test metrics")
        print(f"pdf: {path}")
    return 0


def cmd_grad_check(args) -> int:
    seeds = range(args.seed or 0, (args.seed or 0) + args.seeds)
    results = grad_suite.run_suite(list(seeds), args.case)
    for result in results:
        print(grad_suite.format_result(result))
    if all(r.passed for r in results):
        print("RESULT: PASS")
        return 0
    print("RESULT: FAIL")
    failed = sorted({r.case for r in results if not r.passed})
    raise RuntimeError(f"gradient check failed for {', '.join(failed)}")


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_global_flags(parser: argparse.ArgumentParser, **defaults) -> None:
    parser.add_argument("--seed", type=int, default=defaults.get("seed"), help="override the run / dataset seed")
    parser.add_argument("--out", default=defaults.get("out"),
                        help="output directory (default under VIEWSYNTH_DATA_DIR)")
    parser.add_argument("--verbose", action="store_true", default=defaults.get("verbose", False),
                        help="debug logging")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="viewsynth", description="Single-image novel view synthesis: data, training, evaluation.")
    _add_global_flags(p)
    # Same flags after the command; SUPPRESS keeps the top-level value when absent there.
    common = _Parser(add_help=False)
    _add_global_flags(common, seed=argparse.SUPPRESS, out=argparse.SUPPRESS, verbose=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", metavar="<command>")
    sub.required = True

    g = sub.add_parser("gen-data", parents=[common], help="render a procedural dataset")
    g.add_argument("--objects", type=int, default=20)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--azimuths", type=int, default=18, help="azimuth steps over 360 degrees")
    g.add_argument("--elevations", type=_floats, default=[0.0, 10.0, 20.0], help="e.g. 0,10,20")
    g.add_argument("--grid", type=int, default=DEFAULT_GRID, help="voxel grid resolution")
    g.add_argument("--category", choices=(*CATEGORIES, "all"), default="chair",
                   help="object layout; \"all\" alternates every category")
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--progress", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train stage 1, stage 2 or both")
    t.add_argument("--config", help="run config file (key = value)")
    t.add_argument("--dataset", help="dataset directory (overrides the config)")
    t.add_argument("--stage", choices=("1", "2", "both"), default="both")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--progress", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="score a checkpoint on the test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset")
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--heldout-only", action="store_true", help="sources restricted to held-out poses")
    e.add_argument("--category", choices=CATEGORIES, help="score one category only")
    e.add_argument("--pose-noise", type=float, metavar="STD",
                   help="also check synthesis ignores Gaussian noise on the source pose metadata")
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--pdf", action="store_true", help="also write report.pdf")
    e.add_argument("--progress", action="store_true")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", parents=[common], help="novel views of one image")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--pose", type=_pose, action="append", required=True, help="az,el (repeatable)")
    s.set_defaults(func=cmd_synth)

    r = sub.add_parser("probe", parents=[common], help="intrinsic-representation statistics")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--dataset")
    r.add_argument("--object", action="append", help="object id (repeatable; default: test objects)")
    r.add_argument("--others", type=int, default=evaluation.PROBE_OTHERS)
    r.set_defaults(func=cmd_probe)

    w = sub.add_parser("sweep-ref-pose", parents=[common], help="train + evaluate one model per reference pose")
    w.add_argument("--config")
    w.add_argument("--dataset")
    w.add_argument("--pose", type=_pose, action="append", help="reference pose az,el (repeatable)")
    w.add_argument("--workers", type=int, default=1)
    w.add_argument("--pdf", action="store_true", help="also write sweep.pdf")
    w.add_argument("--progress", action="store_true")
    w.set_defaults(func=cmd_sweep)

    a = sub.add_parser("ablate-reverse", parents=[common], help="metrics without / with reverse mapping")
    a.add_argument("--config")
    a.add_argument("--dataset")
    a.add_argument("--workers", type=int, default=1)
    a.add_argument("--pdf", action="store_true", help="also write ablation.pdf")
    a.add_argument("--progress", action="store_true")
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient suite")
    c.add_argument("--seeds", type=int, default=len(grad_suite.DEFAULT_SEEDS))
    c.add_argument("--case", action="append", choices=sorted(grad_suite.CASES), help="repeatable")
    c.set_defaults(func=cmd_grad_check)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:          # --help
        return int(exc.code or 0)

    configure_logging(args.verbose)
    try:
        return args.func(args)
    except Exception as exc:
        logger.debug("command %s failed", args.command, exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
