"""Command-line entry point: synth, train, eval, render, evs and export."""

import argparse
import logging
import sys
import tomllib
from pathlib import Path
from typing import Any, Callable, Dict, Sequence

import pandas as pd
from pydantic import ValidationError

from splatengine.checkpoint import CheckpointError
from splatengine.constants import GROUND_TRUTH_NAME, PRESETS
from splatengine.outputs.embodied import EmbodiedCameraSpec
from splatengine.outputs.evaluation import SplitNotFoundError, trajectory_error
from splatengine.pipeline import (
    SurfaceNotFoundError,
    TrainingDivergedError,
    ground_truth_state,
    save_checkpoint,
)
from splatengine.reconstruction import Reconstruction
from splatengine.scene import UnknownObjectError
from splatengine.utils.config import ConfigError, resolve_config
from splatengine.utils.data.dataset import DatasetError, save_dataset
from splatengine.utils.data.synthetic import (
    generate_synthetic,
    read_scene_spec,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_TRAINING = 3
EXIT_INCOMPATIBLE = 4

# Error classes in the order they are matched against exit codes.
EXIT_CODES = [
    ((TrainingDivergedError, SurfaceNotFoundError), EXIT_TRAINING),
    (
        (CheckpointError, SplitNotFoundError, UnknownObjectError),
        EXIT_INCOMPATIBLE,
    ),
    ((ValidationError, ConfigError, DatasetError, ValueError), EXIT_INVALID),
]

ABLATION_FLAGS = {
    "no_depth_loss": "ablation.depth_loss",
    "no_normal_loss": "ablation.normal_loss",
    "no_skeleton": "ablation.skeleton",
    "no_soft": "ablation.soft",
    "no_root_init": "ablation.root_init",
    "no_root": "ablation.root",
}
BUDGET_KEYS = [
    "budgets.proxy",
    "budgets.background",
    "budgets.foreground",
    "budgets.joint",
]


def parse_value(text: str) -> Any:
    """A TOML scalar, or the raw string when it does not parse as one."""
    try:
        return tomllib.loads(f"value = {text}")["value"]
    except tomllib.TOMLDecodeError:
        return text


def collect_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Dotted-path config overrides from the training flags."""
    overrides: Dict[str, Any] = {}
    for assignment in args.set or []:
        key, separator, value = assignment.partition("=")
        if not separator:
            raise ConfigError(
                f"Override '{assignment}' is not of the form key=value."
            )
        overrides[key.strip()] = parse_value(value.strip())
    if args.budget is not None:
        overrides.update(zip(BUDGET_KEYS, args.budget))
    for flag, key in ABLATION_FLAGS.items():
        if getattr(args, flag):
            overrides[key] = False
    for key in ("seed", "threads", "scene_scale"):
        if getattr(args, key, None) is not None:
            overrides[key] = getattr(args, key)
    return overrides


def cmd_synth(args: argparse.Namespace) -> int:
    spec = read_scene_spec(args.spec)
    if args.seed is not None:
        spec = spec.model_copy(update={"seed": args.seed})
    dataset, ground_truth = generate_synthetic(spec)
    out = Path(args.out)
    save_dataset(dataset, out)
    save_checkpoint(ground_truth_state(ground_truth), out / GROUND_TRUTH_NAME)
    logger.info(f"Wrote synthetic dataset '{dataset.name}' to {out}.")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = resolve_config(
        preset=args.preset,
        config_file=args.config,
        overrides=collect_overrides(args),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(config.model_dump_json(indent=2))
    reconstruction = Reconstruction(
        dataset=args.dataset,
        checkpoint=args.resume,
        resume=args.resume is not None,
        config=config,
    )
    try:
        reconstruction.train(out / "checkpoints")
    finally:
        reconstruction.loss_log().to_csv(out / "loss_log.csv", index=False)
    logger.info(f"Training finished; outputs are in {out}.")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    reconstruction = Reconstruction(
        dataset=args.dataset, checkpoint=args.checkpoint
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = reconstruction.calculate_metrics(split=args.split)
    report.to_frame().to_csv(out / "metrics.csv", index=False)

    reference_path = Path(args.dataset) / GROUND_TRUTH_NAME
    if reference_path.exists() and reconstruction.object_count > 0:
        reference = Reconstruction(checkpoint=reference_path)
        estimated = reconstruction.export_trajectory(include_camera=False)
        truth = reference.export_trajectory(include_camera=False)
        rows = []
        for object_id in range(1, reconstruction.object_count + 1):
            try:
                ate = trajectory_error(estimated, truth, object_id)
            except ValueError as e:
                logger.warning(f"No trajectory error for {object_id}: {e}")
                continue
            rows.append({"obj": object_id, "ate_percent": ate})
        pd.DataFrame(rows, columns=["obj", "ate_percent"]).to_csv(
            out / "trajectory_error.csv", index=False
        )
    logger.info(
        f"PSNR {report.mean.psnr:.2f} dB, SSIM {report.mean.ssim:.3f}, "
        f"Acc {report.mean.depth_acc:.3f}, RMSE {report.mean.depth_rmse:.4f}."
    )
    return EXIT_OK


def cmd_render(args: argparse.Namespace) -> int:
    reconstruction = Reconstruction(
        dataset=args.dataset, checkpoint=args.checkpoint
    )
    reconstruction.render_frames(
        split=args.split,
        frames=args.frames,
        removed_objects=args.remove_object,
        out=args.out,
    )
    return EXIT_OK


def cmd_evs(args: argparse.Namespace) -> int:
    reconstruction = Reconstruction(
        dataset=args.dataset, checkpoint=args.checkpoint
    )
    spec = EmbodiedCameraSpec(
        actor=args.actor,
        mode=args.mode,
        window=args.window,
        bone=args.bone,
    )
    reconstruction.render_embodied(
        spec,
        frames=args.frames,
        removed_objects=args.remove_object,
        out=args.out,
    )
    return EXIT_OK


def cmd_export(args: argparse.Namespace) -> int:
    reconstruction = Reconstruction(
        dataset=args.dataset, checkpoint=args.checkpoint
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reconstruction.export_ply(
        out / f"scene_{args.frame:05d}.ply",
        frame=args.frame,
        removed_objects=args.remove_object,
    )
    trajectory = reconstruction.export_trajectory(
        frames=args.frames, path=out / "trajectory.csv"
    )
    reconstruction.trajectory_chart(trajectory).write_html(
        out / "trajectory_bev.html"
    )
    return EXIT_OK


def _add_checkpoint_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--checkpoint", type=Path, required=True)
    parser.add_argument("--dataset", type=Path, default=None)
    parser.add_argument("--out", type=Path, required=True)
    parser.add_argument("--frames", type=int, nargs="+", default=None)
    parser.add_argument(
        "--remove-object",
        type=int,
        action="append",
        default=[],
        metavar="K",
        help="Leave object K out of the composed scene (repeatable).",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splatengine",
        description="Reconstruct dynamic scenes with deformable Gaussians.",
    )
    parser.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
    )
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", help="Generate a synthetic dataset.")
    synth.add_argument("spec", type=Path, help="TOML or JSON scene spec.")
    synth.add_argument("--out", type=Path, required=True)
    synth.add_argument("--seed", type=int, default=None)
    synth.set_defaults(handler=cmd_synth)

    train = commands.add_parser("train", help="Reconstruct a dataset.")
    train.add_argument("--dataset", type=Path, required=True)
    train.add_argument("--out", type=Path, required=True)
    train.add_argument("--config", type=Path, default=None)
    train.add_argument("--preset", choices=sorted(PRESETS), default=None)
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--threads", type=int, default=None)
    train.add_argument("--scene-scale", type=float, default=None)
    train.add_argument(
        "--budget",
        type=int,
        nargs=4,
        default=None,
        metavar=("PROXY", "BACKGROUND", "FOREGROUND", "JOINT"),
        help="Iterations per stage.",
    )
    for flag in ABLATION_FLAGS:
        train.add_argument(
            f"--{flag.replace('_', '-')}", action="store_true"
        )
    train.add_argument(
        "--resume",
        type=Path,
        default=None,
        help="Continue from this checkpoint's stage and iteration.",
    )
    train.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="Override any configuration value, e.g. weights.depth=1.5.",
    )
    train.set_defaults(handler=cmd_train)

    evaluate = commands.add_parser("eval", help="Score held-out views.")
    evaluate.add_argument("--checkpoint", type=Path, required=True)
    evaluate.add_argument("--dataset", type=Path, required=True)
    evaluate.add_argument("--out", type=Path, required=True)
    evaluate.add_argument(
        "--split", choices=["train", "eval"], default="eval"
    )
    evaluate.set_defaults(handler=cmd_eval)

    render = commands.add_parser("render", help="Render recorded views.")
    _add_checkpoint_arguments(render)
    render.add_argument("--split", choices=["train", "eval"], default="train")
    render.set_defaults(handler=cmd_render)

    evs = commands.add_parser("evs", help="Render an actor-attached camera.")
    _add_checkpoint_arguments(evs)
    evs.add_argument("--actor", type=int, default=1)
    evs.add_argument(
        "--mode",
        choices=["egocentric", "third_person", "overhead"],
        default="egocentric",
    )
    evs.add_argument("--window", type=int, default=9)
    evs.add_argument("--bone", type=int, default=None)
    evs.set_defaults(handler=cmd_evs)

    export = commands.add_parser(
        "export", help="Export the scene as PLY and the trajectories as CSV."
    )
    _add_checkpoint_arguments(export)
    export.add_argument("--frame", type=int, default=0)
    export.set_defaults(handler=cmd_export)
    return parser


def exit_code(error: Exception) -> int | None:
    for classes, code in EXIT_CODES:
        if isinstance(error, classes):
            return code
    return None


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=args.log_level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    handler: Callable[[argparse.Namespace], int] = args.handler
    try:
        return handler(args)
    except Exception as e:
        code = exit_code(e)
        if code is None:
            raise
        logger.error(f"{type(e).__name__}: {e}")
        return code


if __name__ == "__main__":
    sys.exit(main())
