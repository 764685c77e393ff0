"""Image, depth and trajectory metrics of a reconstruction."""

import logging
from typing import Dict, List

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel

from splatengine.objectives import (
    metric_depth_acc,
    metric_depth_rmse,
    metric_psnr,
    metric_ssim,
)
from splatengine.reconstruction import Reconstruction, SplitType
from splatengine.utils.calculations import get_change
from splatengine.utils.data.dataset import to_uint8

logger = logging.getLogger(__name__)

DEPTH_ACC_THRESHOLD = 0.1
METRIC_COLUMNS = ["psnr", "ssim", "depth_acc", "depth_rmse"]
# metrics.csv header; depth_acc is written as acc_0p1.
REPORT_COLUMNS = [
    "sequence",
    "frame",
    "psnr",
    "ssim",
    "acc_0p1",
    "depth_rmse",
]


class SplitNotFoundError(ValueError):
    """The dataset has no frames in the requested split."""


class MetricSummary(BaseModel):
    psnr: float
    """Peak signal-to-noise ratio of the 8-bit render, in dB."""
    ssim: float
    """Structural similarity of the 8-bit render."""
    depth_acc: float
    """Share of valid pixels with depth error below 0.1 dataset units."""
    depth_rmse: float
    """Root-mean-square depth error in dataset units."""


class FrameMetrics(MetricSummary):
    frame: int
    """Time index of the evaluated observation."""


class MetricReport(BaseModel):
    sequence: str
    split: str
    frames: List[FrameMetrics]
    mean: MetricSummary

    def to_frame(self) -> pd.DataFrame:
        """One row per frame, then a `mean` row."""
        rows = [metrics.model_dump() for metrics in self.frames]
        rows.append({"frame": "mean", **self.mean.model_dump()})
        table = pd.DataFrame(rows).rename(columns={"depth_acc": "acc_0p1"})
        table.insert(0, "sequence", self.sequence)
        return table[REPORT_COLUMNS]


def _quantize(image: torch.Tensor) -> torch.Tensor:
    return torch.from_numpy(to_uint8(image)).to(torch.float64) / 255.0


def calculate_metrics(
    reconstruction: Reconstruction,
    split: SplitType = "eval",
) -> MetricReport:
    """Render every observation of a split and score it.

    Renders are quantised to 8 bits like the stored images before scoring,
    and depth is compared in dataset units.

    Raises:
        SplitNotFoundError: when the split holds no frames.
    """
    frames = reconstruction.frames(split)
    if not frames:
        raise SplitNotFoundError(
            f"Dataset '{reconstruction.dataset.name}' has no {split} frames."
        )
    scale = reconstruction.scene_scale
    results = []
    for frame in frames:
        t = reconstruction.dataset.time(frame.time_index)
        buffers = reconstruction.render(reconstruction.camera(frame, split), t)
        pred_rgb = _quantize(buffers.rgb)
        gt_rgb = _quantize(frame.rgb)
        pred_depth = buffers.depth / scale
        gt_depth = frame.depth / scale
        results.append(
            FrameMetrics(
                frame=frame.time_index,
                psnr=metric_psnr(pred_rgb, gt_rgb),
                ssim=metric_ssim(pred_rgb, gt_rgb),
                depth_acc=metric_depth_acc(
                    pred_depth, gt_depth, DEPTH_ACC_THRESHOLD
                ),
                depth_rmse=metric_depth_rmse(pred_depth, gt_depth),
            )
        )
        logger.debug(f"Frame {frame.time_index}: {results[-1]}")
    mean = MetricSummary(
        **{
            column: float(np.mean([getattr(r, column) for r in results]))
            for column in METRIC_COLUMNS
        }
    )
    logger.info(
        f"Evaluated {len(results)} {split} frames: PSNR {mean.psnr:.2f} dB, "
        f"SSIM {mean.ssim:.3f}, depth Acc {mean.depth_acc:.3f}."
    )
    return MetricReport(
        sequence=reconstruction.dataset.name,
        split=split,
        frames=results,
        mean=mean,
    )


def compare_ablations(
    baseline: MetricSummary, variants: Dict[str, MetricSummary]
) -> pd.DataFrame:
    """Absolute change of each variant's metrics against the baseline."""
    rows = []
    for name, variant in variants.items():
        change = get_change(baseline, variant, relative=False)
        rows.append({"variant": name, **change.model_dump()})
    return pd.DataFrame(rows, columns=["variant", *METRIC_COLUMNS])


def path_length(positions: np.ndarray) -> float:
    return float(np.linalg.norm(np.diff(positions, axis=0), axis=1).sum())


def rigid_alignment(
    source: np.ndarray, target: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Rotation R and offset c minimising ‖R·source + c − target‖."""
    source_mean = source.mean(axis=0)
    target_mean = target.mean(axis=0)
    covariance = (target - target_mean).T @ (source - source_mean)
    u, _, vt = np.linalg.svd(covariance)
    sign = np.sign(np.linalg.det(u @ vt)) or 1.0
    rotation = u @ np.diag([1.0, 1.0, sign]) @ vt
    return rotation, target_mean - rotation @ source_mean


def trajectory_ate(estimated: np.ndarray, reference: np.ndarray) -> float:
    """Absolute trajectory error after rigid alignment, as % of path length.

    Args:
        estimated (np.ndarray): recovered positions, [T, 3].
        reference (np.ndarray): true positions, [T, 3].
    """
    if estimated.shape != reference.shape:
        raise ValueError(
            f"Trajectories have shapes {estimated.shape} and "
            f"{reference.shape}."
        )
    length = path_length(reference)
    if length == 0:
        raise ValueError("Reference trajectory does not move.")
    rotation, translation = rigid_alignment(estimated, reference)
    aligned = estimated @ rotation.T + translation
    error = np.sqrt(((aligned - reference) ** 2).sum(axis=1).mean())
    return 100.0 * error / length


def trajectory_error(
    estimated: pd.DataFrame, reference: pd.DataFrame, object_id: int
) -> float:
    """ATE between two trajectory tables for one object."""

    def positions(table: pd.DataFrame) -> np.ndarray:
        rows = table[table["obj"] == object_id].sort_values("frame")
        return rows[["x", "y", "z"]].to_numpy(dtype=np.float64)

    return trajectory_ate(positions(estimated), positions(reference))
