"""Renders of the recorded views and PLY export of the composed scene."""

import logging
import math
from pathlib import Path
from typing import Collection, List, Sequence

import torch

from splatengine.deformation import frame_time
from splatengine.reconstruction import Reconstruction, SplitType
from splatengine.renderer import RenderBuffers, compose_at
from splatengine.scene import GaussianSet, save_ply
from splatengine.utils.data.dataset import write_png
from splatengine.utils.data.tensor_file import write_tensor

logger = logging.getLogger(__name__)


def composed_scene(
    reconstruction: Reconstruction,
    frame: int,
    removed_objects: Collection[int] = (),
) -> GaussianSet:
    """The scene at a frame, in dataset units."""
    reconstruction.check_object_ids(removed_objects)
    t = frame_time(frame, reconstruction.frame_count)
    scale = reconstruction.scene_scale
    with torch.no_grad():
        scene = compose_at(
            reconstruction.model,
            reconstruction.deformation,
            t,
            removed_objects,
        ).detach()
    return scene.with_updates(
        centers=scene.centers / scale,
        log_scales=scene.log_scales - math.log(scale),
    )


def export_ply(
    reconstruction: Reconstruction,
    path: str | Path,
    frame: int = 0,
    removed_objects: Collection[int] = (),
) -> GaussianSet:
    """Write the composed scene at a frame as a PLY point cloud."""
    scene = composed_scene(reconstruction, frame, removed_objects)
    save_ply(scene, path)
    logger.info(f"Wrote {len(scene)} Gaussians of frame {frame} to {path}.")
    return scene


def render_frames(
    reconstruction: Reconstruction,
    split: SplitType = "train",
    frames: Sequence[int] | None = None,
    removed_objects: Collection[int] = (),
    out: str | Path | None = None,
) -> List[RenderBuffers]:
    """Render recorded views from the recovered cameras.

    Args:
        split (SplitType): the training path or the held-out path.
        frames (Sequence[int] | None): time indices, every one by default.
        removed_objects (Collection[int]): objects left out of the scene.
        out (str | Path | None): directory for `rgb_#####.png` and
            `depth_#####.hgst` files (depth in dataset units).
    """
    observations = {
        frame.time_index: frame for frame in reconstruction.frames(split)
    }
    if frames is None:
        frames = sorted(observations)
    missing = [index for index in frames if index not in observations]
    if missing:
        raise ValueError(f"Frames {missing} are not in the {split} split.")
    scale = reconstruction.scene_scale
    renders = []
    for index in frames:
        frame = observations[index]
        buffers = reconstruction.render(
            reconstruction.camera(frame, split),
            frame_time(index, reconstruction.frame_count),
            removed_objects,
        )
        buffers.depth = buffers.depth / scale
        renders.append(buffers)
        if out is not None:
            out = Path(out)
            out.mkdir(parents=True, exist_ok=True)
            write_png(out / f"rgb_{index:05d}.png", buffers.rgb)
            write_tensor(
                out / f"depth_{index:05d}.hgst", buffers.depth.numpy()
            )
    logger.info(f"Rendered {len(renders)} {split} frames.")
    return renders
