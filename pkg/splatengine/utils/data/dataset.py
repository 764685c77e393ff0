"""Sequence datasets on disk.

A sequence directory holds `manifest.json` plus, per frame, an 8-bit PNG
colour image and HGST tensors for depth, object masks and forward flow.
"""

import io
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List

import numpy as np
import torch
from PIL import Image
from pydantic import BaseModel, Field, ValidationError

from splatengine.constants import DATASET_VERSION, MANIFEST_NAME
from splatengine.geometry import RigidTransform
from splatengine.renderer import Camera
from splatengine.utils.data.tensor_file import (
    TensorFileError,
    read_tensor,
    write_tensor,
)
from splatengine.utils.files import atomic_write

logger = logging.getLogger(__name__)

MAX_RELATIVE_DEPTH_JUMP = 0.05


class DatasetError(ValueError):
    """A dataset directory is incomplete or inconsistent."""


class Intrinsics(BaseModel):
    fx: float = Field(..., gt=0)
    fy: float = Field(..., gt=0)
    cx: float
    cy: float
    width: int = Field(..., ge=1)
    height: int = Field(..., ge=1)


class PoseRecord(BaseModel):
    rotation: List[float] = Field(
        ..., min_length=4, max_length=4, description="Quaternion (w, x, y, z)."
    )
    translation: List[float] = Field(..., min_length=3, max_length=3)

    @classmethod
    def from_transform(cls, transform: RigidTransform) -> "PoseRecord":
        return cls(
            rotation=[float(v) for v in transform.rotation.tolist()],
            translation=[float(v) for v in transform.translation.tolist()],
        )

    def to_transform(self) -> RigidTransform:
        return RigidTransform(
            torch.tensor(self.rotation, dtype=torch.float64),
            torch.tensor(self.translation, dtype=torch.float64),
        )


class FrameRecord(BaseModel):
    index: int = Field(..., ge=0, description="Time index of the frame.")
    world_to_camera: PoseRecord
    root_to_world: List[PoseRecord] | None = Field(
        None, description="Coarse per-object root poses, if known."
    )
    rgb: str
    depth: str
    masks: str
    flow: str | None = None


class Manifest(BaseModel):
    version: int = DATASET_VERSION
    name: str = "sequence"
    object_count: int = Field(..., ge=0)
    frame_count: int = Field(..., ge=1)
    intrinsics: Intrinsics
    frames: List[FrameRecord]
    eval_frames: List[FrameRecord] = []


@dataclass
class FrameObservation:
    rgb: torch.Tensor
    """[H, W, 3] in [0, 1]."""
    depth: torch.Tensor
    """[H, W]; 0 marks invalid pixels."""
    masks: torch.Tensor
    """[H, W, N] object masks."""
    flow_to_next: torch.Tensor | None
    """[H, W, 2] pixels; None for the last frame."""
    camera: Camera
    time_index: int
    coarse_root_poses: List[RigidTransform] | None = None
    """Root-to-world pose per object."""


@dataclass
class Dataset:
    frames: List[FrameObservation]
    eval_frames: List[FrameObservation] = field(default_factory=list)
    object_count: int = 0
    name: str = "sequence"

    @property
    def frame_count(self) -> int:
        return len(self.frames)

    def time(self, index: int) -> float:
        if self.frame_count <= 1:
            return 0.0
        return index / (self.frame_count - 1)

    def scaled(self, scale: float) -> "Dataset":
        """Multiply depth and every translation by `scale`."""
        if scale == 1.0:
            return self

        def scale_pose(pose: RigidTransform) -> RigidTransform:
            return RigidTransform(pose.rotation, pose.translation * scale)

        def scale_frame(frame: FrameObservation) -> FrameObservation:
            return replace(
                frame,
                depth=frame.depth * scale,
                camera=frame.camera.with_pose(
                    scale_pose(frame.camera.world_to_camera)
                ),
                coarse_root_poses=(
                    [scale_pose(p) for p in frame.coarse_root_poses]
                    if frame.coarse_root_poses is not None
                    else None
                ),
            )

        return Dataset(
            frames=[scale_frame(f) for f in self.frames],
            eval_frames=[scale_frame(f) for f in self.eval_frames],
            object_count=self.object_count,
            name=self.name,
        )


def to_uint8(image: torch.Tensor) -> np.ndarray:
    return np.round(image.detach().clamp(0, 1).numpy() * 255.0).astype(
        np.uint8
    )


def _png_bytes(image: np.ndarray) -> bytes:
    out = io.BytesIO()
    Image.fromarray(image).save(out, format="PNG")
    return out.getvalue()


def write_png(path: str | Path, image: torch.Tensor) -> None:
    atomic_write(path, _png_bytes(to_uint8(image)))


def read_png(path: str | Path) -> torch.Tensor:
    with Image.open(path) as image:
        array = np.asarray(image.convert("RGB"), dtype=np.float64)
    return torch.from_numpy(array / 255.0)


def _record(
    frame: FrameObservation, prefix: str, with_flow: bool
) -> FrameRecord:
    stem = f"{prefix}{frame.time_index:05d}"
    return FrameRecord(
        index=frame.time_index,
        world_to_camera=PoseRecord.from_transform(
            frame.camera.world_to_camera
        ),
        root_to_world=(
            [PoseRecord.from_transform(p) for p in frame.coarse_root_poses]
            if frame.coarse_root_poses is not None
            else None
        ),
        rgb=f"{stem}_rgb.png",
        depth=f"{stem}_depth.hgst",
        masks=f"{stem}_masks.hgst",
        flow=(
            f"{stem}_flow.hgst"
            if with_flow and frame.flow_to_next is not None
            else None
        ),
    )


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write a dataset directory (manifest last)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if not dataset.frames:
        raise DatasetError("Cannot save a dataset without frames.")
    first = dataset.frames[0].camera
    records = {}
    for prefix, frames, with_flow in (
        ("frame_", dataset.frames, True),
        ("eval_", dataset.eval_frames, False),
    ):
        records[prefix] = []
        for frame in frames:
            record = _record(frame, prefix, with_flow)
            write_png(path / record.rgb, frame.rgb)
            write_tensor(path / record.depth, frame.depth.numpy())
            write_tensor(path / record.masks, frame.masks.numpy())
            if record.flow is not None:
                write_tensor(path / record.flow, frame.flow_to_next.numpy())
            records[prefix].append(record)
    manifest = Manifest(
        name=dataset.name,
        object_count=dataset.object_count,
        frame_count=dataset.frame_count,
        intrinsics=Intrinsics(
            fx=first.fx,
            fy=first.fy,
            cx=first.cx,
            cy=first.cy,
            width=first.width,
            height=first.height,
        ),
        frames=records["frame_"],
        eval_frames=records["eval_"],
    )
    atomic_write(
        path / MANIFEST_NAME,
        (manifest.model_dump_json(indent=2) + "\n").encode("utf-8"),
    )
    logger.info(
        f"Saved dataset '{dataset.name}' ({dataset.frame_count} frames, "
        f"{len(dataset.eval_frames)} evaluation frames) to {path}."
    )


def read_manifest(path: str | Path) -> Manifest:
    manifest_path = Path(path) / MANIFEST_NAME
    if not manifest_path.exists():
        raise DatasetError(f"Dataset {path} has no {MANIFEST_NAME}.")
    try:
        manifest = Manifest.model_validate_json(manifest_path.read_text())
    except ValidationError as e:
        raise DatasetError(f"Invalid manifest {manifest_path}: {e}")
    if manifest.version != DATASET_VERSION:
        raise DatasetError(
            f"Dataset {path} has version {manifest.version}; this build "
            f"reads version {DATASET_VERSION}."
        )
    return manifest


def _load_channel(
    path: Path, name: str | None, frame: str, channel: str
) -> torch.Tensor:
    if name is None:
        raise DatasetError(f"Frame {frame}: channel '{channel}' is missing.")
    file = path / name
    if not file.exists():
        raise DatasetError(
            f"Frame {frame}: {channel} file {name} does not exist."
        )
    try:
        if channel == "rgb":
            return read_png(file)
        return torch.from_numpy(read_tensor(file).astype(np.float64))
    except (TensorFileError, OSError) as e:
        raise DatasetError(f"Frame {frame}: cannot read {channel}: {e}")


def _load_frame(
    path: Path,
    record: FrameRecord,
    manifest: Manifest,
    label: str,
    expect_flow: bool,
) -> FrameObservation:
    size = (manifest.intrinsics.height, manifest.intrinsics.width)
    rgb = _load_channel(path, record.rgb, label, "rgb")
    depth = _load_channel(path, record.depth, label, "depth")
    masks = _load_channel(path, record.masks, label, "masks")
    flow = None
    if expect_flow:
        flow = _load_channel(path, record.flow, label, "flow")
    expected = {
        "rgb": (*size, 3),
        "depth": size,
        "masks": (*size, manifest.object_count),
        "flow": (*size, 2),
    }
    for channel, value in (
        ("rgb", rgb),
        ("depth", depth),
        ("masks", masks),
        ("flow", flow),
    ):
        if value is None:
            continue
        if tuple(value.shape) != expected[channel]:
            raise DatasetError(
                f"Frame {label}: {channel} has shape {tuple(value.shape)}, "
                f"expected {expected[channel]}."
            )
        if not torch.isfinite(value).all():
            raise DatasetError(
                f"Frame {label}: {channel} contains non-finite values."
            )
    if (depth < 0).any():
        raise DatasetError(f"Frame {label}: depth has negative values.")
    poses = None
    if record.root_to_world is not None:
        if len(record.root_to_world) != manifest.object_count:
            raise DatasetError(
                f"Frame {label}: {len(record.root_to_world)} coarse root "
                f"poses for {manifest.object_count} objects."
            )
        poses = [p.to_transform() for p in record.root_to_world]
    intrinsics = manifest.intrinsics
    try:
        camera = Camera(
            intrinsics.fx,
            intrinsics.fy,
            intrinsics.cx,
            intrinsics.cy,
            intrinsics.width,
            intrinsics.height,
            record.world_to_camera.to_transform(),
        )
    except ValueError as e:
        raise DatasetError(f"Frame {label}: invalid camera: {e}")
    return FrameObservation(
        rgb=rgb,
        depth=depth,
        masks=masks,
        flow_to_next=flow,
        camera=camera,
        time_index=record.index,
        coarse_root_poses=poses,
    )


def load_dataset(path: str | Path) -> Dataset:
    """Load and validate a dataset directory.

    Raises:
        DatasetError: naming the frame and channel of the first violation.
    """
    path = Path(path)
    manifest = read_manifest(path)
    if len(manifest.frames) != manifest.frame_count:
        raise DatasetError(
            f"Manifest lists {len(manifest.frames)} frames but declares "
            f"{manifest.frame_count}."
        )
    indices = [record.index for record in manifest.frames]
    if indices != list(range(manifest.frame_count)):
        raise DatasetError(
            f"Frame indices must run contiguously from 0, got {indices}."
        )
    frames = [
        _load_frame(
            path,
            record,
            manifest,
            str(record.index),
            expect_flow=record.index < manifest.frame_count - 1,
        )
        for record in manifest.frames
    ]
    eval_frames = []
    for record in manifest.eval_frames:
        if record.index >= manifest.frame_count:
            raise DatasetError(
                f"Evaluation frame {record.index} is outside the sequence."
            )
        eval_frames.append(
            _load_frame(
                path, record, manifest, f"eval {record.index}", False
            )
        )
    logger.info(
        f"Loaded dataset '{manifest.name}' from {path}: "
        f"{len(frames)} frames, {len(eval_frames)} evaluation frames, "
        f"{manifest.object_count} objects."
    )
    return Dataset(
        frames=frames,
        eval_frames=eval_frames,
        object_count=manifest.object_count,
        name=manifest.name,
    )


def normals_from_depth(
    depth: torch.Tensor, camera: Camera
) -> tuple[torch.Tensor, torch.Tensor]:
    """World-frame unit normals from a depth map and their validity mask.

    Normals come from the cross product of central differences of the
    back-projected points and face the camera.
    """
    points = camera.backproject(depth)
    valid = depth > 0
    dx = torch.zeros_like(points)
    dy = torch.zeros_like(points)
    dx[:, 1:-1] = points[:, 2:] - points[:, :-2]
    dy[1:-1, :] = points[2:, :] - points[:-2, :]
    normal = torch.linalg.cross(dx, dy, dim=-1)
    norm = normal.norm(dim=-1, keepdim=True)

    interior = torch.zeros_like(valid)
    interior[1:-1, 1:-1] = (
        valid[1:-1, 1:-1]
        & valid[1:-1, 2:]
        & valid[1:-1, :-2]
        & valid[2:, 1:-1]
        & valid[:-2, 1:-1]
    )
    # Drop pixels straddling depth discontinuities.
    jump = torch.zeros_like(depth)
    centre = depth[1:-1, 1:-1]
    for neighbour in (
        depth[1:-1, 2:],
        depth[1:-1, :-2],
        depth[2:, 1:-1],
        depth[:-2, 1:-1],
    ):
        jump[1:-1, 1:-1] = torch.maximum(
            jump[1:-1, 1:-1], (neighbour - centre).abs()
        )
    smooth = jump <= MAX_RELATIVE_DEPTH_JUMP * depth
    valid = interior & smooth & (norm[..., 0] > 1e-12)
    safe_norm = torch.where(valid[..., None], norm, 1.0)
    normal = torch.where(valid[..., None], normal / safe_norm, 0.0)
    towards = camera.center() - points
    facing = (normal * towards).sum(dim=-1, keepdim=True)
    normal = torch.where(facing < 0, -normal, normal)
    return normal, valid
