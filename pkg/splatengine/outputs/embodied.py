"""Actor-attached cameras: embodied renders and trajectory exports."""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Collection, List, Literal, Sequence, Tuple

import pandas as pd
import plotly.graph_objects as go
import torch
from pydantic import BaseModel, Field, field_validator

from splatengine.deformation import (
    DeformationModel,
    bone_pose,
    check_time,
    frame_time,
)
from splatengine.geometry import (
    RigidTransform,
    Twist,
    look_at,
    quat_rotate,
    se3_exp,
    se3_log,
)
from splatengine.reconstruction import Reconstruction
from splatengine.renderer import Camera, RenderBuffers
from splatengine.utils.charts import format_fig, trace_color
from splatengine.utils.data.dataset import write_png
from splatengine.utils.data.tensor_file import write_tensor

logger = logging.getLogger(__name__)

EmbodiedMode = Literal["egocentric", "third_person", "overhead"]

EGOCENTRIC_FORWARD = 0.1
THIRD_PERSON_BEHIND = 1.5
THIRD_PERSON_ABOVE = 0.5
OVERHEAD_HEIGHT = 3.0
# Window samples this far outside [0, 1] are rounding error.
TIME_TOLERANCE = 1e-9
TRAJECTORY_COLUMNS = ["frame", "obj", "x", "y", "z", "qw", "qx", "qy", "qz"]
# Object index used for the recording camera's rows.
CAMERA_ROW_ID = 0


class EmbodiedCameraSpec(BaseModel):
    actor: int = Field(1, ge=1, description="Object id the camera follows.")
    mode: EmbodiedMode = Field("egocentric", description="Camera placement.")
    offset_translation: Tuple[float, float, float] | None = Field(
        None,
        description="Camera position in the anchor frame, in dataset units. "
        "Overhead mode reads it in world axes. Defaults per mode.",
    )
    offset_rotation: Tuple[float, float, float, float] | None = Field(
        None,
        description="Camera-to-anchor rotation quaternion (w, x, y, z). "
        "Defaults per mode; ignored in overhead mode.",
    )
    window: int = Field(
        9, ge=1, description="Frames averaged when smoothing the anchor."
    )
    bone: int | None = Field(
        None,
        ge=0,
        description="Attach to this bone instead of the object root.",
    )

    @field_validator("window")
    def window_is_odd(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError(f"Smoothing window must be odd, got {value}.")
        return value


def _vector(values: Sequence[float]) -> torch.Tensor:
    return torch.tensor(values, dtype=torch.float64)


def camera_offset(spec: EmbodiedCameraSpec, scale: float) -> RigidTransform:
    """Camera-to-anchor transform for the egocentric and third-person modes.

    Anchor axes follow the object root: +z forward, +y down.
    """
    if spec.offset_translation is not None:
        translation = _vector(spec.offset_translation) * scale
        if spec.offset_rotation is not None:
            rotation = _vector(spec.offset_rotation)
            return RigidTransform(rotation / rotation.norm(), translation)
        if spec.mode == "egocentric":
            return RigidTransform.from_translation(translation)
        return look_at(translation, _vector([0.0, 0.0, 0.0])).inverse()
    if spec.mode == "egocentric":
        return RigidTransform.from_translation(
            _vector([0.0, 0.0, EGOCENTRIC_FORWARD * scale])
        )
    eye = _vector([0.0, -THIRD_PERSON_ABOVE, -THIRD_PERSON_BEHIND]) * scale
    return look_at(eye, _vector([0.0, 0.0, 0.0])).inverse()


def average_pose(poses: RigidTransform, centre: int) -> RigidTransform:
    """Lie-algebra mean of `poses` [n], taken relative to `poses[centre]`."""
    anchor = poses[centre]
    relative = anchor.inverse().unsqueeze(0).compose(poses)
    mean = se3_log(relative).as_vector().mean(dim=0)
    return anchor.compose(se3_exp(Twist.from_vector(mean)))


def window_average(
    poses: RigidTransform, index: int, window: int
) -> RigidTransform:
    """Mean of `poses[index]` and its in-range neighbours within `window`."""
    half = window // 2
    lo, hi = max(0, index - half), min(poses.shape[0], index + half + 1)
    return average_pose(poses[lo:hi], index - lo)


def smooth_poses(poses: RigidTransform, window: int) -> RigidTransform:
    """Average each pose with its in-range neighbours.

    A window of 1 returns the input.
    """
    return RigidTransform.stack(
        [window_average(poses, i, window) for i in range(poses.shape[0])]
    )


def anchor_pose(
    deformation: DeformationModel,
    object_id: int,
    t: float,
    bone: int | None = None,
) -> RigidTransform:
    """World pose of the actor root, or of one of its bones."""
    pose = deformation.root_pose(object_id, t).inverse()
    if bone is not None:
        skeleton = deformation.object(object_id).skeleton
        if not 0 <= bone < skeleton.bone_count:
            raise ValueError(
                f"Object {object_id} has {skeleton.bone_count} bones, "
                f"bone {bone} does not exist."
            )
        pose = pose.compose(bone_pose(skeleton, bone, t))
    return pose


def actor_camera(
    deformation: DeformationModel,
    t: float,
    spec: EmbodiedCameraSpec,
    scale: float = 1.0,
) -> RigidTransform:
    """World-to-camera pose of an actor-attached camera at time t.

    The anchor is averaged over `spec.window` frame steps around t before
    the offset is applied.
    """
    t = check_time(t)
    deformation.object(spec.actor)
    step = 1.0 / max(deformation.frame_count - 1, 1)
    half = spec.window // 2
    before = [t - k * step for k in range(half, 0, -1)]
    before = [max(s, 0.0) for s in before if s > -TIME_TOLERANCE]
    after = [t + k * step for k in range(1, half + 1)]
    after = [min(s, 1.0) for s in after if s < 1.0 + TIME_TOLERANCE]
    times = [*before, t, *after]
    centre = len(before)
    with torch.no_grad():
        poses = RigidTransform.stack(
            [
                anchor_pose(deformation, spec.actor, s, spec.bone)
                for s in times
            ]
        )
        anchor = window_average(poses, centre, spec.window)
        if spec.mode == "overhead":
            return _overhead(anchor, spec, scale)
        return anchor.compose(camera_offset(spec, scale)).inverse()


def _overhead(
    anchor: RigidTransform, spec: EmbodiedCameraSpec, scale: float
) -> RigidTransform:
    if spec.offset_translation is not None:
        lift = _vector(spec.offset_translation) * scale
    else:
        lift = _vector([0.0, -OVERHEAD_HEIGHT * scale, 0.0])
    eye = anchor.translation + lift
    forward = quat_rotate(anchor.rotation, _vector([0.0, 0.0, 1.0]))
    heading = forward * _vector([1.0, 0.0, 1.0])
    if heading.norm() < 1e-9:
        heading = _vector([0.0, 0.0, 1.0])
    # The actor's heading points up the image.
    return look_at(eye, anchor.translation, down=-heading)


@dataclass
class EmbodiedRender:
    frames: List[int] = field(default_factory=list)
    cameras: List[Camera] = field(default_factory=list)
    buffers: List[RenderBuffers] = field(default_factory=list)
    """Render buffers per frame; depth is in dataset units."""


def _intrinsics(
    reconstruction: Reconstruction, camera: Camera | None
) -> Camera:
    if camera is not None:
        return camera
    return reconstruction.frames("train")[0].camera


def render_embodied(
    reconstruction: Reconstruction,
    spec: EmbodiedCameraSpec,
    frames: Sequence[int] | None = None,
    removed_objects: Collection[int] = (),
    camera: Camera | None = None,
    out: str | Path | None = None,
) -> EmbodiedRender:
    """Render the scene from an actor-attached camera.

    Args:
        spec (EmbodiedCameraSpec): which actor and how the camera follows.
        frames (Sequence[int] | None): frame indices, all frames by default.
        removed_objects (Collection[int]): objects left out of the scene.
        camera (Camera | None): intrinsics; the dataset's by default.
        out (str | Path | None): directory for `rgb_#####.png` and
            `depth_#####.hgst` files.
    """
    reconstruction.check_object_ids([spec.actor, *removed_objects])
    intrinsics = _intrinsics(reconstruction, camera)
    if frames is None:
        frames = range(reconstruction.frame_count)
    scale = reconstruction.scene_scale
    result = EmbodiedRender()
    for index in frames:
        t = frame_time(index, reconstruction.frame_count)
        pose = actor_camera(reconstruction.deformation, t, spec, scale)
        view = intrinsics.with_pose(pose)
        buffers = reconstruction.render(view, t, removed_objects)
        buffers.depth = buffers.depth / scale
        result.frames.append(index)
        result.cameras.append(view)
        result.buffers.append(buffers)
        if out is not None:
            out = Path(out)
            out.mkdir(parents=True, exist_ok=True)
            write_png(out / f"rgb_{index:05d}.png", buffers.rgb)
            write_tensor(
                out / f"depth_{index:05d}.hgst", buffers.depth.numpy()
            )
    logger.info(
        f"Rendered {len(result.frames)} {spec.mode} frames following "
        f"object {spec.actor}."
    )
    return result


def _row(frame: int, obj: int, pose: RigidTransform, scale: float) -> dict:
    x, y, z = (pose.translation / scale).tolist()
    qw, qx, qy, qz = pose.rotation.tolist()
    return dict(
        frame=frame, obj=obj, x=x, y=y, z=z, qw=qw, qx=qx, qy=qy, qz=qz
    )


def export_trajectory(
    reconstruction: Reconstruction,
    object_ids: Collection[int] | None = None,
    frames: Sequence[int] | None = None,
    include_camera: bool = True,
    path: str | Path | None = None,
) -> pd.DataFrame:
    """Per-frame world poses of actor roots and of the recording camera.

    Positions are in dataset units. Object rows hold A(t); rows with
    obj = 0 hold the recording camera's camera-to-world pose.
    """
    if object_ids is None:
        object_ids = range(1, reconstruction.object_count + 1)
    reconstruction.check_object_ids(object_ids)
    if frames is None:
        frames = range(reconstruction.frame_count)
    scale = reconstruction.scene_scale
    deformation = reconstruction.deformation
    rows = []
    with torch.no_grad():
        for index in frames:
            t = frame_time(index, reconstruction.frame_count)
            if include_camera:
                camera = deformation.camera_pose(t).inverse()
                rows.append(_row(index, CAMERA_ROW_ID, camera, scale))
            for object_id in object_ids:
                pose = reconstruction.actor_pose(object_id, t)
                rows.append(_row(index, object_id, pose, scale))
    table = pd.DataFrame(rows, columns=TRAJECTORY_COLUMNS)
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(path, index=False, float_format="%.17g")
        logger.info(f"Wrote {len(table)} trajectory rows to {path}.")
    return table


def trajectory_chart(
    reconstruction: Reconstruction,
    trajectory: pd.DataFrame | None = None,
) -> go.Figure:
    """Bird's-eye view (x against z) of every exported path."""
    if trajectory is None:
        trajectory = export_trajectory(reconstruction)
    fig = go.Figure()
    for obj, rows in trajectory.groupby("obj"):
        rows = rows.sort_values("frame")
        fig.add_trace(
            go.Scatter(
                x=rows["x"],
                y=rows["z"],
                mode="lines+markers",
                name="Camera" if obj == CAMERA_ROW_ID else f"Object {obj}",
                line=dict(color=trace_color(int(obj))),
            )
        )
    fig.update_layout(
        title=f"{reconstruction.options.title}: bird's-eye trajectories",
        xaxis_title="x",
        yaxis_title="z",
    )
    return format_fig(fig, equal_axes=True, units="dataset units")
