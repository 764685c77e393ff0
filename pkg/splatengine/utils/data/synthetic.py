"""Synthetic articulated scenes with exact ground truth.

World axes: x right, y down, z away from the main camera. Each actor is a
chain of bones standing on the floor plane y = 0 and growing along -y. All
observation channels are rendered by the package's own rasterizer from the
true model, so zero-noise data is exactly explained by its ground truth.
"""

import json
import logging
import math
import tomllib
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple

import torch
from pydantic import BaseModel, ConfigDict, Field
from torch import Tensor

from splatengine.deformation import DeformationModel, frame_time
from splatengine.geometry import (
    RigidTransform,
    Twist,
    look_at,
    quat_normalize,
    se3_exp,
    se3_log,
)
from splatengine.renderer import Camera, predicted_flow, render_at
from splatengine.scene import CanonicalModel, GaussianSet
from splatengine.utils.config import ConfigError, ModelArchitecture
from splatengine.utils.data.dataset import Dataset, FrameObservation

logger = logging.getLogger(__name__)

VALID_DEPTH_ALPHA = 0.5
ACTOR_SPACING = 0.6
SKIN_TEMPERATURE = 0.05
FLAT_LOG_SCALE = math.log(0.002)
ACTOR_PALETTE = (
    (0.85, 0.25, 0.20),
    (0.20, 0.45, 0.85),
    (0.25, 0.70, 0.30),
    (0.80, 0.60, 0.15),
)


class SyntheticSceneSpec(BaseModel):
    """Layout, motion script, cameras and noise of a synthetic sequence."""

    model_config = ConfigDict(extra="forbid")

    frames: int = Field(60, ge=1, description="Number of training frames.")
    width: int = Field(64, ge=8)
    height: int = Field(48, ge=8)
    focal: float = Field(60.0, gt=0, description="Focal length in pixels.")
    actors: int = Field(1, ge=0, le=len(ACTOR_PALETTE))
    bone_count: int = Field(3, ge=1, description="Bones per actor chain.")
    bone_length: float = Field(0.3, gt=0)
    bone_radius: float = Field(
        0.05, gt=0, description="Radius of the Gaussian cluster per bone."
    )
    gaussians_per_bone: int = Field(48, ge=1)
    root_velocity: Tuple[float, float, float] = Field(
        (0.01, 0.0, 0.0), description="Root translation per frame."
    )
    bend_amplitude: float = Field(
        0.4, ge=0, lt=math.pi / 2, description="Peak joint angle (radians)."
    )
    bend_cycles: float = Field(
        1.0, ge=0, description="Bending periods over the sequence."
    )
    camera_distance: float = Field(2.5, gt=0)
    camera_height: float = Field(0.6, ge=0)
    camera_orbit: float = Field(
        0.2, ge=0, description="Azimuth swept by the camera (radians)."
    )
    eval_baseline: float | None = Field(
        0.1,
        gt=0,
        description="Offset of the evaluation camera to the right; None "
        "disables evaluation views.",
    )
    background_cells: int = Field(
        16, ge=0, description="Gaussians per side of each background plane."
    )
    depth_sigma: float = Field(0.0, ge=0)
    pose_sigma: float = Field(0.0, ge=0)
    seed: int = Field(0, ge=0)


def read_scene_spec(path: str | Path) -> SyntheticSceneSpec:
    """Read a scene spec from TOML, or JSON when the suffix is `.json`."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Scene spec {path} does not exist.")
    if path.suffix == ".json":
        try:
            values = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"Scene spec {path} is not valid JSON: {e}")
    else:
        try:
            values = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"Scene spec {path} is not valid TOML: {e}")
    return SyntheticSceneSpec(**values)


@dataclass
class GroundTruth:
    """The true model behind a synthetic dataset."""

    spec: SyntheticSceneSpec
    model: CanonicalModel
    deformation: DeformationModel
    cameras: List[Camera]
    eval_cameras: List[Camera] = field(default_factory=list)
    root_to_world: List[List[RigidTransform]] = field(default_factory=list)
    """Per frame, the true root-to-world pose of every actor."""

    @property
    def frame_count(self) -> int:
        return len(self.cameras)


def ground_truth_architecture(spec: SyntheticSceneSpec) -> ModelArchitecture:
    """Minimal network sizes; the true motion lives in the anchor tables."""
    return ModelArchitecture(
        pose_frequencies=1,
        pose_width=4,
        pose_depth=1,
        bone_count=spec.bone_count,
        temperature=SKIN_TEMPERATURE,
        coupling_width=4,
        coupling_depth=1,
        latent_dim=2,
        proxy_frequencies=1,
        proxy_width=4,
        proxy_depth=1,
        gaussians_per_object=spec.bone_count * spec.gaussians_per_bone,
        background_gaussians=2 * spec.background_cells**2,
    )


def _rotation_z(angle: Tensor | float, pivot: Tensor) -> RigidTransform:
    """Rotation by `angle` about the z axis through `pivot`."""
    angle = torch.as_tensor(angle, dtype=pivot.dtype)
    half = angle / 2
    zero = torch.zeros((), dtype=pivot.dtype)
    rotation = torch.stack([torch.cos(half), zero, zero, torch.sin(half)])
    turn = RigidTransform(rotation, torch.zeros(3, dtype=pivot.dtype))
    return RigidTransform(rotation, pivot - turn.apply(pivot))


def _bone_rest_centers(spec: SyntheticSceneSpec) -> Tensor:
    index = torch.arange(spec.bone_count, dtype=torch.float64)
    centers = torch.zeros(spec.bone_count, 3, dtype=torch.float64)
    centers[:, 1] = -(index + 0.5) * spec.bone_length
    return centers


def _bone_maps(
    spec: SyntheticSceneSpec, actor: int, frame: int
) -> RigidTransform:
    """Canonical-to-posed map of every bone in the chain at `frame`, [B]."""
    t = frame_time(frame, spec.frames)
    maps = []
    current = RigidTransform.identity()
    for b in range(spec.bone_count):
        phase = 2 * math.pi * (spec.bend_cycles * t) + 0.7 * b + actor
        angle = spec.bend_amplitude * math.sin(phase) / (b + 1)
        joint = torch.tensor(
            [0.0, -b * spec.bone_length, 0.0], dtype=torch.float64
        )
        current = current.compose(_rotation_z(angle, joint))
        maps.append(current)
    return RigidTransform.stack(maps)


def _root_to_world(
    spec: SyntheticSceneSpec, actor: int, frame: int
) -> RigidTransform:
    start = torch.tensor(
        [(actor - (spec.actors - 1) / 2) * ACTOR_SPACING, 0.0, 0.0],
        dtype=torch.float64,
    )
    velocity = torch.tensor(spec.root_velocity, dtype=torch.float64)
    return RigidTransform.from_translation(start + velocity * frame)


def _random_rotations(count: int, generator: torch.Generator) -> Tensor:
    return quat_normalize(
        torch.randn(count, 4, dtype=torch.float64, generator=generator)
    )


def _actor_gaussians(
    spec: SyntheticSceneSpec, actor: int, generator: torch.Generator
) -> GaussianSet:
    per_bone = spec.gaussians_per_bone
    count = spec.bone_count * per_bone
    bone = torch.arange(spec.bone_count).repeat_interleave(per_bone)
    along = (
        torch.rand(count, dtype=torch.float64, generator=generator) - 0.5
    ) * spec.bone_length
    direction = torch.randn(count, 2, dtype=torch.float64, generator=generator)
    direction = direction / direction.norm(dim=-1, keepdim=True)
    centers = torch.stack(
        [
            spec.bone_radius * direction[:, 0],
            -(bone.to(torch.float64) + 0.5) * spec.bone_length + along,
            spec.bone_radius * direction[:, 1],
        ],
        dim=-1,
    )
    base = torch.tensor(ACTOR_PALETTE[actor], dtype=torch.float64)
    shade = 1.0 - 0.2 * bone.to(torch.float64)[:, None] / spec.bone_count
    jitter = 0.05 * torch.rand(
        count, 3, dtype=torch.float64, generator=generator
    )
    return GaussianSet(
        centers=centers,
        rotations=_random_rotations(count, generator),
        log_scales=torch.full(
            (count, 3), math.log(0.6 * spec.bone_radius), dtype=torch.float64
        ),
        opacity_logits=torch.full((count,), 3.0, dtype=torch.float64),
        colors=(base * shade + jitter).clamp(0.0, 1.0),
        object_ids=torch.full((count,), actor + 1, dtype=torch.long),
    )


def _plane(
    cells: int,
    corner: Tensor,
    u: Tensor,
    v: Tensor,
    flat_axis: int,
    colors: Tuple[Tuple[float, float, float], Tuple[float, float, float]],
) -> GaussianSet:
    """A checkered grid of flat Gaussians spanning corner + [0,1]²·(u, v)."""
    steps = (torch.arange(cells, dtype=torch.float64) + 0.5) / cells
    a, b = torch.meshgrid(steps, steps, indexing="ij")
    centers = corner + a.reshape(-1, 1) * u + b.reshape(-1, 1) * v
    count = centers.shape[0]
    spacing = max(float(u.norm()), float(v.norm())) / cells
    log_scales = torch.full(
        (count, 3), math.log(0.7 * spacing), dtype=torch.float64
    )
    log_scales[:, flat_axis] = FLAT_LOG_SCALE
    checker = (
        torch.arange(cells).repeat_interleave(cells)
        + torch.arange(cells).repeat(cells)
    ) % 2
    palette = torch.tensor(colors, dtype=torch.float64)
    rotations = torch.zeros(count, 4, dtype=torch.float64)
    rotations[:, 0] = 1.0
    return GaussianSet(
        centers=centers,
        rotations=rotations,
        log_scales=log_scales,
        opacity_logits=torch.full((count,), 4.0, dtype=torch.float64),
        colors=palette[checker],
        object_ids=torch.zeros(count, dtype=torch.long),
    )


def _background(spec: SyntheticSceneSpec) -> GaussianSet:
    cells = spec.background_cells
    if cells == 0:
        return GaussianSet.empty()
    half = spec.camera_distance
    floor = _plane(
        cells,
        torch.tensor([-half, 0.0, -0.5 * half], dtype=torch.float64),
        torch.tensor([2 * half, 0.0, 0.0], dtype=torch.float64),
        torch.tensor([0.0, 0.0, 1.5 * half], dtype=torch.float64),
        flat_axis=1,
        colors=((0.55, 0.55, 0.50), (0.35, 0.35, 0.32)),
    )
    wall = _plane(
        cells,
        torch.tensor([-half, -half, half], dtype=torch.float64),
        torch.tensor([2 * half, 0.0, 0.0], dtype=torch.float64),
        torch.tensor([0.0, half, 0.0], dtype=torch.float64),
        flat_axis=2,
        colors=((0.30, 0.50, 0.65), (0.70, 0.75, 0.80)),
    )
    return GaussianSet.cat([floor, wall])


def _camera(spec: SyntheticSceneSpec, frame: int) -> Camera:
    t = frame_time(frame, spec.frames)
    azimuth = spec.camera_orbit * (t - 0.5)
    eye = torch.tensor(
        [
            spec.camera_distance * math.sin(azimuth),
            -spec.camera_height,
            -spec.camera_distance * math.cos(azimuth),
        ],
        dtype=torch.float64,
    )
    target = torch.tensor(
        [0.0, -0.5 * spec.bone_count * spec.bone_length, 0.0],
        dtype=torch.float64,
    )
    return Camera(
        fx=spec.focal,
        fy=spec.focal,
        cx=spec.width / 2,
        cy=spec.height / 2,
        width=spec.width,
        height=spec.height,
        world_to_camera=look_at(eye, target),
    )


def _eval_camera(spec: SyntheticSceneSpec, camera: Camera) -> Camera:
    rig = RigidTransform.from_translation(
        torch.tensor([-spec.eval_baseline, 0.0, 0.0], dtype=torch.float64)
    )
    return camera.with_pose(rig.compose(camera.world_to_camera))


def _twist_table(transforms: List[RigidTransform]) -> Tensor:
    return se3_log(RigidTransform.stack(transforms)).as_vector()


def build_ground_truth(
    spec: SyntheticSceneSpec, seed: int | None = None
) -> GroundTruth:
    """The true canonical model, warp and cameras of a scene spec."""
    seed = spec.seed if seed is None else seed
    generator = torch.Generator().manual_seed(seed)
    frames = range(spec.frames)
    rest = _bone_rest_centers(spec)

    model = CanonicalModel(
        _background(spec),
        [_actor_gaussians(spec, k, generator) for k in range(spec.actors)],
    )
    deformation = DeformationModel.build(
        ground_truth_architecture(spec),
        spec.frames,
        [rest] * spec.actors,
    )
    cameras = [_camera(spec, i) for i in frames]
    root_to_world = [
        [_root_to_world(spec, k, i) for k in range(spec.actors)]
        for i in frames
    ]

    variances = torch.tensor(
        [
            (spec.bone_radius) ** 2,
            (0.5 * spec.bone_length) ** 2,
            (spec.bone_radius) ** 2,
        ],
        dtype=torch.float64,
    ).expand(spec.bone_count, 3)
    with torch.no_grad():
        deformation.background_pose.set_anchors(
            _twist_table([camera.world_to_camera for camera in cameras])
        )
        for k, obj in enumerate(deformation.objects):
            obj.root.set_anchors(
                _twist_table([poses[k].inverse() for poses in root_to_world])
            )
            obj.skeleton.log_variances.copy_(torch.log(variances))
            rest_poses = obj.skeleton.rest_transforms()
            posed = [
                _bone_maps(spec, k, i).compose(rest_poses) for i in frames
            ]
            for b, net in enumerate(obj.skeleton.twist_nets):
                net.set_anchors(_twist_table([pose[b] for pose in posed]))

    eval_cameras = (
        [_eval_camera(spec, camera) for camera in cameras]
        if spec.eval_baseline is not None
        else []
    )
    return GroundTruth(
        spec=spec,
        model=model,
        deformation=deformation,
        cameras=cameras,
        eval_cameras=eval_cameras,
        root_to_world=root_to_world,
    )


def analytic_flow(ground_truth: GroundTruth, frame: int) -> Tensor:
    """Optical flow from `frame` to `frame + 1`, [H, W, 2] pixels.

    Every Gaussian center is projected at both times with the true warp and
    cameras; static background centers move only by camera reprojection.
    """
    count = ground_truth.frame_count
    if not 0 <= frame < count - 1:
        raise ValueError(
            f"Flow needs frames {frame} and {frame + 1}, but the sequence "
            f"has {count} frames."
        )
    with torch.no_grad():
        return predicted_flow(
            ground_truth.model,
            ground_truth.deformation,
            ground_truth.cameras[frame],
            ground_truth.cameras[frame + 1],
            frame_time(frame, count),
            frame_time(frame + 1, count),
        )


def _observe(
    ground_truth: GroundTruth,
    camera: Camera,
    frame: int,
    generator: torch.Generator,
    with_flow: bool,
) -> FrameObservation:
    spec = ground_truth.spec
    t = frame_time(frame, spec.frames)
    with torch.no_grad():
        buffers = render_at(
            ground_truth.model, ground_truth.deformation, camera, t
        )
    depth = torch.where(buffers.alpha > VALID_DEPTH_ALPHA, buffers.depth, 0.0)
    if spec.depth_sigma > 0:
        noise = spec.depth_sigma * torch.randn(
            depth.shape, dtype=depth.dtype, generator=generator
        )
        depth = torch.where(depth > 0, (depth + noise).clamp(min=1e-6), 0.0)
    coarse = list(ground_truth.root_to_world[frame])
    if spec.pose_sigma > 0:
        coarse = [
            pose.compose(
                se3_exp(
                    Twist.from_vector(
                        spec.pose_sigma
                        * torch.randn(
                            6, dtype=torch.float64, generator=generator
                        )
                    )
                )
            )
            for pose in coarse
        ]
    flow = None
    if with_flow and frame < spec.frames - 1:
        flow = analytic_flow(ground_truth, frame)
    return FrameObservation(
        rgb=buffers.rgb.clamp(0.0, 1.0),
        depth=depth,
        masks=buffers.object_mask.clamp(0.0, 1.0),
        flow_to_next=flow,
        camera=camera,
        time_index=frame,
        coarse_root_poses=coarse if spec.actors > 0 else None,
    )


def generate_synthetic(
    spec: SyntheticSceneSpec, seed: int | None = None
) -> Tuple[Dataset, GroundTruth]:
    """Render a synthetic sequence and its evaluation views.

    Args:
        spec (SyntheticSceneSpec): the scene description.
        seed (int | None): overrides `spec.seed` when given.

    Returns:
        Tuple[Dataset, GroundTruth]: the observations and the true model.
    """
    seed = spec.seed if seed is None else seed
    ground_truth = build_ground_truth(spec, seed)
    # Noise draws use their own stream so the scene layout is noise-free.
    generator = torch.Generator().manual_seed(seed + 1)
    frames = [
        _observe(ground_truth, camera, i, generator, with_flow=True)
        for i, camera in enumerate(ground_truth.cameras)
    ]
    eval_frames = [
        _observe(ground_truth, camera, i, generator, with_flow=False)
        for i, camera in enumerate(ground_truth.eval_cameras)
    ]
    logger.info(
        f"Generated synthetic sequence with {spec.frames} frames, "
        f"{spec.actors} actors and {len(ground_truth.model.background)} "
        "background Gaussians."
    )
    dataset = Dataset(
        frames=frames,
        eval_frames=eval_frames,
        object_count=spec.actors,
        name=f"synthetic-{seed}",
    )
    return dataset, ground_truth
