import math
from typing import Sequence

import torch

from splatengine.geometry import RigidTransform
from splatengine.renderer import Camera
from splatengine.scene import DensifyThresholds, GaussianSet
from splatengine.utils.config import (
    ModelArchitecture,
    RunConfig,
    StageBudgets,
)
from splatengine.utils.data.synthetic import SyntheticSceneSpec


def tiny_spec(**changes) -> SyntheticSceneSpec:
    values = dict(
        frames=3,
        width=16,
        height=12,
        focal=16.0,
        actors=1,
        bone_count=2,
        gaussians_per_bone=8,
        camera_distance=1.5,
        background_cells=4,
    )
    values.update(changes)
    return SyntheticSceneSpec(**values)


def tiny_architecture(**changes) -> ModelArchitecture:
    values = dict(
        pose_frequencies=2,
        pose_width=8,
        pose_depth=2,
        bone_count=2,
        coupling_layers=2,
        coupling_width=8,
        coupling_depth=1,
        latent_dim=2,
        proxy_frequencies=2,
        proxy_width=16,
        proxy_depth=2,
        gaussians_per_object=32,
        background_gaussians=64,
    )
    values.update(changes)
    return ModelArchitecture(**values)


def tiny_config(**changes) -> RunConfig:
    values = dict(
        architecture=tiny_architecture(),
        budgets=StageBudgets(proxy=2, background=2, foreground=2, joint=2),
        densify=DensifyThresholds(interval=1),
        rays_per_batch=32,
        ray_samples=5,
        cycle_samples=16,
        log_every=1,
    )
    values.update(changes)
    return RunConfig(**values)


def gaussian_set(
    centers: Sequence[Sequence[float]],
    scale: float = 0.1,
    opacity_logit: float = 10.0,
    color: Sequence[float] = (1.0, 0.0, 0.0),
    object_id: int = 0,
) -> GaussianSet:
    """Isotropic, axis-aligned Gaussians of one colour."""
    centers = torch.tensor(centers, dtype=torch.float64)
    count = centers.shape[0]
    rotations = torch.zeros(count, 4, dtype=torch.float64)
    rotations[:, 0] = 1.0
    return GaussianSet(
        centers=centers,
        rotations=rotations,
        log_scales=torch.full(
            (count, 3), math.log(scale), dtype=torch.float64
        ),
        opacity_logits=torch.full(
            (count,), opacity_logit, dtype=torch.float64
        ),
        colors=torch.tensor([color] * count, dtype=torch.float64),
        object_ids=torch.full((count,), object_id, dtype=torch.long),
    )


def random_gaussians(
    count: int, seed: int = 0, object_id: int = 0
) -> GaussianSet:
    """Gaussians scattered in front of a camera at the origin."""
    generator = torch.Generator().manual_seed(seed)

    def uniform(*shape: int) -> torch.Tensor:
        return torch.rand(*shape, dtype=torch.float64, generator=generator)

    centers = (uniform(count, 3) - 0.5) * torch.tensor(
        [1.0, 1.0, 0.5], dtype=torch.float64
    )
    centers[:, 2] += 2.0
    rotations = torch.randn(
        count, 4, dtype=torch.float64, generator=generator
    )
    return GaussianSet(
        centers=centers,
        rotations=rotations / rotations.norm(dim=-1, keepdim=True),
        log_scales=torch.log(0.05 + 0.1 * uniform(count, 3)),
        opacity_logits=uniform(count) * 4.0 - 1.0,
        colors=uniform(count, 3),
        object_ids=torch.full((count,), object_id, dtype=torch.long),
    )


def front_camera(
    width: int = 8,
    height: int = 8,
    focal: float = 10.0,
    world_to_camera: RigidTransform | None = None,
) -> Camera:
    """A camera at the origin looking down +z, principal point on a pixel
    centre."""
    return Camera(
        fx=focal,
        fy=focal,
        cx=width // 2,
        cy=height // 2,
        width=width,
        height=height,
        world_to_camera=(
            world_to_camera
            if world_to_camera is not None
            else RigidTransform.identity()
        ),
    )
