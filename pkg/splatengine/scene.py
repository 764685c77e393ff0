"""Gaussian primitives, the canonical model and scene composition."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Collection, Sequence

import numpy as np
import torch
from plyfile import PlyData, PlyElement
from pydantic import BaseModel, Field
from torch import Tensor, nn

from .geometry import (
    RigidTransform,
    check_finite,
    quat_multiply,
    quat_normalize,
    quat_to_matrix,
)

logger = logging.getLogger(__name__)

MIN_LOG_SCALE = math.log(1e-6)
MAX_LOG_SCALE = math.log(1e3)


class ObjectIdCollisionError(ValueError):
    """Two composed Gaussian sets claim the same object id."""


class UnknownObjectError(ValueError):
    """An object id outside 1..object_count was requested."""


def check_object_ids(object_ids: Collection[int], object_count: int) -> None:
    unknown = sorted(set(object_ids) - set(range(1, object_count + 1)))
    if unknown:
        raise UnknownObjectError(
            f"Object ids {unknown} do not exist; the scene has "
            f"{object_count} objects."
        )


@dataclass(frozen=True)
class GaussianSet:
    """A batch of anisotropic Gaussians stored as parallel tensors.

    A single primitive is a set of length one.
    """

    centers: Tensor
    """Centers, [N, 3], scene units."""
    rotations: Tensor
    """Unit quaternions (w, x, y, z), [N, 4]."""
    log_scales: Tensor
    """Per-axis log standard deviations, [N, 3]."""
    opacity_logits: Tensor
    """Pre-sigmoid opacities, [N]."""
    colors: Tensor
    """View-independent RGB in [0, 1], [N, 3]."""
    object_ids: Tensor
    """0 for background, k ≥ 1 for foreground object k, [N] int64."""

    def __len__(self) -> int:
        return self.centers.shape[0]

    @classmethod
    def empty(cls, dtype=torch.float64) -> "GaussianSet":
        return cls(
            centers=torch.zeros(0, 3, dtype=dtype),
            rotations=torch.zeros(0, 4, dtype=dtype),
            log_scales=torch.zeros(0, 3, dtype=dtype),
            opacity_logits=torch.zeros(0, dtype=dtype),
            colors=torch.zeros(0, 3, dtype=dtype),
            object_ids=torch.zeros(0, dtype=torch.long),
        )

    @classmethod
    def cat(cls, sets: Sequence["GaussianSet"]) -> "GaussianSet":
        if len(sets) == 0:
            return cls.empty()
        return cls(
            **{
                f.name: torch.cat([getattr(s, f.name) for s in sets], dim=0)
                for f in fields(cls)
            }
        )

    @property
    def opacities(self) -> Tensor:
        return torch.sigmoid(self.opacity_logits)

    @property
    def scales(self) -> Tensor:
        return torch.exp(self.log_scales)

    @property
    def dtype(self) -> torch.dtype:
        return self.centers.dtype

    def select(self, index: Tensor) -> "GaussianSet":
        return GaussianSet(
            **{f.name: getattr(self, f.name)[index] for f in fields(self)}
        )

    def detach(self) -> "GaussianSet":
        return GaussianSet(
            **{f.name: getattr(self, f.name).detach() for f in fields(self)}
        )

    def with_updates(self, **changes: Tensor) -> "GaussianSet":
        return replace(self, **changes)

    def check(self) -> None:
        for f in fields(self):
            if f.name != "object_ids":
                check_finite(getattr(self, f.name), f"Gaussian {f.name}")


def covariance(gaussians: GaussianSet) -> Tensor:
    """Σ = R·diag(s²)·Rᵀ for every primitive, [N, 3, 3]."""
    rotation = quat_to_matrix(gaussians.rotations)
    variances = torch.exp(2.0 * gaussians.log_scales)
    return rotation @ (variances[..., None] * rotation.transpose(-1, -2))


def transform_gaussian(
    transform: RigidTransform, gaussians: GaussianSet
) -> GaussianSet:
    """Move Gaussians rigidly. `transform` is a single map or one per
    primitive; scale, opacity and colour are unchanged."""
    return gaussians.with_updates(
        centers=transform.apply(gaussians.centers),
        rotations=quat_multiply(transform.rotation, gaussians.rotations),
    )


def compose_scene(
    background: GaussianSet,
    warped_foreground: Sequence[GaussianSet],
    removed_objects: Collection[int] = (),
) -> GaussianSet:
    """S(t): background first, then each foreground set in object-id order.

    Args:
        background (GaussianSet): static background, object id 0.
        warped_foreground (Sequence[GaussianSet]): per-object sets already
            warped to the frame.
        removed_objects (Collection[int]): object ids left out of the scene.

    Returns:
        GaussianSet: the composed scene.
    """
    claimed: dict[int, int] = {}
    keyed = []
    for position, gaussians in enumerate([background, *warped_foreground]):
        ids = set(gaussians.object_ids.unique().tolist())
        for object_id in ids:
            if object_id in claimed:
                raise ObjectIdCollisionError(
                    f"Object id {object_id} appears in set "
                    f"{claimed[object_id]} and set {position}."
                )
            claimed[object_id] = position
        if position == 0:
            continue
        if len(gaussians) == 0:
            continue
        keyed.append((min(ids), gaussians))
    keyed.sort(key=lambda item: item[0])
    parts = [background] + [
        gaussians for object_id, gaussians in keyed
        if object_id not in removed_objects
    ]
    return GaussianSet.cat(parts)


class DensifyThresholds(BaseModel):
    prune_opacity: float = Field(
        0.005, ge=0, description="Opacity below which primitives are removed."
    )
    grad_threshold: float = Field(
        2e-4,
        ge=0,
        description=(
            "Average positional gradient above which primitives are "
            "densified."
        ),
    )
    split_factor: float = Field(
        1.6, gt=1, description="Scale divisor applied to split children."
    )
    large_scale: float = Field(
        0.01,
        gt=0,
        description=(
            "Largest-axis scale (scene units) separating split from clone."
        ),
    )
    interval: int = Field(
        200, ge=1, description="Iterations between densification passes."
    )


class GaussianParams(nn.Module):
    """Trainable Gaussians for one component (background or one object)."""

    PARAMETER_NAMES = (
        "centers",
        "rotations",
        "log_scales",
        "opacity_logits",
        "colors",
    )

    def __init__(self, gaussians: GaussianSet, object_id: int):
        super().__init__()
        self.object_id = object_id
        for name in self.PARAMETER_NAMES:
            setattr(
                self,
                name,
                nn.Parameter(getattr(gaussians, name).detach().clone()),
            )

    def __len__(self) -> int:
        return self.centers.shape[0]

    @classmethod
    def empty(cls, object_id: int, dtype=torch.float64) -> "GaussianParams":
        return cls(GaussianSet.empty(dtype), object_id)

    def snapshot(self) -> GaussianSet:
        return GaussianSet(
            centers=self.centers,
            rotations=quat_normalize(self.rotations),
            log_scales=self.log_scales,
            opacity_logits=self.opacity_logits,
            colors=self.colors,
            object_ids=torch.full(
                (len(self),), self.object_id, dtype=torch.long
            ),
        )

    @torch.no_grad()
    def enforce_invariants(self) -> None:
        self.log_scales.clamp_(MIN_LOG_SCALE, MAX_LOG_SCALE)
        self.rotations.copy_(quat_normalize(self.rotations))
        self.colors.clamp_(0.0, 1.0)

    def replace_rows(
        self,
        keep: Tensor,
        additions: GaussianSet,
        optimizer: torch.optim.Optimizer | None = None,
    ) -> None:
        """Keep rows `keep` (int64 indices, in order) and append `additions`.

        Adam moments follow their rows; appended rows start from zero.
        """
        for name in self.PARAMETER_NAMES:
            old = getattr(self, name)
            extension = getattr(additions, name).detach().to(old.dtype)
            new = nn.Parameter(torch.cat([old.detach()[keep], extension]))
            if optimizer is not None:
                _move_optimizer_state(optimizer, old, new, keep, extension)
            setattr(self, name, new)


def _move_optimizer_state(
    optimizer: torch.optim.Optimizer,
    old: nn.Parameter,
    new: nn.Parameter,
    keep: Tensor,
    extension: Tensor,
) -> None:
    for group in optimizer.param_groups:
        for position, param in enumerate(group["params"]):
            if param is not old:
                continue
            group["params"][position] = new
            stored = optimizer.state.pop(old, None)
            if stored is None:
                return
            for key in ("exp_avg", "exp_avg_sq"):
                stored[key] = torch.cat(
                    [stored[key][keep], torch.zeros_like(extension)]
                )
            optimizer.state[new] = stored
            return


class CanonicalModel(nn.Module):
    """Background H plus per-object canonical foreground sets."""

    def __init__(
        self,
        background: GaussianSet | None = None,
        foreground: Sequence[GaussianSet] = (),
        dtype=torch.float64,
    ):
        super().__init__()
        self.background = GaussianParams(
            background if background is not None else GaussianSet.empty(dtype),
            object_id=0,
        )
        self.foreground = nn.ModuleList(
            GaussianParams(gaussians, object_id=k + 1)
            for k, gaussians in enumerate(foreground)
        )

    @property
    def object_count(self) -> int:
        return len(self.foreground)

    def components(self) -> list[GaussianParams]:
        return [self.background, *self.foreground]

    def enforce_invariants(self) -> None:
        for component in self.components():
            component.enforce_invariants()


def densify_and_prune(
    params: GaussianParams,
    grad_stats: Tensor,
    thresholds: DensifyThresholds = DensifyThresholds(),
    optimizer: torch.optim.Optimizer | None = None,
) -> GaussianParams:
    """Clone or split high-gradient primitives and drop transparent ones.

    Args:
        params (GaussianParams): the component to edit in place.
        grad_stats (Tensor): average positional-gradient norm per primitive.
        thresholds (DensifyThresholds): densification settings.
        optimizer: optimizer whose state is remapped to the new rows.

    Returns:
        GaussianParams: `params`, resized.
    """
    count = len(params)
    if count == 0:
        return params
    with torch.no_grad():
        current = params.snapshot().detach()
        high = grad_stats.reshape(-1) > thresholds.grad_threshold
        large = current.scales.max(dim=-1).values > thresholds.large_scale
        clone = high & ~large
        split = high & large

        split_set = current.select(split)
        axis = split_set.log_scales.argmax(dim=-1)
        sigma = split_set.scales.gather(-1, axis[:, None])
        local = torch.zeros_like(split_set.centers)
        local.scatter_(-1, axis[:, None], 0.5 * sigma)
        offset = quat_to_matrix(split_set.rotations) @ local[..., None]
        offset = offset[..., 0]
        child_log_scales = (
            split_set.log_scales - math.log(thresholds.split_factor)
        ).clamp(MIN_LOG_SCALE, MAX_LOG_SCALE)
        children = [
            split_set.with_updates(
                centers=split_set.centers + sign * offset,
                log_scales=child_log_scales,
            )
            for sign in (1.0, -1.0)
        ]
        additions = GaussianSet.cat([current.select(clone), *children])

        keep_mask = ~split
        all_opacity = torch.cat(
            [current.opacities[keep_mask], additions.opacities]
        )
        keep = torch.nonzero(keep_mask).flatten()
        params.replace_rows(keep, additions, optimizer)

        survivors = all_opacity >= thresholds.prune_opacity
        if not survivors.all():
            params.replace_rows(
                torch.nonzero(survivors).flatten(),
                GaussianSet.empty(current.dtype),
                optimizer,
            )
    logger.debug(
        f"Object {params.object_id}: cloned {int(clone.sum())}, split "
        f"{int(split.sum())}, pruned {int((~survivors).sum())}; "
        f"{count} -> {len(params)} primitives."
    )
    return params


PLY_PROPERTIES = (
    ["x", "y", "z"]
    + [f"rot_{i}" for i in range(4)]
    + [f"scale_{i}" for i in range(3)]
    + ["opacity", "red", "green", "blue"]
)


def save_ply(gaussians: GaussianSet, path: str | Path) -> None:
    """Write a composed scene as a binary little-endian PLY."""
    gaussians = gaussians.detach()
    dtype = [(name, "f8") for name in PLY_PROPERTIES] + [("object_id", "i4")]
    elements = np.empty(len(gaussians), dtype=dtype)
    columns = torch.cat(
        [
            gaussians.centers,
            gaussians.rotations,
            gaussians.log_scales,
            gaussians.opacity_logits[:, None],
            gaussians.colors,
        ],
        dim=-1,
    ).numpy()
    for i, name in enumerate(PLY_PROPERTIES):
        elements[name] = columns[:, i]
    elements["object_id"] = gaussians.object_ids.numpy()
    PlyData(
        [PlyElement.describe(elements, "vertex")], byte_order="<"
    ).write(str(path))
    logger.info(f"Wrote {len(gaussians)} Gaussians to {path}.")


def load_ply(path: str | Path, dtype=torch.float64) -> GaussianSet:
    vertex = PlyData.read(str(path))["vertex"]
    columns = np.stack(
        [np.asarray(vertex[name]) for name in PLY_PROPERTIES], axis=-1
    )
    values = torch.from_numpy(columns.astype(np.float64)).to(dtype)
    return GaussianSet(
        centers=values[:, 0:3],
        rotations=values[:, 3:7],
        log_scales=values[:, 7:10],
        opacity_logits=values[:, 10],
        colors=values[:, 11:14],
        object_ids=torch.from_numpy(
            np.asarray(vertex["object_id"]).astype(np.int64)
        ),
    )
