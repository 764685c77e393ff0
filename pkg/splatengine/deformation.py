"""The hierarchical warp: root poses, skeletal skinning with dual-quaternion
blending and an invertible coupling-flow residual.

Canonical points reach frame (world) space through

    X' = S⁻¹(X*, ω(t)),  X'' = J(t)(X'),  X(t) = G_o(t)⁻¹(X'')

and return through the reverse chain X* = S(J⁻¹(G_o(t)(X(t))), ω(t)).
"""

from __future__ import annotations

import logging
import math
from typing import Literal, Sequence

import torch
from torch import Tensor, nn

from .geometry import (
    RigidTransform,
    Twist,
    dq_blend,
    quat_conjugate,
    quat_multiply,
    quat_normalize,
    quat_rotate,
    se3_exp,
    se3_log,
)
from .scene import CanonicalModel, GaussianSet
from .utils.config import AblationToggles, ModelArchitecture

logger = logging.getLogger(__name__)

MIN_VARIANCE = 1e-8
MAX_VARIANCE = 1e2
SOFT_SCALE_LIMIT = 5.0

ACTIVATIONS = {
    "relu": nn.ReLU,
    "silu": nn.SiLU,
    "softplus": nn.Softplus,
}

SkinningFrame = Literal["rest", "posed"]
WarpDirection = Literal["canonical_to_frame", "frame_to_canonical"]


def check_time(t: float | Tensor) -> float:
    t = float(t)
    if not 0.0 <= t <= 1.0 or math.isnan(t):
        raise ValueError(f"Normalised time must lie in [0, 1], got {t}.")
    return t


def frame_time(frame: int, frame_count: int) -> float:
    """Normalised time of frame `frame` in a sequence of `frame_count`."""
    if frame_count <= 1:
        return 0.0
    return frame / (frame_count - 1)


def interpolate_table(table: Tensor, t: float) -> Tensor:
    """Linearly interpolate a per-frame table [T, D] at normalised time t."""
    count = table.shape[0]
    if count == 1:
        return table[0]
    position = t * (count - 1)
    lower = min(int(math.floor(position)), count - 2)
    fraction = position - lower
    return (1.0 - fraction) * table[lower] + fraction * table[lower + 1]


def fourier_features(t: Tensor, frequencies: int) -> Tensor:
    """[t, sin(2^k π t), cos(2^k π t)] for k < frequencies."""
    scales = (2.0 ** torch.arange(frequencies, dtype=t.dtype)) * math.pi
    angles = t[..., None] * scales
    return torch.cat(
        [t[..., None], torch.sin(angles), torch.cos(angles)], dim=-1
    )


def build_mlp(
    in_features: int,
    out_features: int,
    width: int,
    depth: int,
    activation: str,
    dtype: torch.dtype,
) -> nn.Sequential:
    layers: list[nn.Module] = []
    size = in_features
    for _ in range(depth):
        layers += [
            nn.Linear(size, width, dtype=dtype),
            ACTIVATIONS[activation](),
        ]
        size = width
    head = nn.Linear(size, out_features, dtype=dtype)
    nn.init.zeros_(head.weight)
    nn.init.zeros_(head.bias)
    layers.append(head)
    return nn.Sequential(*layers)


class FourierPoseNet(nn.Module):
    """Time → twist regressor: MLP(Fourier(t)) plus an interpolated anchor.

    The output layer starts at zero, so a fresh net returns its anchor.
    """

    def __init__(
        self,
        frequencies: int = 6,
        width: int = 256,
        depth: int = 5,
        activation: str = "relu",
        anchors: Tensor | None = None,
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        self.frequencies = frequencies
        self.mlp = build_mlp(
            2 * frequencies + 1, 6, width, depth, activation, dtype
        )
        if anchors is None:
            anchors = torch.zeros(1, 6, dtype=dtype)
        self.register_buffer("anchor_twists", anchors.to(dtype).clone())

    def set_anchors(self, anchors: Tensor) -> None:
        self.anchor_twists = anchors.to(self.anchor_twists.dtype).clone()

    def twist(self, t: float | Tensor) -> Twist:
        t = check_time(t)
        dtype = self.anchor_twists.dtype
        features = fourier_features(
            torch.tensor(t, dtype=dtype), self.frequencies
        )
        vector = self.mlp(features) + interpolate_table(self.anchor_twists, t)
        return Twist.from_vector(vector)

    def forward(self, t: float | Tensor) -> RigidTransform:
        return se3_exp(self.twist(t))


def root_pose(net: FourierPoseNet, t: float | Tensor) -> RigidTransform:
    return net(t)


class Skeleton(nn.Module):
    """B Gaussian-shaped bones with rest poses and per-bone twist nets."""

    def __init__(
        self,
        rest_centers: Tensor,
        rest_rotations: Tensor | None = None,
        rest_variances: Tensor | None = None,
        temperature: float = 0.05,
        frequencies: int = 6,
        width: int = 256,
        depth: int = 5,
        activation: str = "relu",
    ):
        super().__init__()
        dtype = rest_centers.dtype
        count = rest_centers.shape[0]
        if count < 1:
            raise ValueError("A skeleton needs at least one bone.")
        if temperature <= 0:
            raise ValueError(
                f"Skinning temperature must be positive, got {temperature}."
            )
        if rest_rotations is None:
            rest_rotations = torch.zeros(count, 4, dtype=dtype)
            rest_rotations[:, 0] = 1.0
        if rest_variances is None:
            rest_variances = torch.full((count, 3), 0.01, dtype=dtype)
        self.rest_centers = nn.Parameter(rest_centers.clone())
        self.rest_rotations = nn.Parameter(quat_normalize(rest_rotations))
        self.log_variances = nn.Parameter(
            torch.log(rest_variances.clamp(MIN_VARIANCE, MAX_VARIANCE))
        )
        self.log_temperature = nn.Parameter(
            torch.tensor(math.log(temperature), dtype=dtype)
        )
        rest_twists = se3_log(self.rest_transforms().detach())
        self.twist_nets = nn.ModuleList(
            FourierPoseNet(
                frequencies,
                width,
                depth,
                activation,
                anchors=rest_twists.as_vector()[b : b + 1],
                dtype=dtype,
            )
            for b in range(count)
        )

    @property
    def bone_count(self) -> int:
        return self.rest_centers.shape[0]

    @property
    def temperature(self) -> Tensor:
        return torch.exp(self.log_temperature)

    @property
    def variances(self) -> Tensor:
        return torch.exp(self.log_variances).clamp(MIN_VARIANCE, MAX_VARIANCE)

    def rest_transforms(self) -> RigidTransform:
        return RigidTransform(
            quat_normalize(self.rest_rotations), self.rest_centers
        )

    def bone_poses(self, t: float | Tensor) -> RigidTransform:
        """J_b(t) for every bone, shape [B]."""
        return RigidTransform.stack([net(t) for net in self.twist_nets])

    def relative_maps(self, t: float | Tensor) -> RigidTransform:
        """M_b = J_b(t)·rest_b⁻¹, shape [B]."""
        return self.bone_poses(t).compose(self.rest_transforms().inverse())


def bone_pose(skeleton: Skeleton, bone: int, t: float | Tensor):
    return skeleton.twist_nets[bone](t)


def skinning_weights(
    points: Tensor,
    skeleton: Skeleton,
    t: float | Tensor,
    frame: SkinningFrame = "rest",
) -> Tensor:
    """Softmax of negative Mahalanobis distances to each bone, [..., B]."""
    if frame == "rest":
        bones = skeleton.rest_transforms()
    elif frame == "posed":
        # M_b(c*) = J_b(0) and M_b.rotation ⊗ V* = J_b.rotation.
        bones = skeleton.bone_poses(t)
    else:
        raise ValueError(f"Unknown skinning frame '{frame}'.")
    offsets = points[..., None, :] - bones.translation
    local = quat_rotate(quat_conjugate(bones.rotation), offsets)
    distances = (local * local / skeleton.variances).sum(dim=-1)
    return torch.softmax(-distances / skeleton.temperature, dim=-1)


def articulate(
    points: Tensor,
    skeleton: Skeleton,
    t: float | Tensor,
    direction: WarpDirection = "canonical_to_frame",
) -> tuple[Tensor, RigidTransform]:
    """Warp points through the dual-quaternion-blended skeleton.

    Returns:
        tuple[Tensor, RigidTransform]: warped points and the per-point
        blended map that produced them.
    """
    maps = skeleton.relative_maps(t)
    if direction == "canonical_to_frame":
        weights = skinning_weights(points, skeleton, t, "rest")
    elif direction == "frame_to_canonical":
        maps = maps.inverse()
        weights = skinning_weights(points, skeleton, t, "posed")
    else:
        raise ValueError(f"Unknown warp direction '{direction}'.")
    blended = dq_blend(maps, weights)
    return blended.apply(points), blended


class AffineCoupling(nn.Module):
    """One coupling layer: passive axes (mask 1) condition an affine map of
    the active axes (mask 0)."""

    def __init__(
        self,
        passive: Sequence[int],
        latent_dim: int,
        width: int,
        depth: int,
        activation: str = "relu",
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        mask = torch.zeros(3, dtype=dtype)
        mask[list(passive)] = 1.0
        self.register_buffer("mask", mask)
        self.net = build_mlp(
            3 + latent_dim, 6, width, depth, activation, dtype
        )

    def scale_and_shift(
        self, passive_part: Tensor, latent: Tensor
    ) -> tuple[Tensor, Tensor]:
        latent = latent.expand(*passive_part.shape[:-1], latent.shape[-1])
        raw = self.net(torch.cat([passive_part, latent], dim=-1))
        raw_scale, shift = raw.chunk(2, dim=-1)
        active = 1.0 - self.mask
        scale = SOFT_SCALE_LIMIT * torch.tanh(raw_scale / SOFT_SCALE_LIMIT)
        return active * scale, active * shift

    def forward(self, x: Tensor, latent: Tensor) -> Tensor:
        passive_part = x * self.mask
        scale, shift = self.scale_and_shift(passive_part, latent)
        active = (1.0 - self.mask) * (x * torch.exp(scale) + shift)
        return passive_part + active

    def inverse(self, y: Tensor, latent: Tensor) -> Tensor:
        passive_part = y * self.mask
        scale, shift = self.scale_and_shift(passive_part, latent)
        return passive_part + (1.0 - self.mask) * (
            (y - shift) * torch.exp(-scale)
        )


# Passive axes per layer: {x | yz}, {y | zx}, {z | xy}, {xy | z}.
COUPLING_PATTERNS = ((0,), (1,), (2,), (0, 1))


class SoftDeformField(nn.Module):
    """Invertible non-rigid residual conditioned on per-frame latents."""

    def __init__(
        self,
        frame_count: int,
        latent_dim: int = 16,
        layers: int = 4,
        width: int = 128,
        depth: int = 2,
        activation: str = "relu",
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        self.latents = nn.Parameter(
            torch.zeros(max(frame_count, 1), latent_dim, dtype=dtype)
        )
        self.layers = nn.ModuleList(
            AffineCoupling(
                COUPLING_PATTERNS[i % len(COUPLING_PATTERNS)],
                latent_dim,
                width,
                depth,
                activation,
                dtype,
            )
            for i in range(layers)
        )

    @property
    def latent_dim(self) -> int:
        return self.latents.shape[-1]

    def latent(self, t: float | Tensor) -> Tensor:
        return interpolate_table(self.latents, check_time(t))


def soft_apply(
    field: SoftDeformField,
    points: Tensor,
    latent: Tensor,
    direction: Literal["forward", "inverse"] = "forward",
) -> Tensor:
    if latent.shape[-1] != field.latent_dim:
        raise ValueError(
            f"Latent has dimension {latent.shape[-1]}, expected "
            f"{field.latent_dim}."
        )
    if direction == "forward":
        for layer in field.layers:
            points = layer(points, latent)
    elif direction == "inverse":
        for layer in reversed(field.layers):
            points = layer.inverse(points, latent)
    else:
        raise ValueError(f"Unknown soft-field direction '{direction}'.")
    return points


class ObjectDeformation(nn.Module):
    """Root net G_o, skeleton and soft field for one foreground object."""

    def __init__(
        self,
        root: FourierPoseNet,
        skeleton: Skeleton,
        soft: SoftDeformField,
    ):
        super().__init__()
        self.root = root
        self.skeleton = skeleton
        self.soft = soft


class DeformationModel(nn.Module):
    """Background camera net G_b plus one ObjectDeformation per object."""

    def __init__(
        self,
        background_pose: FourierPoseNet,
        objects: Sequence[ObjectDeformation],
        frame_count: int,
        toggles: AblationToggles = AblationToggles(),
        cycle_weights: Sequence[float] | None = None,
    ):
        super().__init__()
        self.background_pose = background_pose
        self.objects = nn.ModuleList(objects)
        self.frame_count = frame_count
        self.toggles = toggles
        if cycle_weights is None:
            cycle_weights = [1.0] * len(objects)
        if len(cycle_weights) != len(objects):
            raise ValueError(
                f"Got {len(cycle_weights)} cycle weights for "
                f"{len(objects)} objects."
            )
        if any(weight < 0 for weight in cycle_weights):
            raise ValueError("Cycle weights must be non-negative.")
        self.cycle_weights = list(cycle_weights)

    @classmethod
    def build(
        cls,
        architecture: ModelArchitecture,
        frame_count: int,
        bone_centers: Sequence[Tensor],
        rest_variances: Sequence[Tensor] | None = None,
        toggles: AblationToggles = AblationToggles(),
        dtype: torch.dtype = torch.float64,
    ) -> "DeformationModel":
        """Assemble a zero-initialised model (the global identity warp).

        Args:
            architecture (ModelArchitecture): network sizes.
            frame_count (int): frames in the sequence.
            bone_centers (Sequence[Tensor]): per-object rest bone centers.
            rest_variances (Sequence[Tensor] | None): per-object rest bone
                variances; 0.01 per axis when omitted.
            toggles (AblationToggles): which components are active.
        """
        a = architecture

        def pose_net() -> FourierPoseNet:
            return FourierPoseNet(
                a.pose_frequencies,
                a.pose_width,
                a.pose_depth,
                a.activation,
                dtype=dtype,
            )

        objects = [
            ObjectDeformation(
                root=pose_net(),
                skeleton=Skeleton(
                    centers.to(dtype),
                    rest_variances=(
                        variances.to(dtype) if variances is not None else None
                    ),
                    temperature=a.temperature,
                    frequencies=a.pose_frequencies,
                    width=a.pose_width,
                    depth=a.pose_depth,
                    activation=a.activation,
                ),
                soft=SoftDeformField(
                    frame_count,
                    a.latent_dim,
                    a.coupling_layers,
                    a.coupling_width,
                    a.coupling_depth,
                    a.activation,
                    dtype,
                ),
            )
            for centers, variances in zip(
                bone_centers,
                rest_variances or [None] * len(bone_centers),
            )
        ]
        return cls(pose_net(), objects, frame_count, toggles)

    @property
    def object_count(self) -> int:
        return len(self.objects)

    def object(self, object_id: int) -> ObjectDeformation:
        if not 1 <= object_id <= self.object_count:
            raise ValueError(
                f"Object id {object_id} does not exist; the model has "
                f"{self.object_count} objects."
            )
        return self.objects[object_id - 1]

    def camera_pose(self, t: float | Tensor) -> RigidTransform:
        """G_b(t), used as the world-to-camera extrinsic."""
        return self.background_pose(t)

    def root_pose(self, object_id: int, t: float | Tensor) -> RigidTransform:
        t = check_time(t)
        obj = self.object(object_id)
        if not self.toggles.root:
            return RigidTransform.identity(
                dtype=obj.root.anchor_twists.dtype
            )
        return root_pose(obj.root, t)

    def _articulate(self, points, object_id, t, direction):
        if not self.toggles.skeleton:
            return points, RigidTransform.identity(
                *points.shape[:-1], dtype=points.dtype
            )
        skeleton = self.object(object_id).skeleton
        return articulate(points, skeleton, t, direction)

    def _soft(self, points, object_id, t, direction):
        if not self.toggles.soft:
            return points
        soft = self.object(object_id).soft
        return soft_apply(soft, points, soft.latent(t), direction)

    def warp_canonical_to_frame(
        self, points: Tensor, t: float | Tensor, object_id: int
    ) -> Tensor:
        return self._warp_to_frame(points, t, object_id)[0]

    def _warp_to_frame(self, points, t, object_id):
        t = check_time(t)
        softened = self._soft(points, object_id, t, "inverse")
        articulated, blended = self._articulate(
            softened, object_id, t, "canonical_to_frame"
        )
        root_inverse = self.root_pose(object_id, t).inverse()
        rigid = root_inverse.compose(blended)
        return root_inverse.apply(articulated), rigid

    def warp_frame_to_canonical(
        self, points: Tensor, t: float | Tensor, object_id: int
    ) -> Tensor:
        t = check_time(t)
        rooted = self.root_pose(object_id, t).apply(points)
        articulated, _ = self._articulate(
            rooted, object_id, t, "frame_to_canonical"
        )
        return self._soft(articulated, object_id, t, "forward")

    def warp_gaussians(
        self, gaussians: GaussianSet, t: float | Tensor, object_id: int
    ) -> GaussianSet:
        """Warp canonical Gaussians of one object to time t.

        Centers follow the full chain; rotations follow the rigid chain
        G_o⁻¹·J only.
        """
        if len(gaussians) == 0:
            return gaussians
        centers, rigid = self._warp_to_frame(gaussians.centers, t, object_id)
        return gaussians.with_updates(
            centers=centers,
            rotations=quat_multiply(rigid.rotation, gaussians.rotations),
        )

    def warp_foreground(
        self, model: CanonicalModel, t: float | Tensor
    ) -> list[GaussianSet]:
        if model.object_count != self.object_count:
            raise ValueError(
                f"Canonical model has {model.object_count} objects, "
                f"deformation has {self.object_count}."
            )
        return [
            self.warp_gaussians(component.snapshot(), t, k + 1)
            for k, component in enumerate(model.foreground)
        ]


def warp_canonical_to_frame(
    points: Tensor,
    t: float | Tensor,
    model: DeformationModel,
    object_id: int,
) -> Tensor:
    return model.warp_canonical_to_frame(points, t, object_id)


def warp_frame_to_canonical(
    points: Tensor,
    t: float | Tensor,
    model: DeformationModel,
    object_id: int,
) -> Tensor:
    return model.warp_frame_to_canonical(points, t, object_id)


def warp_gaussian(
    gaussians: GaussianSet,
    t: float | Tensor,
    model: DeformationModel,
    object_id: int,
) -> GaussianSet:
    return model.warp_gaussians(gaussians, t, object_id)


def kmeans_bone_centers(
    points: Tensor, bone_count: int, seed: int = 0, iterations: int = 20
) -> Tensor:
    """Lloyd's k-means over surface samples for initial bone rests."""
    count = min(bone_count, points.shape[0])
    if count == 0:
        return torch.zeros(1, 3, dtype=points.dtype)
    generator = torch.Generator().manual_seed(seed)
    order = torch.randperm(points.shape[0], generator=generator)
    centers = points[order[:count]].clone()
    for _ in range(iterations):
        assignment = torch.cdist(points, centers).argmin(dim=-1)
        for k in range(count):
            members = points[assignment == k]
            if len(members) > 0:
                centers[k] = members.mean(dim=0)
    return centers


def bone_variances(points: Tensor, centers: Tensor) -> Tensor:
    """Per-axis variance of the points each bone owns (nearest center)."""
    assignment = torch.cdist(points, centers).argmin(dim=-1)
    variances = torch.full_like(centers, 0.01)
    for k in range(centers.shape[0]):
        members = points[assignment == k]
        if len(members) > 1:
            variances[k] = members.var(dim=0)
    return variances.clamp(1e-4, MAX_VARIANCE)
