"""Deterministic CPU tile rasterizer for Gaussian splats.

Pixel (x, y) is sampled at image coordinates (x, y). Cameras follow the
OpenCV convention: +z forward, +y down.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Collection, Sequence

import torch
from torch import Tensor

from .geometry import RigidTransform, quat_to_matrix
from .scene import GaussianSet, compose_scene, covariance

if TYPE_CHECKING:
    from .deformation import DeformationModel
    from .scene import CanonicalModel

logger = logging.getLogger(__name__)

TILE_SIZE = 16
LOW_PASS = 0.3
ALPHA_CLAMP = 0.999
TRANSMITTANCE_CUTOFF = 1e-4
Z_NEAR = 0.01
CHUNK_BUDGET = 1 << 22
"""Largest pixel × splat product composited at once."""


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: RigidTransform = field(
        default_factory=RigidTransform.identity
    )
    z_near: float = Z_NEAR

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(
                f"Focal lengths must be positive, got ({self.fx}, {self.fy})."
            )
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError(
                f"Principal point ({self.cx}, {self.cy}) lies outside the "
                f"{self.width}x{self.height} image."
            )

    def with_pose(self, world_to_camera: RigidTransform) -> "Camera":
        return Camera(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.width,
            self.height,
            world_to_camera,
            self.z_near,
        )

    def center(self) -> Tensor:
        """Camera position in world coordinates."""
        return self.world_to_camera.inverse().translation

    def project_points(self, points: Tensor) -> tuple[Tensor, Tensor]:
        """World points to pixel coordinates [N, 2] and camera depth [N]."""
        local = self.world_to_camera.apply(points)
        z = local[..., 2]
        safe_z = torch.where(z > self.z_near, z, torch.ones_like(z))
        u = self.fx * local[..., 0] / safe_z + self.cx
        v = self.fy * local[..., 1] / safe_z + self.cy
        return torch.stack([u, v], dim=-1), z

    def backproject(self, depth: Tensor) -> Tensor:
        """Depth map [H, W] to world points [H, W, 3]."""
        dtype = depth.dtype
        ys, xs = torch.meshgrid(
            torch.arange(self.height, dtype=dtype),
            torch.arange(self.width, dtype=dtype),
            indexing="ij",
        )
        local = torch.stack(
            [
                (xs - self.cx) / self.fx * depth,
                (ys - self.cy) / self.fy * depth,
                depth,
            ],
            dim=-1,
        )
        return self.world_to_camera.inverse().apply(local)


@dataclass
class Projection:
    means2d: Tensor
    cov2d: Tensor
    depths: Tensor
    radii: Tensor
    visible: Tensor
    """False where the primitive is culled."""


@dataclass
class RenderBuffers:
    rgb: Tensor
    """[H, W, 3] in [0, 1]."""
    depth: Tensor
    """[H, W], alpha-normalised expected depth; 0 where nothing renders."""
    alpha: Tensor
    """[H, W] in [0, 1]."""
    object_mask: Tensor
    """[H, W, N_objects]; channel k-1 holds object k."""
    normal: Tensor
    """[H, W, 3] unit world-frame normals, 0 where nothing renders."""
    features: Tensor | None = None
    """[H, W, F] alpha-normalised extra features when requested."""


def project(camera: Camera, gaussians: GaussianSet) -> Projection:
    """EWA projection with a low-pass filter and 3σ viewport culling."""
    rotation = camera.world_to_camera.matrix()
    local = camera.world_to_camera.apply(gaussians.centers)
    x, y, z = local.unbind(-1)
    in_front = z > camera.z_near
    safe_z = torch.where(in_front, z, torch.ones_like(z))

    zeros = torch.zeros_like(z)
    jacobian = torch.stack(
        [
            torch.stack(
                [camera.fx / safe_z, zeros, -camera.fx * x / safe_z**2], -1
            ),
            torch.stack(
                [zeros, camera.fy / safe_z, -camera.fy * y / safe_z**2], -1
            ),
        ],
        dim=-2,
    )
    projection = jacobian @ rotation
    cov2d = projection @ covariance(gaussians) @ projection.transpose(-1, -2)
    cov2d = cov2d + LOW_PASS * torch.eye(2, dtype=cov2d.dtype)

    means2d = torch.stack(
        [
            camera.fx * x / safe_z + camera.cx,
            camera.fy * y / safe_z + camera.cy,
        ],
        dim=-1,
    )
    a, b, d = cov2d[..., 0, 0], cov2d[..., 0, 1], cov2d[..., 1, 1]
    half_trace = 0.5 * (a + d)
    spread = torch.sqrt((0.25 * (a - d) ** 2 + b * b).clamp(min=0.0))
    radii = 3.0 * torch.sqrt(half_trace + spread)

    u, v = means2d.detach().unbind(-1)
    r = radii.detach()
    visible = (
        in_front
        & (u + r > 0)
        & (u - r < camera.width - 1)
        & (v + r > 0)
        & (v - r < camera.height - 1)
    )
    return Projection(means2d, cov2d, z, radii, visible)


def gaussian_normals(camera: Camera, gaussians: GaussianSet) -> Tensor:
    """Minimum-scale axis of each Gaussian, flipped to face the camera."""
    axes = quat_to_matrix(gaussians.rotations)
    shortest = gaussians.log_scales.argmin(dim=-1)
    normal = torch.gather(
        axes, -1, shortest[:, None, None].expand(-1, 3, 1)
    ).squeeze(-1)
    towards = camera.center() - gaussians.centers
    facing = (normal * towards).sum(dim=-1, keepdim=True)
    return torch.where(facing < 0, -normal, normal)


def _tile_lists(
    projection: Projection, tiles_x: int, tiles_y: int
) -> tuple[Tensor, Tensor, Tensor]:
    """Splat indices sorted by (tile, depth rank), with per-tile counts and
    offsets."""
    visible = torch.nonzero(projection.visible).flatten()
    order = torch.argsort(projection.depths.detach(), stable=True)
    rank = torch.empty_like(order)
    rank[order] = torch.arange(len(order))

    means = projection.means2d.detach()[visible]
    radii = projection.radii.detach()[visible]
    x0 = ((means[:, 0] - radii) / TILE_SIZE).floor().clamp(0, tiles_x - 1)
    x1 = ((means[:, 0] + radii) / TILE_SIZE).floor().clamp(0, tiles_x - 1)
    y0 = ((means[:, 1] - radii) / TILE_SIZE).floor().clamp(0, tiles_y - 1)
    y1 = ((means[:, 1] + radii) / TILE_SIZE).floor().clamp(0, tiles_y - 1)
    x0, x1, y0, y1 = (c.long() for c in (x0, x1, y0, y1))
    span_x = x1 - x0 + 1
    per_splat = span_x * (y1 - y0 + 1)

    owner = torch.repeat_interleave(
        torch.arange(len(visible)), per_splat
    )
    starts = torch.cumsum(per_splat, 0) - per_splat
    local = torch.arange(int(per_splat.sum())) - starts[owner]
    tile_x = x0[owner] + local % span_x[owner]
    tile_y = y0[owner] + torch.div(local, span_x[owner], rounding_mode="floor")
    tile = tile_y * tiles_x + tile_x

    splat = visible[owner]
    keys = tile * max(len(order), 1) + rank[splat]
    keys, permutation = torch.sort(keys, stable=True)
    splat = splat[permutation]
    counts = torch.bincount(tile[permutation], minlength=tiles_x * tiles_y)
    offsets = torch.cumsum(counts, 0) - counts
    return splat, counts, offsets


def _chunks(counts: Tensor) -> list[tuple[int, int]]:
    chunks = []
    start = 0
    total = len(counts)
    per_tile = TILE_SIZE * TILE_SIZE
    while start < total:
        stop = start + 1
        widest = int(counts[start])
        while stop < total:
            widest_next = max(widest, int(counts[stop]))
            if (stop - start + 1) * per_tile * widest_next > CHUNK_BUDGET:
                break
            widest = widest_next
            stop += 1
        chunks.append((start, stop))
        start = stop
    return chunks


def _composite_chunk(
    start: int,
    stop: int,
    tiles_x: int,
    splat: Tensor,
    counts: Tensor,
    offsets: Tensor,
    means2d: Tensor,
    conics: Tensor,
    opacities: Tensor,
    payload: Tensor,
) -> Tensor:
    """Front-to-back compositing for tiles [start, stop).

    Returns [tiles, 256, C + 1]: weighted payload sums and accumulated alpha.
    """
    dtype = payload.dtype
    tiles = torch.arange(start, stop)
    width = int(counts[start:stop].max()) if stop > start else 0
    pixels = TILE_SIZE * TILE_SIZE
    if width == 0:
        return torch.zeros(
            len(tiles), pixels, payload.shape[-1] + 1, dtype=dtype
        )

    slots = torch.arange(width)
    filled = slots[None, :] < counts[tiles][:, None]
    position = (offsets[tiles][:, None] + slots[None, :]).clamp(
        max=max(len(splat) - 1, 0)
    )
    index = torch.where(filled, splat[position], torch.zeros_like(position))

    py, px = torch.meshgrid(
        torch.arange(TILE_SIZE, dtype=dtype),
        torch.arange(TILE_SIZE, dtype=dtype),
        indexing="ij",
    )
    tile_x = (tiles % tiles_x).to(dtype) * TILE_SIZE
    tile_y = torch.div(tiles, tiles_x, rounding_mode="floor").to(dtype)
    tile_y = tile_y * TILE_SIZE
    pixel_x = tile_x[:, None] + px.reshape(-1)[None, :]
    pixel_y = tile_y[:, None] + py.reshape(-1)[None, :]

    mean = means2d[index]
    dx = pixel_x[:, :, None] - mean[:, None, :, 0]
    dy = pixel_y[:, :, None] - mean[:, None, :, 1]
    conic = conics[index]
    power = (
        conic[:, None, :, 0] * dx * dx
        + 2.0 * conic[:, None, :, 1] * dx * dy
        + conic[:, None, :, 2] * dy * dy
    )
    raw = opacities[index][:, None, :] * torch.exp(-0.5 * power)
    raw = torch.where(filled[:, None, :], raw, torch.zeros_like(raw))
    alpha = torch.where(
        raw < ALPHA_CLAMP, raw, torch.full_like(raw, ALPHA_CLAMP)
    )

    transmittance = torch.cumprod(1.0 - alpha, dim=-1)
    before = torch.cat(
        [torch.ones_like(transmittance[..., :1]), transmittance[..., :-1]],
        dim=-1,
    )
    weights = alpha * before
    weights = torch.where(
        before >= TRANSMITTANCE_CUTOFF, weights, torch.zeros_like(weights)
    )
    accumulated = torch.einsum("tpk,tkc->tpc", weights, payload[index])
    return torch.cat(
        [accumulated, weights.sum(dim=-1, keepdim=True)], dim=-1
    )


def rasterize(
    gaussians: GaussianSet,
    camera: Camera,
    object_count: int | None = None,
    background: Sequence[float] = (0.0, 0.0, 0.0),
    features: Tensor | None = None,
    threads: int = 1,
) -> RenderBuffers:
    """Render a composed scene.

    Args:
        gaussians (GaussianSet): the scene.
        camera (Camera): viewpoint.
        object_count (int | None): object-mask channels; defaults to the
            largest object id present.
        background (Sequence[float]): colour behind the splats.
        features (Tensor | None): extra per-Gaussian features [N, F],
            splatted and alpha-normalised like depth.
        threads (int): worker threads; output is identical for any count.

    Returns:
        RenderBuffers: colour, depth, alpha, object mask and normal buffers.
    """
    gaussians.check()
    dtype = gaussians.dtype
    if object_count is None:
        object_count = (
            int(gaussians.object_ids.max()) if len(gaussians) > 0 else 0
        )
    height, width = camera.height, camera.width
    tiles_x = math.ceil(width / TILE_SIZE)
    tiles_y = math.ceil(height / TILE_SIZE)

    projection = project(camera, gaussians)
    conic_matrix = torch.linalg.inv(projection.cov2d)
    conics = torch.stack(
        [conic_matrix[:, 0, 0], conic_matrix[:, 0, 1], conic_matrix[:, 1, 1]],
        dim=-1,
    )
    object_onehot = torch.zeros(len(gaussians), object_count, dtype=dtype)
    foreground = (gaussians.object_ids >= 1) & (
        gaussians.object_ids <= object_count
    )
    object_onehot[
        torch.nonzero(foreground).flatten(),
        gaussians.object_ids[foreground] - 1,
    ] = 1.0
    extra = (
        features.to(dtype)
        if features is not None
        else torch.zeros(len(gaussians), 0, dtype=dtype)
    )
    payload = torch.cat(
        [
            gaussians.colors,
            projection.depths[:, None],
            gaussian_normals(camera, gaussians),
            object_onehot,
            extra,
        ],
        dim=-1,
    )

    splat, counts, offsets = _tile_lists(projection, tiles_x, tiles_y)
    chunks = _chunks(counts)
    logger.debug(
        f"Rasterizing {int(projection.visible.sum())}/{len(gaussians)} "
        f"visible Gaussians as {len(splat)} tile entries in "
        f"{len(chunks)} chunks."
    )
    grad_enabled = torch.is_grad_enabled()

    def run(chunk: tuple[int, int]) -> Tensor:
        with torch.set_grad_enabled(grad_enabled):
            return _composite_chunk(
                *chunk,
                tiles_x,
                splat,
                counts,
                offsets,
                projection.means2d,
                conics,
                gaussians.opacities,
                payload,
            )

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(chunk) for chunk in chunks]

    channels = payload.shape[-1] + 1
    image = (
        torch.cat(results, dim=0)
        .reshape(tiles_y, tiles_x, TILE_SIZE, TILE_SIZE, channels)
        .permute(0, 2, 1, 3, 4)
        .reshape(tiles_y * TILE_SIZE, tiles_x * TILE_SIZE, channels)
    )[:height, :width]

    alpha = image[..., -1]
    covered = alpha > 1e-12
    safe_alpha = torch.where(covered, alpha, torch.ones_like(alpha))
    backdrop = torch.tensor(background, dtype=dtype)
    rgb = image[..., 0:3] + (1.0 - alpha)[..., None] * backdrop
    depth = torch.where(covered, image[..., 3] / safe_alpha, 0.0)
    normal_sum = image[..., 4:7]
    normal_norm = normal_sum.norm(dim=-1, keepdim=True)
    has_normal = normal_norm > 1e-12
    normal = torch.where(
        has_normal,
        normal_sum / torch.where(has_normal, normal_norm, 1.0),
        0.0,
    )
    object_mask = image[..., 7 : 7 + object_count]
    extra_out = None
    if features is not None:
        extra_out = torch.where(
            covered[..., None],
            image[..., 7 + object_count : -1] / safe_alpha[..., None],
            0.0,
        )
    return RenderBuffers(
        rgb=rgb,
        depth=depth,
        alpha=alpha,
        object_mask=object_mask,
        normal=normal,
        features=extra_out,
    )


def rasterize_backward(
    gaussians: GaussianSet,
    camera: Camera,
    upstream: dict[str, Tensor],
    object_count: int | None = None,
) -> GaussianSet:
    """Per-primitive gradients of Σ upstream·buffer over the named buffers.

    `upstream` maps RenderBuffers field names to gradients of the same
    shape. Returns a GaussianSet whose float fields hold gradients.
    """
    leaves = GaussianSet(
        centers=gaussians.centers.detach().clone().requires_grad_(),
        rotations=gaussians.rotations.detach().clone().requires_grad_(),
        log_scales=gaussians.log_scales.detach().clone().requires_grad_(),
        opacity_logits=gaussians.opacity_logits.detach()
        .clone()
        .requires_grad_(),
        colors=gaussians.colors.detach().clone().requires_grad_(),
        object_ids=gaussians.object_ids,
    )
    inputs = [
        leaves.centers,
        leaves.rotations,
        leaves.log_scales,
        leaves.opacity_logits,
        leaves.colors,
    ]
    with torch.enable_grad():
        buffers = rasterize(leaves, camera, object_count)
        outputs = [getattr(buffers, name) for name in upstream]
        grads = torch.autograd.grad(
            outputs,
            inputs,
            grad_outputs=list(upstream.values()),
            allow_unused=True,
        )
    grads = [
        g if g is not None else torch.zeros_like(leaf)
        for g, leaf in zip(grads, inputs)
    ]
    return GaussianSet(*grads, object_ids=gaussians.object_ids)


def compose_at(
    model: "CanonicalModel",
    deformation: "DeformationModel",
    t: float,
    removed_objects: Collection[int] = (),
) -> GaussianSet:
    """The scene S(t) with foreground warped to time t."""
    return compose_scene(
        model.background.snapshot(),
        deformation.warp_foreground(model, t),
        removed_objects,
    )


def render_at(
    model: "CanonicalModel",
    deformation: "DeformationModel",
    camera: Camera,
    t: float,
    removed_objects: Collection[int] = (),
    threads: int = 1,
) -> RenderBuffers:
    scene = compose_at(model, deformation, t, removed_objects)
    return rasterize(
        scene, camera, object_count=model.object_count, threads=threads
    )


def predicted_flow(
    model: "CanonicalModel",
    deformation: "DeformationModel",
    camera_t: Camera,
    camera_next: Camera,
    t: float,
    t_next: float,
    removed_objects: Collection[int] = (),
    threads: int = 1,
) -> Tensor:
    """Splatted optical flow from frame t to t_next, [H, W, 2] pixels.

    Gaussians behind the near plane of `camera_next` still occlude but add
    no flow; pixels covered only by such Gaussians get zero flow.
    """
    scene_t = compose_at(model, deformation, t, removed_objects)
    scene_next = compose_at(model, deformation, t_next, removed_objects)
    origin, _ = camera_t.project_points(scene_t.centers)
    target, z_next = camera_next.project_points(scene_next.centers)
    valid = (z_next > camera_next.z_near).to(origin.dtype)[:, None]
    buffers = rasterize(
        scene_t,
        camera_t,
        object_count=model.object_count,
        features=torch.cat([(target - origin) * valid, valid], dim=-1),
        threads=threads,
    )
    flow, weight = buffers.features[..., :2], buffers.features[..., 2:]
    has_flow = weight > 1e-12
    return torch.where(
        has_flow, flow / torch.where(has_flow, weight, 1.0), 0.0
    )
