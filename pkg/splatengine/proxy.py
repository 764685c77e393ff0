"""Neural signed-distance proxy of each object's canonical shape.

The proxy warm-starts the deformation model and supplies the surface the
foreground Gaussians are seeded on.
"""

import logging
import math

import torch
from torch import Tensor, nn

from .deformation import build_mlp
from .scene import GaussianSet
from .utils.config import ModelArchitecture

logger = logging.getLogger(__name__)

SURFACE_BAND = 0.01
"""|Φ| below which a sample counts as on the surface."""
INITIAL_OPACITY = 0.1
INITIAL_SHARPNESS = 100.0
SAMPLING_ROUNDS = 32
MIN_DRAWS = 4096
COMPOSITE_EPSILON = 1e-5


class SurfaceNotFoundError(RuntimeError):
    """Too few proxy samples landed on the zero level set."""


def positional_encoding(x: Tensor, frequencies: int) -> Tensor:
    """[x, sin(2^k π x), cos(2^k π x)] per coordinate, k < frequencies."""
    if frequencies == 0:
        return x
    scales = (2.0 ** torch.arange(frequencies, dtype=x.dtype)) * math.pi
    angles = (x[..., None] * scales).flatten(-2)
    return torch.cat([x, torch.sin(angles), torch.cos(angles)], dim=-1)


class SdfProxy(nn.Module):
    """Φ(x) = ‖x − c‖ − r + MLP(x) with an albedo head.

    The distance MLP's output layer starts at zero, so a fresh proxy is the
    exact signed distance to a sphere.
    """

    def __init__(
        self,
        center: Tensor,
        radius: float,
        bbox_min: Tensor,
        bbox_max: Tensor,
        frequencies: int = 6,
        width: int = 256,
        depth: int = 5,
        sharpness: float = INITIAL_SHARPNESS,
    ):
        super().__init__()
        dtype = center.dtype
        if radius <= 0:
            raise ValueError(f"Proxy radius must be positive, got {radius}.")
        if not (bbox_max > bbox_min).all():
            raise ValueError("Proxy bounding box is empty.")
        self.frequencies = frequencies
        self.register_buffer("center", center.clone())
        self.register_buffer("radius", torch.tensor(radius, dtype=dtype))
        self.register_buffer("bbox_min", bbox_min.clone())
        self.register_buffer("bbox_max", bbox_max.clone())
        features = 3 * (1 + 2 * frequencies)
        self.sdf_net = build_mlp(features, 1, width, depth, "softplus", dtype)
        self.albedo_net = build_mlp(
            features, 3, max(width // 2, 1), 2, "softplus", dtype
        )
        self.log_sharpness = nn.Parameter(
            torch.tensor(math.log(sharpness), dtype=dtype)
        )

    @classmethod
    def from_points(
        cls, points: Tensor, architecture: ModelArchitecture
    ) -> "SdfProxy":
        """A sphere around a canonical point cloud, boxed with margin."""
        if len(points) == 0:
            points = torch.zeros(1, 3, dtype=points.dtype)
        center = points.mean(dim=0)
        distances = (points - center).norm(dim=-1)
        radius = max(float(distances.median()), SURFACE_BAND)
        low = points.min(dim=0).values
        high = points.max(dim=0).values
        margin = 0.25 * (high - low) + 2 * radius
        return cls(
            center,
            radius,
            low - margin,
            high + margin,
            architecture.proxy_frequencies,
            architecture.proxy_width,
            architecture.proxy_depth,
        )

    @property
    def sharpness(self) -> Tensor:
        return torch.exp(self.log_sharpness)

    def _encode(self, x: Tensor) -> Tensor:
        half = (self.bbox_max - self.bbox_min) / 2
        unit = (x - (self.bbox_min + half)) / half
        return positional_encoding(unit, self.frequencies)

    def sdf(self, x: Tensor) -> Tensor:
        sphere = (x - self.center).norm(dim=-1) - self.radius
        return sphere + self.sdf_net(self._encode(x))[..., 0]

    def albedo(self, x: Tensor) -> Tensor:
        return torch.sigmoid(self.albedo_net(self._encode(x)))

    def sdf_and_gradient(
        self, x: Tensor, create_graph: bool = True
    ) -> tuple[Tensor, Tensor]:
        """Φ(x) and ∇Φ(x); the gradient stays differentiable by default."""
        with torch.enable_grad():
            if not x.requires_grad:
                x = x.detach().requires_grad_()
            value = self.sdf(x)
            (gradient,) = torch.autograd.grad(
                value,
                x,
                grad_outputs=torch.ones_like(value),
                create_graph=create_graph,
            )
        return value, gradient

    def contains(self, x: Tensor) -> Tensor:
        return ((x >= self.bbox_min) & (x <= self.bbox_max)).all(dim=-1)


def composite_samples(
    sdf: Tensor, colors: Tensor, depths: Tensor, sharpness: Tensor
) -> tuple[Tensor, Tensor, Tensor]:
    """Alpha-composite ray samples whose density comes from the SDF.

    Section i between samples i and i+1 has opacity
    (σ(sΦ_i) − σ(sΦ_i+1)) / σ(sΦ_i), clipped to [0, 1].

    Args:
        sdf (Tensor): Φ at the samples, [R, S], ordered near to far.
        colors (Tensor): albedo at the samples, [R, S, 3].
        depths (Tensor): sample depths along the ray, [R, S].
        sharpness (Tensor): logistic sharpness s.

    Returns:
        tuple[Tensor, Tensor, Tensor]: colour [R, 3], opacity-normalised
        depth [R] and accumulated opacity [R].
    """
    cdf = torch.sigmoid(sdf * sharpness)
    previous, following = cdf[..., :-1], cdf[..., 1:]
    alpha = (
        (previous - following + COMPOSITE_EPSILON)
        / (previous + COMPOSITE_EPSILON)
    ).clamp(0.0, 1.0)
    transmittance = torch.cumprod(1.0 - alpha, dim=-1)
    before = torch.cat(
        [torch.ones_like(transmittance[..., :1]), transmittance[..., :-1]],
        dim=-1,
    )
    weights = alpha * before
    section_colors = (colors[..., :-1, :] + colors[..., 1:, :]) / 2
    section_depths = (depths[..., :-1] + depths[..., 1:]) / 2
    opacity = weights.sum(dim=-1)
    rgb = (weights[..., None] * section_colors).sum(dim=-2)
    depth = (weights * section_depths).sum(dim=-1) / opacity.clamp(
        min=COMPOSITE_EPSILON
    )
    return rgb, depth, opacity


def mean_nearest_distance(points: Tensor, chunk: int = 2048) -> float:
    """Mean distance from each point to its nearest neighbour."""
    nearest = []
    for start in range(0, len(points), chunk):
        distances = torch.cdist(points[start : start + chunk], points)
        rows = torch.arange(distances.shape[0])
        distances[rows, rows + start] = math.inf
        nearest.append(distances.min(dim=-1).values)
    return float(torch.cat(nearest).mean())


def sample_canonical_gaussians(
    proxy: SdfProxy,
    count: int,
    object_id: int = 1,
    generator: torch.Generator | None = None,
) -> GaussianSet:
    """Seed isotropic Gaussians on the proxy's zero level set.

    Uniform draws inside the bounding box with |Φ| < SURFACE_BAND are kept
    and moved onto the surface with one Newton step along ∇Φ.

    Raises:
        SurfaceNotFoundError: when fewer than count / 10 samples are found.
    """
    dtype = proxy.center.dtype
    if count == 0:
        return GaussianSet.empty(dtype)
    if generator is None:
        generator = torch.Generator().manual_seed(0)
    draws = max(64 * count, MIN_DRAWS)
    extent = proxy.bbox_max - proxy.bbox_min
    accepted = []
    found = 0
    for _ in range(SAMPLING_ROUNDS):
        candidates = proxy.bbox_min + extent * torch.rand(
            draws, 3, dtype=dtype, generator=generator
        )
        value, gradient = proxy.sdf_and_gradient(
            candidates, create_graph=False
        )
        value, gradient = value.detach(), gradient.detach()
        near = value.abs() < SURFACE_BAND
        points, values, gradients = (
            candidates[near],
            value[near],
            gradient[near],
        )
        squared = (gradients**2).sum(dim=-1)
        usable = squared > 1e-12
        projected = (
            points[usable]
            - (values[usable] / squared[usable])[:, None] * gradients[usable]
        )
        projected = projected[proxy.contains(projected)]
        accepted.append(projected)
        found += len(projected)
        if found >= count:
            break
    centers = torch.cat(accepted)[:count]
    if len(centers) < count / 10:
        raise SurfaceNotFoundError(
            f"Object {object_id}: found {len(centers)} surface samples, "
            f"needed at least {math.ceil(count / 10)} of {count}."
        )
    if len(centers) < count:
        logger.warning(
            f"Object {object_id}: only {len(centers)} of {count} requested "
            "surface samples were found."
        )

    scale = (
        mean_nearest_distance(centers) if len(centers) > 1 else SURFACE_BAND
    )
    scale = max(scale, 1e-6)
    n = len(centers)
    rotations = torch.zeros(n, 4, dtype=dtype)
    rotations[:, 0] = 1.0
    with torch.no_grad():
        colors = proxy.albedo(centers)
    logger.info(
        f"Object {object_id}: seeded {n} Gaussians with scale {scale:.4g}."
    )
    return GaussianSet(
        centers=centers,
        rotations=rotations,
        log_scales=torch.full((n, 3), math.log(scale), dtype=dtype),
        opacity_logits=torch.full(
            (n,),
            math.log(INITIAL_OPACITY / (1 - INITIAL_OPACITY)),
            dtype=dtype,
        ),
        colors=colors,
        object_ids=torch.full((n,), object_id, dtype=torch.long),
    )
