"""Two-phase training.

The proxy stage fits a neural SDF per object together with the warp, the
component stage pre-trains the background and each object separately, and
the joint stage refines the composited scene. Each stage keeps its own Adam
optimizer and step schedule.
"""

import logging
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Literal

import torch
from pydantic import BaseModel
from torch import Tensor, nn
from torch.optim.lr_scheduler import LambdaLR
from tqdm import tqdm

from .checkpoint import (
    Checkpoint,
    CheckpointError,
    module_groups,
    optimizer_groups,
    read_checkpoint,
    restore_modules,
    restore_optimizer,
    write_checkpoint,
)
from .constants import STAGES, TRUTH_STAGE
from .deformation import (
    DeformationModel,
    FourierPoseNet,
    bone_variances,
    frame_time,
    kmeans_bone_centers,
)
from .geometry import RigidTransform, Twist, se3_exp, se3_log
from .objectives import (
    composite_loss,
    cycle_loss,
    depth_loss,
    eikonal_loss,
    flow_loss,
    normal_loss,
    photometric_loss,
    seg_loss,
)
from .proxy import (
    INITIAL_OPACITY,
    SdfProxy,
    SurfaceNotFoundError,
    composite_samples,
    mean_nearest_distance,
    sample_canonical_gaussians,
)
from .renderer import Camera, RenderBuffers, rasterize, render_at
from .scene import (
    CanonicalModel,
    GaussianParams,
    GaussianSet,
    densify_and_prune,
)
from .utils.config import (
    AblationToggles,
    LossWeights,
    ModelArchitecture,
    RunConfig,
)
from .utils.data.dataset import (
    Dataset,
    FrameObservation,
    load_dataset,
    normals_from_depth,
)
from .utils.data.synthetic import GroundTruth, ground_truth_architecture

logger = logging.getLogger(__name__)

__all__ = [
    "SurfaceNotFoundError",
    "TrainingDivergedError",
    "TrainState",
    "adam_step",
    "initialize_state",
    "joint_refine",
    "learning_rate",
    "load_checkpoint",
    "pretrain_components",
    "restore_state",
    "save_checkpoint",
    "train",
    "train_sdf_proxy",
]

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
GAUSSIAN_LR_MULTIPLIERS = {
    "centers": 1.6,
    "colors": 25.0,
    "opacity_logits": 500.0,
    "log_scales": 50.0,
    "rotations": 10.0,
}
MASK_THRESHOLD = 0.5
CANONICAL_POINT_LIMIT = 8192
# Disjoint RNG streams per stage.
STAGE_SEED_STRIDE = 1_000_003


class TrainingDivergedError(RuntimeError):
    """The training loss became non-finite."""


@dataclass
class TrainState:
    """Everything needed to continue or evaluate a reconstruction."""

    config: RunConfig
    model: CanonicalModel
    deformation: DeformationModel
    proxies: nn.ModuleList
    stage: str = "init"
    iteration: int = 0
    """Iterations completed within `stage`."""
    scene_scale: float = 1.0
    optimizer: torch.optim.Adam | None = None
    scheduler: LambdaLR | None = None
    pending_moments: Dict[str, Tensor] = field(default_factory=dict)
    """Adam state read from a checkpoint, applied when the stage resumes."""
    history: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def seed(self) -> int:
        return self.config.seed

    @property
    def object_count(self) -> int:
        return self.model.object_count

    def modules(self) -> Dict[str, nn.Module]:
        return {
            "model": self.model,
            "deformation": self.deformation,
            "proxy": self.proxies,
        }

    def parameter_names(self) -> Dict[nn.Parameter, str]:
        return {
            param: f"{prefix}.{name}"
            for prefix, module in self.modules().items()
            for name, param in module.named_parameters()
        }

    def camera_at(self, frame: FrameObservation, index: int) -> Camera:
        """The training camera of frame `index`, posed by G_b(t)."""
        t = frame_time(index, self.deformation.frame_count)
        return frame.camera.with_pose(self.deformation.camera_pose(t))


def learning_rate(iteration: int, config: RunConfig) -> float:
    """Base learning rate after `iteration` steps of a stage."""
    return config.learning_rate * config.lr_decay ** (
        iteration // config.lr_step
    )


def build_optimizer(
    named_parameters: List[tuple[str, nn.Parameter, float]],
    config: RunConfig,
    iteration: int = 0,
) -> tuple[torch.optim.Adam, LambdaLR] | tuple[None, None]:
    """Adam with one group per parameter and the step-decay schedule.

    Args:
        named_parameters: (name, parameter, lr multiplier) triples.
        config (RunConfig): learning-rate settings.
        iteration (int): stage iteration the schedule resumes at.
    """
    if not named_parameters:
        return None, None
    groups = [
        {
            "params": [param],
            "name": name,
            "lr": config.learning_rate * multiplier,
            "initial_lr": config.learning_rate * multiplier,
        }
        for name, param, multiplier in named_parameters
    ]
    optimizer = torch.optim.Adam(
        groups, lr=config.learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS
    )
    scheduler = LambdaLR(
        optimizer,
        lambda step: config.lr_decay ** (step // config.lr_step),
        last_epoch=iteration - 1,
    )
    return optimizer, scheduler


def adam_step(
    optimizer: torch.optim.Optimizer, scheduler: LambdaLR | None = None
) -> List[str]:
    """Apply one Adam update, skipping groups with non-finite gradients.

    Returns:
        List[str]: names of the skipped groups.
    """
    skipped = []
    for group in optimizer.param_groups:
        finite = all(
            torch.isfinite(param.grad).all()
            for param in group["params"]
            if param.grad is not None
        )
        if not finite:
            skipped.append(group.get("name", "<unnamed>"))
            for param in group["params"]:
                param.grad = None
    if skipped:
        logger.warning(
            f"Skipped the update of {len(skipped)} parameter groups with "
            f"non-finite gradients: {skipped[:5]}"
        )
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    if scheduler is not None:
        scheduler.step()
    return skipped


def _generator(seed: int, stage: str, iteration: int) -> torch.Generator:
    offset = STAGES.index(stage) * STAGE_SEED_STRIDE
    return torch.Generator().manual_seed(seed + offset + iteration)


def _effective_weights(config: RunConfig) -> LossWeights:
    updates = {}
    if not config.ablation.depth_loss:
        updates["depth"] = 0.0
    if not config.ablation.normal_loss:
        updates["normal"] = 0.0
    return config.weights.model_copy(update=updates)


def load_training_dataset(path: str | Path, config: RunConfig) -> Dataset:
    return load_dataset(path).scaled(config.scene_scale)


# Initialisation


def _twist_table(transforms: List[RigidTransform]) -> Tensor:
    return se3_log(RigidTransform.stack(transforms)).as_vector()


def _root_anchors(dataset: Dataset, toggles: AblationToggles) -> List[Tensor]:
    """G_o(t) anchors per object from the coarse root-to-world poses."""
    count = dataset.frame_count
    usable = toggles.root_init and all(
        frame.coarse_root_poses is not None for frame in dataset.frames
    )
    if toggles.root_init and not usable and dataset.object_count > 0:
        logger.warning(
            "The dataset has no coarse root poses; object roots start at "
            "the identity."
        )
    anchors = []
    for k in range(dataset.object_count):
        if usable:
            anchors.append(
                _twist_table(
                    [
                        frame.coarse_root_poses[k].inverse()
                        for frame in dataset.frames
                    ]
                )
            )
        else:
            anchors.append(torch.zeros(count, 6, dtype=torch.float64))
    return anchors


def _canonical_points(
    dataset: Dataset,
    object_id: int,
    anchors: Tensor,
    generator: torch.Generator,
    limit: int = CANONICAL_POINT_LIMIT,
) -> Tensor:
    """Back-projected object pixels carried into the root frame."""
    points = []
    for i, frame in enumerate(dataset.frames):
        valid = (frame.masks[..., object_id - 1] >= MASK_THRESHOLD) & (
            frame.depth > 0
        )
        if not valid.any():
            continue
        world = frame.camera.backproject(frame.depth)[valid]
        root = se3_exp(Twist.from_vector(anchors[i]))
        points.append(root.apply(world))
    if not points:
        return torch.zeros(0, 3, dtype=torch.float64)
    points = torch.cat(points)
    if len(points) > limit:
        points = points[torch.randperm(len(points), generator=generator)]
        points = points[:limit]
    return points


def seed_background(
    dataset: Dataset, count: int, generator: torch.Generator
) -> GaussianSet:
    """Gaussians at back-projected background pixels of training frames."""
    points, colors = [], []
    for frame in dataset.frames:
        valid = frame.depth > 0
        if frame.masks.shape[-1] > 0:
            valid = valid & (frame.masks < MASK_THRESHOLD).all(dim=-1)
        points.append(frame.camera.backproject(frame.depth)[valid])
        colors.append(frame.rgb[valid])
    points = torch.cat(points)
    colors = torch.cat(colors)
    if len(points) > count:
        keep = torch.randperm(len(points), generator=generator)[:count]
        points, colors = points[keep], colors[keep]
    n = len(points)
    if n == 0:
        return GaussianSet.empty()
    scale = mean_nearest_distance(points) if n > 1 else 0.01
    rotations = torch.zeros(n, 4, dtype=torch.float64)
    rotations[:, 0] = 1.0
    logger.info(f"Seeded {n} background Gaussians with scale {scale:.4g}.")
    return GaussianSet(
        centers=points,
        rotations=rotations,
        log_scales=torch.full(
            (n, 3), math.log(max(scale, 1e-6)), dtype=torch.float64
        ),
        opacity_logits=torch.full(
            (n,),
            math.log(INITIAL_OPACITY / (1 - INITIAL_OPACITY)),
            dtype=torch.float64,
        ),
        colors=colors.clamp(0.0, 1.0),
        object_ids=torch.zeros(n, dtype=torch.long),
    )


def initialize_state(config: RunConfig, dataset: Dataset) -> TrainState:
    """Build the untrained model from a (scaled) dataset.

    The camera net is anchored at the dataset extrinsics, object roots at
    the coarse root poses, bones at k-means centers of the back-projected
    object pixels and one sphere proxy per object around the same points.
    """
    torch.manual_seed(config.seed)
    generator = torch.Generator().manual_seed(config.seed)
    architecture = config.architecture
    root_anchors = _root_anchors(dataset, config.ablation)
    canonical = [
        _canonical_points(dataset, k + 1, root_anchors[k], generator)
        for k in range(dataset.object_count)
    ]
    centers = [
        kmeans_bone_centers(points, architecture.bone_count, config.seed)
        for points in canonical
    ]
    deformation = DeformationModel.build(
        architecture,
        dataset.frame_count,
        centers,
        [
            bone_variances(points, c) if len(points) else None
            for points, c in zip(canonical, centers)
        ],
        toggles=config.ablation,
    )
    with torch.no_grad():
        deformation.background_pose.set_anchors(
            _twist_table(
                [frame.camera.world_to_camera for frame in dataset.frames]
            )
        )
        for obj, anchors in zip(deformation.objects, root_anchors):
            obj.root.set_anchors(anchors)
    proxies = nn.ModuleList(
        SdfProxy.from_points(points, architecture) for points in canonical
    )
    model = CanonicalModel(
        seed_background(
            dataset, architecture.background_gaussians, generator
        ),
        [GaussianSet.empty() for _ in range(dataset.object_count)],
    )
    logger.info(
        f"Initialised reconstruction of {dataset.frame_count} frames with "
        f"{dataset.object_count} objects "
        f"(bones: {[len(c) for c in centers]})."
    )
    return TrainState(
        config=config,
        model=model,
        deformation=deformation,
        proxies=proxies,
        scene_scale=config.scene_scale,
    )


# Shared stage machinery


def _record(
    state: TrainState, component: str, values: Dict[str, float]
) -> None:
    state.history.append(
        {
            "stage": state.stage,
            "iteration": state.iteration,
            "component": component,
            **values,
        }
    )


def _check_finite_loss(state: TrainState, total: Tensor, values) -> None:
    if not torch.isfinite(total):
        raise TrainingDivergedError(
            f"Loss became non-finite at {state.stage} iteration "
            f"{state.iteration}: {values}"
        )


def _prepare_optimizer(
    state: TrainState,
    named_parameters: List[tuple[str, nn.Parameter, float]],
    iteration: int,
) -> None:
    state.optimizer, state.scheduler = build_optimizer(
        named_parameters, state.config, iteration
    )
    if state.optimizer is not None and state.pending_moments:
        restore_optimizer(
            state.pending_moments, state.optimizer, state.parameter_names()
        )
    state.pending_moments = {}


def _named(
    module: nn.Module, prefix: str, config: RunConfig
) -> List[tuple[str, nn.Parameter, float]]:
    named = []
    for name, param in module.named_parameters():
        if config.freeze_bone_rest and (
            name.endswith("rest_centers")
            or name.endswith("rest_rotations")
            or name.endswith("log_variances")
        ):
            continue
        multiplier = 1.0
        if isinstance(module, GaussianParams):
            multiplier = GAUSSIAN_LR_MULTIPLIERS[name]
        named.append((f"{prefix}.{name}", param, multiplier))
    return named


def _step(state: TrainState, total: Tensor) -> None:
    if state.optimizer is None or not total.requires_grad:
        return
    total.backward()
    adam_step(state.optimizer, state.scheduler)


def _progress(stage: str, start: int, stop: int):
    return tqdm(
        range(start, stop),
        desc=stage,
        initial=start,
        total=stop,
        leave=False,
        disable=stop - start == 0,
    )


# Proxy stage


@dataclass
class _RayBatch:
    pixels: Tensor
    """[R, 2] integer (y, x)."""
    on_object: Tensor
    """[R] bool."""


def _sample_rays(
    frame: FrameObservation,
    object_id: int,
    count: int,
    generator: torch.Generator,
) -> _RayBatch | None:
    valid = frame.depth > 0
    mask = frame.masks[..., object_id - 1] >= MASK_THRESHOLD
    on = torch.nonzero(valid & mask)
    off = torch.nonzero(valid & ~mask)
    if len(on) == 0:
        return None
    take_on = min(len(on), max(count // 2, 1))
    take_off = min(len(off), count - take_on)
    chosen_on = on[torch.randperm(len(on), generator=generator)[:take_on]]
    chosen_off = off[torch.randperm(len(off), generator=generator)[:take_off]]
    return _RayBatch(
        pixels=torch.cat([chosen_on, chosen_off]),
        on_object=torch.cat(
            [
                torch.ones(take_on, dtype=torch.bool),
                torch.zeros(take_off, dtype=torch.bool),
            ]
        ),
    )


def _pixel_points(camera: Camera, pixels: Tensor, depth: Tensor) -> Tensor:
    """World points of pixels [..., 2] (y, x) at camera depth [...]."""
    y = pixels[..., 0].to(depth.dtype)
    x = pixels[..., 1].to(depth.dtype)
    local = torch.stack(
        [
            (x - camera.cx) / camera.fx * depth,
            (y - camera.cy) / camera.fy * depth,
            depth,
        ],
        dim=-1,
    )
    return camera.world_to_camera.inverse().apply(local)


def _proxy_terms(
    state: TrainState,
    dataset: Dataset,
    index: int,
    object_id: int,
    generator: torch.Generator,
) -> Dict[str, Tensor] | None:
    config = state.config
    frame = dataset.frames[index]
    rays = _sample_rays(
        frame,
        object_id,
        max(config.rays_per_batch // max(dataset.object_count, 1), 2),
        generator,
    )
    if rays is None:
        return None
    deformation = state.deformation
    proxy = state.proxies[object_id - 1]
    t = dataset.time(index)
    camera = frame.camera
    ys, xs = rays.pixels[:, 0], rays.pixels[:, 1]
    surface_depth = frame.depth[ys, xs]

    offsets = torch.linspace(
        -config.ray_band,
        config.ray_band,
        config.ray_samples,
        dtype=torch.float64,
    )
    depths = (surface_depth[:, None] + offsets).clamp(min=camera.z_near)
    pixels = rays.pixels[:, None, :].expand(-1, config.ray_samples, -1)
    world = _pixel_points(camera, pixels, depths)
    canonical = deformation.warp_frame_to_canonical(
        world.reshape(-1, 3), t, object_id
    )
    sdf, gradient = proxy.sdf_and_gradient(canonical)
    albedo = proxy.albedo(canonical)
    rgb, depth, opacity = composite_samples(
        sdf.reshape(depths.shape),
        albedo.reshape(*depths.shape, 3),
        depths,
        proxy.sharpness,
    )

    on = rays.on_object
    terms = {
        "photo": photometric_loss(
            rgb[on][:, None], frame.rgb[ys, xs][on][:, None]
        ),
        "depth": depth_loss(depth[on][:, None], surface_depth[on][:, None]),
        "sdf": eikonal_loss(gradient),
        "seg": seg_loss(
            opacity[:, None, None],
            frame.masks[ys, xs, object_id - 1][:, None, None],
        ),
    }

    surface = _pixel_points(camera, rays.pixels[on], surface_depth[on])
    if frame.flow_to_next is not None and index + 1 < dataset.frame_count:
        t_next = dataset.time(index + 1)
        carried = deformation.warp_canonical_to_frame(
            deformation.warp_frame_to_canonical(surface, t, object_id),
            t_next,
            object_id,
        )
        target, _ = dataset.frames[index + 1].camera.project_points(carried)
        origin = torch.stack([xs[on], ys[on]], dim=-1).to(target.dtype)
        terms["flow"] = flow_loss(
            (target - origin)[:, None], frame.flow_to_next[ys, xs][on][:, None]
        )
    else:
        terms["flow"] = surface.new_zeros(())

    samples = surface[
        torch.randperm(len(surface), generator=generator)[
            : config.cycle_samples
        ]
    ]
    samples = samples + config.cycle_noise * torch.randn(
        samples.shape, dtype=samples.dtype, generator=generator
    )
    # t' alternates between the sample's own time and the next frame.
    paired = index + (state.iteration % 2)
    t_other = dataset.time(min(paired, dataset.frame_count - 1))
    terms["cycle"] = cycle_loss(
        samples,
        torch.full((len(samples),), object_id, dtype=torch.long),
        deformation,
        t,
        t_other,
    )
    return terms


def _proxy_parameters(state: TrainState):
    named = []
    for k, proxy in enumerate(state.proxies):
        named += _named(proxy, f"proxy.{k}", state.config)
    for k, obj in enumerate(state.deformation.objects):
        named += _named(obj, f"deformation.objects.{k}", state.config)
    return named


def train_sdf_proxy(
    state: TrainState, dataset: Dataset, iterations: int | None = None
) -> TrainState:
    """Fit the SDF proxies jointly with the object warps.

    Per iteration one frame is drawn; each object's rays sample the band
    around the observed surface, are warped to canonical space and
    composited through the proxy.
    """
    iterations = (
        state.config.budgets.proxy if iterations is None else iterations
    )
    weights = _effective_weights(state.config)
    if state.iteration < iterations and dataset.object_count > 0:
        _prepare_optimizer(state, _proxy_parameters(state), state.iteration)
    for _ in _progress("proxy", state.iteration, iterations):
        if dataset.object_count == 0:
            state.iteration = iterations
            break
        generator = _generator(state.seed, "proxy", state.iteration)
        index = int(
            torch.randint(dataset.frame_count, (1,), generator=generator)
        )
        per_object = [
            _proxy_terms(state, dataset, index, k + 1, generator)
            for k in range(dataset.object_count)
        ]
        per_object = [terms for terms in per_object if terms is not None]
        if per_object:
            terms = {
                name: torch.stack([t[name] for t in per_object]).mean()
                for name in per_object[0]
            }
            breakdown = composite_loss("init", terms, weights)
            values = breakdown.as_floats()
            _check_finite_loss(state, breakdown.total, values)
            _step(state, breakdown.total)
            if state.iteration % state.config.log_every == 0:
                _record(state, "objects", values)
        state.iteration += 1
    state.optimizer = state.scheduler = None
    logger.info(f"Proxy stage finished after {state.iteration} iterations.")
    return state


def seed_foreground(state: TrainState, seed: int | None = None) -> None:
    """Replace every object's Gaussians with samples of its proxy."""
    generator = torch.Generator().manual_seed(
        state.seed if seed is None else seed
    )
    count = state.config.architecture.gaussians_per_object
    for k, proxy in enumerate(state.proxies):
        state.model.foreground[k] = GaussianParams(
            sample_canonical_gaussians(proxy, count, k + 1, generator), k + 1
        )


# Splatting stages


@dataclass
class _FrameTargets:
    normals: Tensor
    normal_valid: Tensor


def _targets(
    cache: Dict[int, _FrameTargets], dataset: Dataset, index: int
) -> _FrameTargets:
    if index not in cache:
        frame = dataset.frames[index]
        normals, valid = normals_from_depth(frame.depth, frame.camera)
        cache[index] = _FrameTargets(normals, valid)
    return cache[index]


def _splat_terms(
    buffers: RenderBuffers,
    frame: FrameObservation,
    targets: _FrameTargets,
    region: Tensor,
    channels: List[int],
    weights: LossWeights,
) -> Dict[str, Tensor] | None:
    if not region.any():
        return None
    zero = buffers.rgb.new_zeros(())
    depth_valid = region & (frame.depth > 0)
    normal_valid = region & targets.normal_valid
    return {
        "photo": photometric_loss(
            buffers.rgb, frame.rgb, region, mode="l1_ssim"
        ),
        "depth": (
            depth_loss(buffers.depth, frame.depth, depth_valid)
            if weights.depth > 0 and depth_valid.any()
            else zero
        ),
        "seg": (
            seg_loss(
                buffers.object_mask[..., channels],
                frame.masks[..., channels],
            )
            if channels
            else zero
        ),
        "normal": (
            normal_loss(buffers.normal, targets.normals, normal_valid)
            if weights.normal > 0 and normal_valid.any()
            else zero
        ),
    }


def _component_schedule(state: TrainState) -> List[tuple[str, int]]:
    budgets = state.config.budgets
    return [("background", budgets.background)] + [
        (f"object {k + 1}", budgets.foreground)
        for k in range(state.object_count)
    ]


def _component_parameters(state: TrainState, component: int):
    config = state.config
    if component == 0:
        return _named(
            state.model.background, "model.background", config
        ) + _named(
            state.deformation.background_pose,
            "deformation.background_pose",
            config,
        )
    k = component - 1
    return _named(
        state.model.foreground[k], f"model.foreground.{k}", config
    ) + _named(
        state.deformation.objects[k], f"deformation.objects.{k}", config
    )


def _render_component(
    state: TrainState, component: int, camera: Camera, t: float
) -> RenderBuffers:
    if component == 0:
        gaussians = state.model.background.snapshot()
    else:
        gaussians = state.deformation.warp_gaussians(
            state.model.foreground[component - 1].snapshot(), t, component
        )
    return rasterize(
        gaussians,
        camera,
        object_count=state.object_count,
        threads=state.config.threads,
    )


def _component_region(frame: FrameObservation, component: int) -> Tensor:
    if component == 0:
        if frame.masks.shape[-1] == 0:
            return torch.ones_like(frame.depth, dtype=torch.bool)
        return (frame.masks < MASK_THRESHOLD).all(dim=-1)
    return frame.masks[..., component - 1] >= MASK_THRESHOLD


def pretrain_components(state: TrainState, dataset: Dataset) -> TrainState:
    """Optimise the background and then each object on its own pixels.

    Only the current component is composited and only its parameters (and
    its pose net) are optimised.
    """
    weights = _effective_weights(state.config)
    schedule = _component_schedule(state)
    total = sum(budget for _, budget in schedule)
    cache: Dict[int, _FrameTargets] = {}
    progress = _progress("component", state.iteration, total)
    start = 0
    for component, (label, budget) in enumerate(schedule):
        stop = start + budget
        if state.iteration >= stop:
            start = stop
            continue
        _prepare_optimizer(
            state,
            _component_parameters(state, component),
            state.iteration - start,
        )
        channels = [component - 1] if component > 0 else []
        while state.iteration < stop:
            generator = _generator(state.seed, "component", state.iteration)
            index = int(
                torch.randint(dataset.frame_count, (1,), generator=generator)
            )
            frame = dataset.frames[index]
            t = dataset.time(index)
            buffers = _render_component(
                state, component, state.camera_at(frame, index), t
            )
            terms = _splat_terms(
                buffers,
                frame,
                _targets(cache, dataset, index),
                _component_region(frame, component),
                channels,
                weights,
            )
            if terms is not None:
                breakdown = composite_loss("joint", terms, weights)
                values = breakdown.as_floats()
                _check_finite_loss(state, breakdown.total, values)
                _step(state, breakdown.total)
                state.model.components()[component].enforce_invariants()
                if (state.iteration - start) % state.config.log_every == 0:
                    _record(state, label, values)
                progress.set_postfix(loss=f"{values['total']:.4g}")
            state.iteration += 1
            progress.update(1)
        logger.info(f"Pre-trained {label} for {budget} iterations.")
        start = stop
    progress.close()
    state.optimizer = state.scheduler = None
    return state


def _joint_parameters(state: TrainState):
    config = state.config
    named = []
    if not config.freeze_background:
        named += _named(state.model.background, "model.background", config)
    for k, component in enumerate(state.model.foreground):
        named += _named(component, f"model.foreground.{k}", config)
    named += _named(state.deformation, "deformation", config)
    return named


def _trainable_components(state: TrainState) -> List[GaussianParams]:
    components = list(state.model.foreground)
    if not state.config.freeze_background:
        components.insert(0, state.model.background)
    return components


def joint_refine(state: TrainState, dataset: Dataset) -> TrainState:
    """Refine every component on full composited renders.

    Background Gaussians stay fixed unless `freeze_background` is off; the
    camera net always trains. Trainable components are densified and
    pruned every `densify.interval` iterations.
    """
    config = state.config
    weights = _effective_weights(config)
    budget = config.budgets.joint
    cache: Dict[int, _FrameTargets] = {}
    channels = list(range(state.object_count))
    state.model.background.requires_grad_(not config.freeze_background)
    if state.iteration < budget:
        _prepare_optimizer(state, _joint_parameters(state), state.iteration)
    components = _trainable_components(state)
    grad_sums = [torch.zeros(len(c), dtype=torch.float64) for c in components]
    grad_counts = 0
    progress = _progress("joint", state.iteration, budget)
    for _ in progress:
        generator = _generator(state.seed, "joint", state.iteration)
        index = int(
            torch.randint(dataset.frame_count, (1,), generator=generator)
        )
        frame = dataset.frames[index]
        buffers = render_at(
            state.model,
            state.deformation,
            state.camera_at(frame, index),
            dataset.time(index),
            threads=config.threads,
        )
        terms = _splat_terms(
            buffers,
            frame,
            _targets(cache, dataset, index),
            torch.ones_like(frame.depth, dtype=torch.bool),
            channels,
            weights,
        )
        breakdown = composite_loss("joint", terms, weights)
        values = breakdown.as_floats()
        _check_finite_loss(state, breakdown.total, values)
        if state.optimizer is not None and breakdown.total.requires_grad:
            breakdown.total.backward()
            for i, component in enumerate(components):
                if component.centers.grad is not None:
                    grad_sums[i] += component.centers.grad.norm(dim=-1)
            grad_counts += 1
            adam_step(state.optimizer, state.scheduler)
        for component in components:
            component.enforce_invariants()
        state.iteration += 1
        if state.iteration % config.densify.interval == 0 and grad_counts:
            for i, component in enumerate(components):
                densify_and_prune(
                    component,
                    grad_sums[i] / grad_counts,
                    config.densify,
                    state.optimizer,
                )
            grad_sums = [
                torch.zeros(len(c), dtype=torch.float64) for c in components
            ]
            grad_counts = 0
        if (state.iteration - 1) % config.log_every == 0:
            _record(state, "scene", values)
        progress.set_postfix(loss=f"{values['total']:.4g}")
    state.optimizer = state.scheduler = None
    logger.info(f"Joint refinement finished after {state.iteration} steps.")
    return state


def _enter_stage(state: TrainState, stage: str) -> None:
    state.stage = stage
    state.iteration = 0
    state.optimizer = state.scheduler = None
    state.pending_moments = {}
    if stage == "component":
        seed_foreground(state)


STAGE_RUNNERS: Dict[str, Callable[[TrainState, Dataset], TrainState]] = {
    "proxy": train_sdf_proxy,
    "component": pretrain_components,
    "joint": joint_refine,
}


def train(
    state: TrainState,
    dataset: Dataset,
    checkpoint_dir: str | Path | None = None,
) -> TrainState:
    """Run the remaining stages, writing `<stage>.hgsc` after each one.

    A state in stage `init` starts at the proxy stage; any other state
    continues its stage at its stored iteration.
    """
    stages = list(STAGE_RUNNERS)
    if checkpoint_dir is not None and state.stage == "init":
        save_checkpoint(state, Path(checkpoint_dir) / "init.hgsc")
    first = 0 if state.stage == "init" else stages.index(state.stage)
    for stage in stages[first:]:
        if state.stage != stage:
            _enter_stage(state, stage)
        logger.info(
            f"Starting stage '{stage}' at iteration {state.iteration}."
        )
        STAGE_RUNNERS[stage](state, dataset)
        if checkpoint_dir is not None:
            save_checkpoint(state, Path(checkpoint_dir) / f"{stage}.hgsc")
    return state


# Checkpoints


def _encode_options(options: BaseModel) -> Tensor:
    values = []
    for name, info in type(options).model_fields.items():
        value = getattr(options, name)
        if typing.get_origin(info.annotation) is Literal:
            value = typing.get_args(info.annotation).index(value)
        values.append(float(value))
    return torch.tensor(values, dtype=torch.float64)


def _decode_options(cls: type[BaseModel], encoded: Tensor) -> BaseModel:
    names = list(cls.model_fields)
    if len(encoded) != len(names):
        raise CheckpointError(
            f"Checkpoint stores {len(encoded)} {cls.__name__} values, "
            f"expected {len(names)}."
        )
    values = {}
    for (name, info), value in zip(cls.model_fields.items(), encoded.tolist()):
        annotation = info.annotation
        if typing.get_origin(annotation) is Literal:
            value = typing.get_args(annotation)[int(value)]
        elif annotation is bool:
            value = bool(value)
        elif annotation is int:
            value = int(value)
        values[name] = value
    return cls(**values)


def _meta_groups(state: TrainState) -> Dict[str, Tensor]:
    def scalar(value: float) -> Tensor:
        return torch.tensor([float(value)], dtype=torch.float64)

    return {
        "meta.architecture": _encode_options(state.config.architecture),
        "meta.toggles": _encode_options(state.config.ablation),
        "meta.frame_count": scalar(state.deformation.frame_count),
        "meta.object_count": scalar(state.object_count),
        "meta.bone_counts": torch.tensor(
            [float(o.skeleton.bone_count) for o in state.deformation.objects],
            dtype=torch.float64,
        ),
        "meta.cycle_weights": torch.tensor(
            state.deformation.cycle_weights, dtype=torch.float64
        ),
        "meta.scene_scale": scalar(state.scene_scale),
        "meta.proxy_count": scalar(len(state.proxies)),
    }


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    groups = _meta_groups(state)
    groups.update(module_groups(state.modules()))
    if state.optimizer is not None:
        groups.update(
            optimizer_groups(state.optimizer, state.parameter_names())
        )
    write_checkpoint(
        Checkpoint(
            seed=state.seed,
            stage=state.stage,
            iteration=state.iteration,
            groups=groups,
        ),
        path,
    )


def _meta(groups: Dict[str, Tensor], name: str) -> Tensor:
    key = f"meta.{name}"
    if key not in groups:
        raise CheckpointError(f"Checkpoint group {key} is missing.")
    return groups[key]


def _gaussians_from_groups(
    groups: Dict[str, Tensor], prefix: str, object_id: int
) -> GaussianSet:
    values = {}
    for name in GaussianParams.PARAMETER_NAMES:
        key = f"{prefix}.{name}"
        if key not in groups:
            raise CheckpointError(f"Checkpoint group {key} is missing.")
        values[name] = groups[key]
    count = values["centers"].shape[0]
    return GaussianSet(
        **values,
        object_ids=torch.full((count,), object_id, dtype=torch.long),
    )


def _restore_model(
    model: CanonicalModel, groups: Dict[str, Tensor]
) -> None:
    """Replace every component's Gaussians with the checkpoint rows."""
    prefixes = ["model.background"] + [
        f"model.foreground.{k}" for k in range(model.object_count)
    ]
    for name in groups:
        owner = name.rsplit(".", 1)[0]
        if name.startswith("model.") and owner not in prefixes:
            raise CheckpointError(
                f"Checkpoint group {name} has no matching model state."
            )
    model.background = GaussianParams(
        _gaussians_from_groups(groups, prefixes[0], 0), 0
    )
    for k in range(model.object_count):
        model.foreground[k] = GaussianParams(
            _gaussians_from_groups(groups, prefixes[k + 1], k + 1), k + 1
        )


def _resize_anchors(
    deformation: DeformationModel, groups: Dict[str, Tensor]
) -> None:
    for name, module in deformation.named_modules():
        if isinstance(module, FourierPoseNet):
            key = f"deformation.{name}.anchor_twists"
            if key in groups:
                module.set_anchors(torch.zeros_like(groups[key]))


def _adam_groups(groups: Dict[str, Tensor]) -> Dict[str, Tensor]:
    return {
        name: value
        for name, value in groups.items()
        if name.startswith("adam.")
    }


def restore_state(state: TrainState, checkpoint: Checkpoint) -> TrainState:
    """Load a checkpoint into a state built for the same dataset.

    Raises:
        CheckpointError: naming the first group that is missing, unexpected
            or of the wrong shape.
    """
    groups = checkpoint.groups
    frame_count = int(_meta(groups, "frame_count")[0])
    if frame_count != state.deformation.frame_count:
        raise CheckpointError(
            f"Checkpoint group meta.frame_count is {frame_count}, the "
            f"dataset has {state.deformation.frame_count} frames."
        )
    if checkpoint.stage not in STAGES:
        raise CheckpointError(
            f"Checkpoint stage '{checkpoint.stage}' cannot be resumed."
        )
    _resize_anchors(state.deformation, groups)
    restore_modules(
        groups, {"deformation": state.deformation, "proxy": state.proxies}
    )
    _restore_model(state.model, groups)
    state.config = state.config.model_copy(update={"seed": checkpoint.seed})
    state.stage = checkpoint.stage
    state.iteration = checkpoint.iteration
    state.scene_scale = float(_meta(groups, "scene_scale")[0])
    state.pending_moments = _adam_groups(groups)
    logger.info(
        f"Resuming stage '{state.stage}' at iteration {state.iteration}."
    )
    return state


def load_checkpoint(path: str | Path) -> TrainState:
    """Re-instantiate a state from a checkpoint alone."""
    checkpoint = read_checkpoint(path)
    groups = checkpoint.groups
    architecture = _decode_options(
        ModelArchitecture, _meta(groups, "architecture")
    )
    toggles = _decode_options(AblationToggles, _meta(groups, "toggles"))
    object_count = int(_meta(groups, "object_count")[0])
    bone_counts = [int(b) for b in _meta(groups, "bone_counts").tolist()]
    if len(bone_counts) != object_count:
        raise CheckpointError(
            f"Checkpoint group meta.bone_counts lists {len(bone_counts)} "
            f"objects, meta.object_count says {object_count}."
        )
    deformation = DeformationModel.build(
        architecture,
        int(_meta(groups, "frame_count")[0]),
        [torch.zeros(count, 3, dtype=torch.float64) for count in bone_counts],
        toggles=toggles,
    )
    deformation.cycle_weights = _meta(groups, "cycle_weights").tolist()
    _resize_anchors(deformation, groups)
    unit = torch.ones(3, dtype=torch.float64)
    proxies = nn.ModuleList(
        SdfProxy(
            torch.zeros(3, dtype=torch.float64),
            1.0,
            -unit,
            unit,
            architecture.proxy_frequencies,
            architecture.proxy_width,
            architecture.proxy_depth,
        )
        for _ in range(int(_meta(groups, "proxy_count")[0]))
    )
    restore_modules(groups, {"deformation": deformation, "proxy": proxies})
    model = CanonicalModel(
        foreground=[GaussianSet.empty() for _ in range(object_count)]
    )
    _restore_model(model, groups)
    scene_scale = float(_meta(groups, "scene_scale")[0])
    config = RunConfig(
        seed=checkpoint.seed,
        architecture=architecture,
        ablation=toggles,
        scene_scale=scene_scale,
    )
    return TrainState(
        config=config,
        model=model,
        deformation=deformation,
        proxies=proxies,
        stage=checkpoint.stage,
        iteration=checkpoint.iteration,
        scene_scale=scene_scale,
        pending_moments=_adam_groups(groups),
    )


def check_dataset(state: TrainState, dataset: Dataset) -> None:
    """Raise CheckpointError unless `dataset` matches the state's shape."""
    if dataset.object_count != state.object_count:
        raise CheckpointError(
            f"Checkpoint has {state.object_count} objects, dataset "
            f"'{dataset.name}' has {dataset.object_count}."
        )
    if dataset.frame_count != state.deformation.frame_count:
        raise CheckpointError(
            f"Checkpoint covers {state.deformation.frame_count} frames, "
            f"dataset '{dataset.name}' has {dataset.frame_count}."
        )


def ground_truth_state(ground_truth: GroundTruth) -> TrainState:
    """Wrap a synthetic scene's true model so it saves as a checkpoint."""
    config = RunConfig(
        seed=ground_truth.spec.seed,
        architecture=ground_truth_architecture(ground_truth.spec),
        scene_scale=1.0,
    )
    return TrainState(
        config=config,
        model=ground_truth.model,
        deformation=ground_truth.deformation,
        proxies=nn.ModuleList(),
        stage=TRUTH_STAGE,
        scene_scale=1.0,
    )
