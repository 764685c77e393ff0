"""Training losses and evaluation metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, Literal

import torch
import torch.nn.functional as F
from torch import Tensor

from .utils.config import LossWeights

if TYPE_CHECKING:
    from .deformation import DeformationModel

logger = logging.getLogger(__name__)

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
DSSIM_WEIGHT = 0.2
UNIT_TOLERANCE = 1e-6

Stage = Literal["init", "joint"]

# Stage → {term: LossWeights field}.
STAGE_TERMS = {
    "init": {
        "photo": "color",
        "depth": "depth",
        "sdf": "sdf",
        "flow": "flow",
        "cycle": "cycle",
        "seg": "seg",
    },
    "joint": {
        "photo": "photo",
        "depth": "depth",
        "seg": "seg",
        "normal": "normal",
    },
}


class EmptySupervisionError(ValueError):
    """A loss was asked to average over zero valid pixels."""


def _check_same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(
            f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ."
        )


def _valid(mask: Tensor | None, like: Tensor, what: str) -> Tensor:
    if mask is None:
        mask = torch.ones(like.shape[:2], dtype=torch.bool)
    mask = mask.bool()
    if mask.shape != like.shape[:2]:
        raise ValueError(
            f"{what}: mask shape {tuple(mask.shape)} does not match "
            f"{tuple(like.shape[:2])}."
        )
    if not mask.any():
        raise EmptySupervisionError(f"{what}: no valid pixels.")
    return mask


def _gaussian_window(dtype: torch.dtype) -> Tensor:
    coords = torch.arange(SSIM_WINDOW, dtype=dtype) - SSIM_WINDOW // 2
    g = torch.exp(-(coords**2) / (2 * SSIM_SIGMA**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim_map(pred: Tensor, gt: Tensor) -> Tensor:
    """Per-pixel SSIM of [H, W, C] images, averaged over channels."""
    _check_same_shape(pred, gt, "SSIM")
    channels = pred.shape[-1]
    window = _gaussian_window(pred.dtype).expand(channels, 1, -1, -1)
    x = pred.permute(2, 0, 1)[None]
    y = gt.permute(2, 0, 1)[None]

    def blur(image: Tensor) -> Tensor:
        return F.conv2d(
            image, window, padding=SSIM_WINDOW // 2, groups=channels
        )

    mu_x, mu_y = blur(x), blur(y)
    sigma_x = blur(x * x) - mu_x**2
    sigma_y = blur(y * y) - mu_y**2
    sigma_xy = blur(x * y) - mu_x * mu_y
    numerator = (2 * mu_x * mu_y + SSIM_C1) * (2 * sigma_xy + SSIM_C2)
    denominator = (mu_x**2 + mu_y**2 + SSIM_C1) * (
        sigma_x + sigma_y + SSIM_C2
    )
    return (numerator / denominator)[0].mean(dim=0)


def photometric_loss(
    pred: Tensor,
    gt: Tensor,
    valid_mask: Tensor | None = None,
    mode: Literal["mse", "l1_ssim"] = "mse",
) -> Tensor:
    """MSE over valid pixels, or L1 + 0.2·(1 − SSIM) for refinement."""
    _check_same_shape(pred, gt, "Photometric loss")
    mask = _valid(valid_mask, pred, "Photometric loss")
    if mode == "mse":
        return ((pred - gt) ** 2)[mask].mean()
    if mode == "l1_ssim":
        weight = mask[..., None].to(pred.dtype)
        l1 = (pred - gt).abs()[mask].mean()
        ssim = ssim_map(pred * weight, gt * weight)[mask].mean()
        return l1 + DSSIM_WEIGHT * (1.0 - ssim)
    raise ValueError(f"Unknown photometric mode '{mode}'.")


def depth_loss(
    pred_depth: Tensor, ref_depth: Tensor, valid_mask: Tensor | None = None
) -> Tensor:
    """Mean squared depth error where the reference is positive."""
    _check_same_shape(pred_depth, ref_depth, "Depth loss")
    mask = ref_depth > 0
    if valid_mask is not None:
        mask = mask & valid_mask.bool()
    if not mask.any():
        raise EmptySupervisionError("Depth loss: no valid reference depth.")
    return ((pred_depth - ref_depth) ** 2)[mask].mean()


def eikonal_loss(sdf_gradients: Tensor) -> Tensor:
    if sdf_gradients.numel() == 0:
        raise EmptySupervisionError("Eikonal loss: no gradient samples.")
    return ((sdf_gradients.norm(dim=-1) - 1.0) ** 2).mean()


def flow_loss(
    pred_flow: Tensor, ref_flow: Tensor, valid_mask: Tensor | None = None
) -> Tensor:
    _check_same_shape(pred_flow, ref_flow, "Flow loss")
    mask = _valid(valid_mask, pred_flow, "Flow loss")
    if not torch.isfinite(ref_flow[mask]).all():
        raise ValueError("Flow loss: reference flow is not finite.")
    return ((pred_flow - ref_flow) ** 2).sum(dim=-1)[mask].mean()


def seg_loss(pred_masks: Tensor, ref_masks: Tensor) -> Tensor:
    """Per-object mean squared error, summed over object channels."""
    if pred_masks.shape[-1] != ref_masks.shape[-1]:
        raise ValueError(
            f"Segmentation loss: {pred_masks.shape[-1]} predicted channels "
            f"but {ref_masks.shape[-1]} reference channels."
        )
    _check_same_shape(pred_masks, ref_masks, "Segmentation loss")
    if pred_masks.shape[-1] == 0:
        return pred_masks.new_zeros(())
    per_channel = ((pred_masks - ref_masks) ** 2).mean(dim=(0, 1))
    return per_channel.sum()


def normal_loss(
    pred_normals: Tensor,
    ref_normals: Tensor,
    valid_mask: Tensor | None = None,
) -> Tensor:
    _check_same_shape(pred_normals, ref_normals, "Normal loss")
    mask = _valid(valid_mask, pred_normals, "Normal loss")
    norms = ref_normals[mask].norm(dim=-1)
    if ((norms - 1.0).abs() > UNIT_TOLERANCE).any():
        raise ValueError("Normal loss: reference normals are not unit length.")
    return ((pred_normals - ref_normals) ** 2).sum(dim=-1)[mask].mean()


def cycle_loss(
    samples: Tensor,
    object_ids: Tensor,
    deformation: "DeformationModel",
    t: float,
    t_next: float,
) -> Tensor:
    """Σ_j λ_j Σ_i β_ij ‖F_fwd(t_next)(F_bwd(t)(X_i)) − X_i‖²

    with β_ij = 1/M_j.

    Args:
        samples (Tensor): frame-space points at time t, [M, 3].
        object_ids (Tensor): owning object of each sample, [M].
        deformation (DeformationModel): the warp under test.
        t (float): time of the samples.
        t_next (float): time the canonical points are warped back to.
    """
    total = samples.new_zeros(())
    for object_id in object_ids.unique().tolist():
        points = samples[object_ids == object_id]
        canonical = deformation.warp_frame_to_canonical(
            points, t, object_id
        )
        back = deformation.warp_canonical_to_frame(
            canonical, t_next, object_id
        )
        residual = ((back - points) ** 2).sum(dim=-1).mean()
        total = total + deformation.cycle_weights[object_id - 1] * residual
    return total


@dataclass
class LossBreakdown:
    terms: Dict[str, Tensor]
    """Unweighted term values."""
    weights: Dict[str, float]
    total: Tensor

    def as_floats(self) -> Dict[str, float]:
        values = {name: float(value) for name, value in self.terms.items()}
        values["total"] = float(self.total)
        return values


def composite_loss(
    stage: Stage, terms: Dict[str, Tensor], weights: LossWeights
) -> LossBreakdown:
    """Weighted sum of the stage's terms.

    Raises:
        ValueError: when a term the stage requires is missing.
    """
    if stage not in STAGE_TERMS:
        raise ValueError(f"Unknown loss stage '{stage}'.")
    required = STAGE_TERMS[stage]
    missing = [name for name in required if name not in terms]
    if missing:
        raise ValueError(
            f"Stage '{stage}' requires loss terms {missing} which were not "
            "supplied."
        )
    used = {name: getattr(weights, field) for name, field in required.items()}
    total = sum(
        used[name] * torch.as_tensor(terms[name]) for name in required
    )
    return LossBreakdown(
        terms={name: torch.as_tensor(terms[name]) for name in required},
        weights=used,
        total=total,
    )


def metric_psnr(pred: Tensor, gt: Tensor, max_value: float = 1.0) -> float:
    _check_same_shape(pred, gt, "PSNR")
    mse = float(((pred - gt) ** 2).mean())
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(max_value**2 / mse))


def metric_ssim(pred: Tensor, gt: Tensor) -> float:
    return float(ssim_map(pred, gt).mean())


def _depth_pairs(pred: Tensor, gt: Tensor) -> tuple[Tensor, Tensor]:
    _check_same_shape(pred, gt, "Depth metric")
    valid = gt > 0
    if not valid.any():
        raise EmptySupervisionError("Depth metric: no valid ground truth.")
    return pred[valid], gt[valid]


def metric_depth_acc(
    pred: Tensor, gt: Tensor, threshold: float = 0.1
) -> float:
    """Share of valid pixels whose depth error is below `threshold`."""
    pred, gt = _depth_pairs(pred, gt)
    return float(((pred - gt).abs() < threshold).to(pred.dtype).mean())


def metric_depth_rmse(pred: Tensor, gt: Tensor) -> float:
    pred, gt = _depth_pairs(pred, gt)
    return float(torch.sqrt(((pred - gt) ** 2).mean()))
