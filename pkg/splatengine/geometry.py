"""Rigid-motion kernels: SE(3) exponential and logarithm, quaternions and dual
quaternions. Every function is batched over leading dimensions and
differentiable through torch autograd."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import Tensor

SMALL_ANGLE = 1e-6
"""Rotation angles below this (radians) use series expansions."""
LOG_ANGLE_LIMIT = math.pi - 1e-6
"""se3_log is undefined at and beyond this angle."""
DEGENERATE_NORM = 1e-12


class AmbiguousLogError(ValueError):
    """The logarithm of a rotation of (nearly) π radians is not unique."""


class DegenerateBlendError(ValueError):
    """A dual-quaternion blend collapsed to zero."""


def check_finite(value: Tensor, name: str) -> None:
    if not torch.isfinite(value).all():
        raise ValueError(f"{name} contains non-finite values.")


def _cross(a: Tensor, b: Tensor) -> Tensor:
    a, b = torch.broadcast_tensors(a, b)
    return torch.linalg.cross(a, b, dim=-1)


def quat_multiply(a: Tensor, b: Tensor) -> Tensor:
    """Hamilton product of (w, x, y, z) quaternions."""
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


def quat_conjugate(q: Tensor) -> Tensor:
    return torch.cat([q[..., :1], -q[..., 1:]], dim=-1)


def quat_normalize(q: Tensor) -> Tensor:
    return q / q.norm(dim=-1, keepdim=True)


def quat_rotate(q: Tensor, v: Tensor) -> Tensor:
    """Rotate vectors `v` by unit quaternions `q`."""
    w = q[..., :1]
    u = q[..., 1:]
    uv = _cross(u, v)
    return v + 2.0 * (w * uv + _cross(u, uv))


def quat_to_matrix(q: Tensor) -> Tensor:
    w, x, y, z = q.unbind(-1)
    return torch.stack(
        [
            1 - 2 * (y * y + z * z),
            2 * (x * y - w * z),
            2 * (x * z + w * y),
            2 * (x * y + w * z),
            1 - 2 * (x * x + z * z),
            2 * (y * z - w * x),
            2 * (x * z - w * y),
            2 * (y * z + w * x),
            1 - 2 * (x * x + y * y),
        ],
        dim=-1,
    ).reshape(*q.shape[:-1], 3, 3)


def matrix_to_quat(matrix: Tensor) -> Tensor:
    """Convert rotation matrices to unit quaternions with w ≥ 0."""
    m = matrix
    m00, m11, m22 = m[..., 0, 0], m[..., 1, 1], m[..., 2, 2]
    candidates_sq = torch.stack(
        [
            1 + m00 + m11 + m22,
            1 + m00 - m11 - m22,
            1 - m00 + m11 - m22,
            1 - m00 - m11 + m22,
        ],
        dim=-1,
    )
    # Shepperd: divide by the largest component for stability.
    best = candidates_sq.argmax(dim=-1)
    root = torch.sqrt(candidates_sq.clamp(min=1e-30))
    rows = torch.stack(
        [
            torch.stack(
                [
                    root[..., 0] ** 2,
                    m[..., 2, 1] - m[..., 1, 2],
                    m[..., 0, 2] - m[..., 2, 0],
                    m[..., 1, 0] - m[..., 0, 1],
                ],
                dim=-1,
            ),
            torch.stack(
                [
                    m[..., 2, 1] - m[..., 1, 2],
                    root[..., 1] ** 2,
                    m[..., 1, 0] + m[..., 0, 1],
                    m[..., 0, 2] + m[..., 2, 0],
                ],
                dim=-1,
            ),
            torch.stack(
                [
                    m[..., 0, 2] - m[..., 2, 0],
                    m[..., 1, 0] + m[..., 0, 1],
                    root[..., 2] ** 2,
                    m[..., 2, 1] + m[..., 1, 2],
                ],
                dim=-1,
            ),
            torch.stack(
                [
                    m[..., 1, 0] - m[..., 0, 1],
                    m[..., 0, 2] + m[..., 2, 0],
                    m[..., 2, 1] + m[..., 1, 2],
                    root[..., 3] ** 2,
                ],
                dim=-1,
            ),
        ],
        dim=-2,
    ) / (2.0 * root[..., :, None])
    index = best[..., None, None].expand(*best.shape, 1, 4)
    q = torch.gather(rows, -2, index).squeeze(-2)
    q = quat_normalize(q)
    return torch.where(q[..., :1] < 0, -q, q)


@dataclass(frozen=True)
class Twist:
    """An se(3) element: rotational part `omega` (radians) and translational
    part `vee` (scene units), each of shape [..., 3]."""

    omega: Tensor
    vee: Tensor

    @classmethod
    def from_vector(cls, vector: Tensor) -> "Twist":
        return cls(omega=vector[..., :3], vee=vector[..., 3:])

    @classmethod
    def zeros(cls, *shape: int, dtype=torch.float64) -> "Twist":
        return cls.from_vector(torch.zeros(*shape, 6, dtype=dtype))

    def as_vector(self) -> Tensor:
        return torch.cat([self.omega, self.vee], dim=-1)


@dataclass(frozen=True)
class RigidTransform:
    """A rotation (unit quaternion, [..., 4]) followed by a translation
    ([..., 3]): p ↦ R·p + t."""

    rotation: Tensor
    translation: Tensor

    @classmethod
    def identity(cls, *shape: int, dtype=torch.float64) -> "RigidTransform":
        rotation = torch.zeros(*shape, 4, dtype=dtype)
        rotation[..., 0] = 1.0
        return cls(rotation, torch.zeros(*shape, 3, dtype=dtype))

    @classmethod
    def from_translation(cls, translation: Tensor) -> "RigidTransform":
        rotation = torch.zeros(
            *translation.shape[:-1], 4, dtype=translation.dtype
        )
        rotation[..., 0] = 1.0
        return cls(rotation, translation)

    @classmethod
    def from_matrix(cls, matrix: Tensor, translation: Tensor):
        return cls(matrix_to_quat(matrix), translation)

    @classmethod
    def stack(
        cls, transforms: Sequence["RigidTransform"], dim: int = 0
    ) -> "RigidTransform":
        """Stack along a leading dimension; negative `dim` counts from the
        last leading dimension."""
        dim = dim if dim >= 0 else dim - 1
        return cls(
            torch.stack([t.rotation for t in transforms], dim=dim),
            torch.stack([t.translation for t in transforms], dim=dim),
        )

    @property
    def shape(self) -> torch.Size:
        return self.translation.shape[:-1]

    def __getitem__(self, index) -> "RigidTransform":
        if not isinstance(index, tuple):
            index = (index,)
        index = index + (slice(None),)
        return RigidTransform(self.rotation[index], self.translation[index])

    def unsqueeze(self, dim: int) -> "RigidTransform":
        dim = dim if dim >= 0 else dim - 1
        return RigidTransform(
            self.rotation.unsqueeze(dim), self.translation.unsqueeze(dim)
        )

    def matrix(self) -> Tensor:
        return quat_to_matrix(self.rotation)

    def apply(self, points: Tensor) -> Tensor:
        return quat_rotate(self.rotation, points) + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """`self ∘ other`: apply `other` first."""
        return RigidTransform(
            quat_multiply(self.rotation, other.rotation),
            quat_rotate(self.rotation, other.translation) + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rotation = quat_conjugate(self.rotation)
        return RigidTransform(
            rotation, -quat_rotate(rotation, self.translation)
        )

    def detach(self) -> "RigidTransform":
        return RigidTransform(
            self.rotation.detach(), self.translation.detach()
        )


@dataclass(frozen=True)
class DualQuaternion:
    real: Tensor
    dual: Tensor

    @classmethod
    def from_transform(cls, transform: RigidTransform) -> "DualQuaternion":
        real = transform.rotation
        pure = torch.cat(
            [
                torch.zeros_like(transform.translation[..., :1]),
                transform.translation,
            ],
            dim=-1,
        )
        return cls(real=real, dual=0.5 * quat_multiply(pure, real))

    def to_transform(self) -> RigidTransform:
        translation = 2.0 * quat_multiply(
            self.dual, quat_conjugate(self.real)
        )
        return RigidTransform(self.real, translation[..., 1:])


def se3_exp(twist: Twist) -> RigidTransform:
    """Exponentiate a twist with Rodrigues' formula and the SE(3) V-matrix."""
    omega, vee = twist.omega, twist.vee
    check_finite(omega, "Twist omega")
    check_finite(vee, "Twist vee")

    theta_sq = (omega * omega).sum(dim=-1, keepdim=True)
    small = theta_sq < SMALL_ANGLE**2
    theta_sq_safe = torch.where(small, torch.ones_like(theta_sq), theta_sq)
    theta = torch.sqrt(theta_sq_safe)

    real = torch.where(small, 1.0 - theta_sq / 8.0, torch.cos(theta / 2.0))
    half_sinc = torch.where(
        small, 0.5 - theta_sq / 48.0, torch.sin(theta / 2.0) / theta
    )
    rotation = torch.cat([real, half_sinc * omega], dim=-1)

    b = torch.where(
        small, 0.5 - theta_sq / 24.0, (1.0 - torch.cos(theta)) / theta_sq_safe
    )
    c = torch.where(
        small,
        1.0 / 6.0 - theta_sq / 120.0,
        (theta - torch.sin(theta)) / (theta_sq_safe * theta),
    )
    omega_vee = _cross(omega, vee)
    translation = vee + b * omega_vee + c * _cross(omega, omega_vee)
    return RigidTransform(rotation, translation)


def se3_log(transform: RigidTransform) -> Twist:
    q = transform.rotation
    q = torch.where(q[..., :1] < 0, -q, q)
    w = q[..., :1]
    u = q[..., 1:]

    sin_half_sq = (u * u).sum(dim=-1, keepdim=True)
    sin_half = torch.sqrt(
        torch.where(sin_half_sq > 0, sin_half_sq, torch.ones_like(w))
    )
    theta = 2.0 * torch.atan2(sin_half, w)
    small = (sin_half_sq <= 0) | (theta < SMALL_ANGLE)
    if (~small & (theta >= LOG_ANGLE_LIMIT)).any():
        worst = float(theta.max())
        raise AmbiguousLogError(
            f"Rotation angle {worst:.9f} rad is too close to π for a unique "
            "logarithm."
        )

    scale = torch.where(
        small,
        2.0 / w * (1.0 - sin_half_sq / (3.0 * w * w)),
        theta / sin_half,
    )
    omega = scale * u

    theta_sq = (omega * omega).sum(dim=-1, keepdim=True)
    theta_sq_safe = torch.where(small, torch.ones_like(theta_sq), theta_sq)
    d = torch.where(
        small,
        1.0 / 12.0 + theta_sq / 720.0,
        (1.0 - 0.5 * theta * w / sin_half) / theta_sq_safe,
    )
    t = transform.translation
    omega_t = _cross(omega, t)
    vee = t - 0.5 * omega_t + d * _cross(omega, omega_t)
    return Twist(omega=omega, vee=vee)


def se3_apply(transform: RigidTransform, points: Tensor) -> Tensor:
    check_finite(points, "Points")
    return transform.apply(points)


def se3_inverse(transform: RigidTransform) -> RigidTransform:
    return transform.inverse()


def se3_compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return a.compose(b)


def dq_blend(
    transforms: RigidTransform | Sequence[RigidTransform], weights: Tensor
) -> RigidTransform:
    """Blend rigid transforms by normalised weighted dual-quaternion sums.

    Args:
        transforms: transforms with the blended axis last among the leading
            dimensions (shape [..., B]), or a list of B transforms.
        weights: simplex weights of shape [..., B].

    Returns:
        RigidTransform: the blended transform with shape [...].
    """
    if not isinstance(transforms, RigidTransform):
        transforms = RigidTransform.stack(list(transforms), dim=-1)
    check_finite(weights, "Blend weights")
    if (weights < 0).any():
        raise ValueError("Blend weights must be non-negative.")
    total = weights.sum(dim=-1)
    if (total == 0).any():
        raise DegenerateBlendError("All blend weights are zero.")
    if ((total - 1.0).abs() > 1e-6).any():
        raise ValueError(
            f"Blend weights must sum to 1 (got {float(total.max())})."
        )

    dq = DualQuaternion.from_transform(transforms)
    shape = torch.broadcast_shapes(dq.real.shape[:-1], weights.shape)
    real = dq.real.expand(*shape, 4)
    dual = dq.dual.expand(*shape, 4)
    weights = weights.expand(shape)

    # Sign-align against the heaviest bone; argmax breaks ties by index.
    pivot = weights.argmax(dim=-1, keepdim=True)
    pivot_real = torch.gather(
        real, -2, pivot[..., None].expand(*shape[:-1], 1, 4)
    )
    sign = torch.where((real * pivot_real).sum(dim=-1) >= 0, 1.0, -1.0)
    signed = (weights * sign)[..., None]

    blended_real = (signed * real).sum(dim=-2)
    blended_dual = (signed * dual).sum(dim=-2)
    norm = blended_real.norm(dim=-1, keepdim=True)
    if (norm < DEGENERATE_NORM).any():
        raise DegenerateBlendError(
            "Blended dual quaternion has a vanishing real part."
        )
    real = blended_real / norm
    dual = blended_dual / norm
    dual = dual - (real * dual).sum(dim=-1, keepdim=True) * real
    return DualQuaternion(real, dual).to_transform()


def look_at(
    eye: Tensor, target: Tensor, down: Tensor | None = None
) -> RigidTransform:
    """World-to-camera map of a camera at `eye` facing `target`.

    Camera axes follow OpenCV: x right, y down, z forward. `down` is the
    world direction that should appear downward, +y by default.
    """
    if down is None:
        down = torch.tensor([0.0, 1.0, 0.0], dtype=eye.dtype)
    forward = target - eye
    forward = forward / forward.norm(dim=-1, keepdim=True)
    right = _cross(down, forward)
    norm = right.norm(dim=-1, keepdim=True)
    if (norm < 1e-9).any():
        raise ValueError("Camera forward direction is parallel to `down`.")
    right = right / norm
    below = _cross(forward, right)
    rotation = torch.stack([right, below, forward], dim=-2)
    translation = -(rotation @ eye[..., None])[..., 0]
    return RigidTransform.from_matrix(rotation, translation)
