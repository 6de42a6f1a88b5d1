"""Pinhole cameras, rigid poses and the grid-offset keypoint parameterization.

Conventions
-----------
* All arithmetic is float64 torch tensors; array-likes are converted on entry.
* A :class:`Pose` maps points from the frame of image I into the frame of
  image I': ``x' = R @ x + t``.
* Grid cell ``(i, j)`` is column ``i`` and row ``j``; flattened cell index is
  ``j * w + i`` (row-major over an ``(h, w)`` map).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import DomainError

DTYPE = torch.float64
ORTHO_TOL = 1e-9


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(x, dtype=DTYPE)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise DomainError("principal point must lie inside the image")

    def matrix(self) -> torch.Tensor:
        return torch.tensor(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]], dtype=DTYPE
        )

    def as_tuple(self):
        return (self.fx, self.fy, self.cx, self.cy, self.width, self.height)


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform with a 3x3 rotation and a metric translation."""

    rotation: torch.Tensor
    translation: torch.Tensor

    def __post_init__(self):
        object.__setattr__(self, "rotation", as_tensor(self.rotation).reshape(3, 3))
        object.__setattr__(self, "translation", as_tensor(self.translation).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(torch.eye(3, dtype=DTYPE), torch.zeros(3, dtype=DTYPE))

    @classmethod
    def from_translation(cls, t) -> "Pose":
        return cls(torch.eye(3, dtype=DTYPE), t)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -(rt @ self.translation))

    def compose(self, other: "Pose") -> "Pose":
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def is_valid(self, tol: float = ORTHO_TOL) -> bool:
        r = self.rotation.detach()
        ortho = torch.max(torch.abs(r.T @ r - torch.eye(3, dtype=DTYPE))).item()
        return ortho <= tol and abs(torch.linalg.det(r).item() - 1.0) <= tol

    def detach(self) -> "Pose":
        return Pose(self.rotation.detach(), self.translation.detach())

    def to_list(self) -> list[float]:
        """Row-major rotation followed by translation (12 numbers)."""
        return self.rotation.detach().reshape(-1).tolist() + self.translation.detach().tolist()

    @classmethod
    def from_list(cls, values) -> "Pose":
        v = as_tensor(list(values))
        if v.numel() != 12:
            raise DomainError("a pose needs exactly 12 numbers")
        return cls(v[:9].reshape(3, 3), v[9:])

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(
            torch.allclose(self.rotation, other.rotation, atol=atol, rtol=0)
            and torch.allclose(self.translation, other.translation, atol=atol, rtol=0)
        )

    def __repr__(self):
        return f"Pose(R={self.rotation.tolist()}, t={self.translation.tolist()})"


def rotation_about_axis(axis, angle_rad: float) -> torch.Tensor:
    """Rodrigues formula."""
    a = as_tensor(axis)
    a = a / torch.linalg.vector_norm(a)
    k = torch.tensor(
        [[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]], dtype=DTYPE
    )
    ang = torch.as_tensor(angle_rad, dtype=DTYPE)
    return torch.eye(3, dtype=DTYPE) + torch.sin(ang) * k + (1 - torch.cos(ang)) * (k @ k)


def backproject(u, z, K: Intrinsics) -> torch.Tensor:
    """Lift pixels ``u`` (..., 2) with depths ``z`` (...) to camera points (..., 3)."""
    u = as_tensor(u)
    z = as_tensor(z)
    if torch.any(z.detach() <= 0):
        raise DomainError("backprojection requires positive depth")
    if not torch.all(torch.isfinite(u.detach())):
        raise DomainError("pixel coordinates must be finite")
    x = (u[..., 0] - K.cx) / K.fx * z
    y = (u[..., 1] - K.cy) / K.fy * z
    return torch.stack([x, y, z * torch.ones_like(x)], dim=-1)


def project(x, K: Intrinsics, min_depth: float | None = None) -> torch.Tensor:
    """Pinhole projection of camera points (..., 3) to pixels (..., 2).

    With ``min_depth`` set, depths are clamped from below before the division.
    """
    x = as_tensor(x)
    z = x[..., 2]
    if min_depth is not None:
        z = z.clamp_min(min_depth)
    return torch.stack([K.fx * x[..., 0] / z + K.cx, K.fy * x[..., 1] / z + K.cy], dim=-1)


def transform(h: Pose, x) -> torch.Tensor:
    x = as_tensor(x)
    if x.dim() == 1:
        return h.rotation @ x + h.translation
    return transform_rt(h.rotation, h.translation, x)


def transform_rt(R: torch.Tensor, t: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Apply (batched) rotations ``R`` (..., 3, 3) and translations (..., 3) to points (..., n, 3)."""
    return x @ R.transpose(-1, -2) + t.unsqueeze(-2)


def residual(x, x_prime, h: Pose) -> torch.Tensor:
    """Euclidean 3D distance between ``h(x)`` and ``x'`` (batched over leading dims)."""
    return torch.linalg.vector_norm(transform(h, x) - as_tensor(x_prime), dim=-1)


def residuals_rt(R, t, x, x_prime) -> torch.Tensor:
    return torch.linalg.vector_norm(transform_rt(R, t, x) - x_prime, dim=-1)


def grid_to_pixel(offset, cell, f: int = 14) -> torch.Tensor:
    """Absolute pixel position of a keypoint predicted as an offset inside grid cell ``(i, j)``."""
    offset = as_tensor(offset)
    o = offset.detach()
    if torch.any(o < 0) or torch.any(o > 1):
        raise DomainError("offsets must lie in [0, 1]")
    i, j = cell
    return f * torch.stack([offset[..., 0] + i, offset[..., 1] + j], dim=-1)


def grid_pixels(offsets, f: int = 14) -> torch.Tensor:
    """Pixel positions for a full ``(h, w, 2)`` offset map."""
    offsets = as_tensor(offsets)
    o = offsets.detach()
    if torch.any(o < 0) or torch.any(o > 1):
        raise DomainError("offsets must lie in [0, 1]")
    h, w = offsets.shape[:2]
    jj, ii = torch.meshgrid(
        torch.arange(h, dtype=DTYPE), torch.arange(w, dtype=DTYPE), indexing="ij"
    )
    return f * torch.stack([offsets[..., 0] + ii, offsets[..., 1] + jj], dim=-1)


def rotation_angle_deg(R) -> float:
    """Geodesic angle of a rotation matrix in degrees."""
    R = as_tensor(R).detach()
    # atan2 form keeps precision near 0 and 180 degrees
    a = R - R.T
    s = 0.5 * torch.linalg.vector_norm(torch.stack([a[2, 1], a[0, 2], a[1, 0]]))
    c = (torch.trace(R) - 1.0) / 2.0
    return float(torch.rad2deg(torch.atan2(s, c)))
