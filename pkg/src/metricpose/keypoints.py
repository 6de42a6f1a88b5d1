"""Dense per-cell keypoint maps predicted for one image."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .geometry import Intrinsics, as_tensor, backproject, grid_pixels


@dataclass(frozen=True, eq=False)
class KeypointMaps:
    """Offsets ``(h, w, 2)`` in [0, 1], depths ``(h, w)``, confidence logits
    ``(h, w)`` and unit descriptors ``(h, w, dim)``."""

    offsets: torch.Tensor
    depth: torch.Tensor
    confidence: torch.Tensor
    descriptors: torch.Tensor
    cell_size: int = 14

    def __post_init__(self):
        for name in ("offsets", "depth", "confidence", "descriptors"):
            object.__setattr__(self, name, as_tensor(getattr(self, name)))
        h, w = self.depth.shape
        if self.offsets.shape != (h, w, 2) or self.confidence.shape != (h, w) or self.descriptors.shape[:2] != (h, w):
            raise ValueError("keypoint maps disagree on grid dimensions")

    @property
    def grid_shape(self) -> tuple[int, int]:
        return tuple(self.depth.shape)

    @property
    def num_cells(self) -> int:
        h, w = self.grid_shape
        return h * w

    def pixels(self) -> torch.Tensor:
        """Absolute keypoint pixels flattened to ``(h*w, 2)``."""
        return grid_pixels(self.offsets, self.cell_size).reshape(-1, 2)

    def points(self, K: Intrinsics) -> torch.Tensor:
        """Camera-frame 3D keypoints flattened to ``(h*w, 3)``."""
        return backproject(self.pixels(), self.depth.reshape(-1), K)

    def flat_descriptors(self) -> torch.Tensor:
        return self.descriptors.reshape(self.num_cells, -1)

    def detach(self) -> "KeypointMaps":
        return KeypointMaps(
            self.offsets.detach(), self.depth.detach(), self.confidence.detach(),
            self.descriptors.detach(), self.cell_size,
        )
