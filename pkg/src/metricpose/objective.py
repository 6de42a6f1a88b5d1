"""Training objective: VCRE, the hypothesis expectation and its gradient estimator."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import DomainError
from .geometry import DTYPE, Intrinsics, Pose, as_tensor, project

BEHIND_CAMERA_DEPTH = 1e-6


def virtual_grid(cube_dims=(2.1, 1.2, 2.1), spacing: float | None = 0.3, counts=None, near: float = 1.0):
    """Uniform lattice of virtual 3D points in the query camera frame.

    With ``spacing`` the lattice steps by exactly ``spacing`` and stays inside
    the cube (half-open per axis: 7 x 4 x 7 = 196 points for the defaults).
    With ``counts`` each axis is an inclusive ``linspace`` over the cube edge.
    The lattice is centered on the optical axis in x and y and starts ``near``
    meters in front of the camera.
    """
    dims = np.asarray(cube_dims, dtype=float)
    if dims.shape != (3,) or np.any(dims <= 0):
        raise DomainError("cube dimensions must be three positive numbers")
    if counts is not None:
        axes = [np.linspace(0.0, d, int(c)) for d, c in zip(dims, counts)]
    else:
        if spacing is None or not spacing > 0:
            raise DomainError("spacing must be positive")
        if spacing > dims.max():
            raise DomainError("spacing exceeds every cube dimension")
        axes = [np.arange(math.ceil(d / spacing - 1e-9)) * spacing for d in dims]
    # center the occupied lattice extent, not the nominal cube
    axes[0] = axes[0] - axes[0][-1] / 2
    axes[1] = axes[1] - axes[1][-1] / 2
    axes[2] = axes[2] + near
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return torch.as_tensor(np.stack([gx, gy, gz], axis=-1).reshape(-1, 3), dtype=DTYPE)


def relative_error_rt(R, t, R_gt, t_gt):
    """``h * inverse(h_gt)`` for batched rotations/translations."""
    Re = R @ R_gt.transpose(-1, -2)
    te = t - (Re @ t_gt.unsqueeze(-1)).squeeze(-1)
    return Re, te


def vcre_rt(R, t, R_gt, t_gt, K: Intrinsics, grid, return_flag: bool = False):
    """Batched VCRE in pixels; poses broadcast over leading dims."""
    grid = as_tensor(grid)
    Re, te = relative_error_rt(R, t, as_tensor(R_gt), as_tensor(t_gt))
    moved = grid @ Re.transpose(-1, -2) + te.unsqueeze(-2)
    ref = project(grid, K)
    err = torch.linalg.vector_norm(project(moved, K, min_depth=BEHIND_CAMERA_DEPTH) - ref, dim=-1).mean(-1)
    if return_flag:
        return err, (moved[..., 2] <= BEHIND_CAMERA_DEPTH).any(-1)
    return err


def vcre(h: Pose, h_gt: Pose, K: Intrinsics, grid=None, return_flag: bool = False):
    """Mean reprojection error of the virtual grid under ``h * inverse(h_gt)``.

    Points pushed behind the camera are clamped to a tiny positive depth,
    which keeps the value finite but very large; ``return_flag`` reports it.
    """
    grid = virtual_grid() if grid is None else grid
    return vcre_rt(h.rotation, h.translation, h_gt.rotation, h_gt.translation, K, grid, return_flag)


@dataclass(frozen=True)
class NullHypothesisConfig:
    inlier_fraction: float = 0.30  # s0 = fraction * |Y|
    max_vcre: float = 120.0

    def __post_init__(self):
        if not (self.inlier_fraction > 0 and self.max_vcre > 0):
            raise DomainError("null hypothesis needs positive score and loss")

    def score(self, set_size: int) -> float:
        return self.inlier_fraction * set_size


def hypothesis_weights(scores, valid=None, null_score: float | None = None) -> torch.Tensor:
    """Softmax over scores (plus a trailing null entry when ``null_score`` is given)."""
    scores = as_tensor(scores)
    if valid is not None:
        scores = torch.where(torch.as_tensor(valid), scores, torch.full_like(scores, -math.inf))
    if null_score is not None:
        null = torch.full(scores.shape[:-1] + (1,), float(null_score), dtype=DTYPE)
        scores = torch.cat([scores, null], dim=-1)
    return torch.softmax(scores, dim=-1)


def expected_set_loss(scores, losses, null: NullHypothesisConfig | None = None, set_size: int | None = None,
                      valid=None) -> torch.Tensor:
    """Exact expectation of ``losses`` under ``softmax(scores)`` over the last axis.

    With ``null`` the pool gains a hypothesis of score ``null.score(set_size)``
    and loss ``null.max_vcre``.  Invalid hypotheses get zero weight.
    """
    scores = as_tensor(scores)
    losses = as_tensor(losses)
    if scores.shape[-1] < 1:
        raise DomainError("need at least one hypothesis")
    if valid is not None:
        losses = torch.where(torch.as_tensor(valid), losses, torch.zeros_like(losses))
    if null is None:
        w = hypothesis_weights(scores, valid)
        return (w * losses).sum(-1)
    if set_size is None:
        raise DomainError("set_size is required to place the null hypothesis")
    w = hypothesis_weights(scores, valid, null.score(set_size))
    pad = torch.full(losses.shape[:-1] + (1,), null.max_vcre, dtype=DTYPE)
    return (w * torch.cat([losses, pad], dim=-1)).sum(-1)


def reinforce_gradients(losses, log_prob_grads, pathwise_grads=None):
    """Score-function estimate with a mean baseline plus the pathwise term.

    ``losses``: (Q,); ``log_prob_grads``: (Q, ...) gradients of each sample's
    log-probability wrt the sampling parameters; ``pathwise_grads``: (Q, ...)
    gradients of each loss wrt the geometry parameters, or None.
    Returns ``(score_term, pathwise_term)``, each averaged over samples.
    """
    losses = as_tensor(losses)
    if losses.ndim != 1 or losses.shape[0] < 2:
        raise DomainError("the baseline needs at least two samples")
    adv = losses - losses.mean()
    g = as_tensor(log_prob_grads)
    score = (adv.reshape((-1,) + (1,) * (g.ndim - 1)) * g).mean(0)
    path = None if pathwise_grads is None else as_tensor(pathwise_grads).mean(0)
    return score, path


def reinforce_surrogate(losses, log_probs) -> torch.Tensor:
    """Scalar whose gradient equals the baseline-corrected estimator.

    ``losses`` keep their graph to the geometry parameters (pathwise term);
    ``log_probs`` carry the graph to the sampling parameters.
    """
    losses = as_tensor(losses)
    if losses.shape[0] < 2:
        raise DomainError("the baseline needs at least two samples")
    adv = (losses - losses.mean()).detach()
    return (adv * log_probs).mean() + losses.mean()


@dataclass(frozen=True)
class CurriculumSchedule:
    start_fraction: float = 0.30
    increment_fraction: float = 0.10
    increment_interval: int = 4000
    max_fraction: float = 0.80
    warmup_end: int = 20000
    enabled: bool = True

    def __post_init__(self):
        if not (0 < self.start_fraction <= self.max_fraction <= 1):
            raise DomainError("curriculum fractions must satisfy 0 < start <= max <= 1")
        if self.increment_fraction < 0 or self.increment_interval < 1:
            raise DomainError("invalid curriculum increment")

    def bounds(self, batch_size: int) -> tuple[int, int]:
        b_min = max(1, int(math.floor(self.start_fraction * batch_size + 1e-9)))
        b_max = max(b_min, int(math.floor(self.max_fraction * batch_size + 1e-9)))
        return b_min, b_max

    def size(self, iteration: int, batch_size: int) -> int:
        if not self.enabled:
            return batch_size
        b_min, b_max = self.bounds(batch_size)
        if iteration >= self.warmup_end:
            return b_max
        steps = iteration // self.increment_interval
        k = int(math.floor(batch_size * (self.start_fraction + steps * self.increment_fraction) + 1e-9))
        return min(max(k, b_min), b_max)


def curriculum_select(losses, iteration: int, schedule: CurriculumSchedule) -> np.ndarray:
    """Indices of the ``k`` lowest losses (ties by index), ``k`` from the schedule."""
    losses = np.asarray(as_tensor(losses).detach().numpy(), dtype=float).reshape(-1)
    if losses.size == 0:
        raise DomainError("empty batch")
    k = schedule.size(iteration, losses.size)
    return np.sort(np.argsort(losses, kind="stable")[:k])
