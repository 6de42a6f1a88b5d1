"""Probabilistic selection of 3D-3D keypoint correspondences.

The probability of drawing the pair ``(i, j)`` is

    P(i, j) = P_I(i) * P_fwd(j | i) * P_I'(j) * P_bwd(i | j)

with spatial softmaxes over confidence logits for the keypoint terms and a
dual softmax (with a shared dustbin logit) over descriptor similarities for
the matching terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DomainError, EmptyDistributionError, ShapeError, SupportError
from .geometry import DTYPE, Intrinsics, as_tensor
from .keypoints import KeypointMaps

MIN_SAMPLE_PROB = 1e-30


@dataclass(frozen=True, eq=False)
class MatchDistribution:
    forward: torch.Tensor  # P(j | i), rows over j, dustbin removed
    backward: torch.Tensor  # P(i | j), columns over i, dustbin removed
    mutual: torch.Tensor  # forward * backward


@dataclass(frozen=True, eq=False)
class CorrespondenceProbability:
    forward: torch.Tensor
    backward: torch.Tensor
    keypoints_a: torch.Tensor
    keypoints_b: torch.Tensor
    P: torch.Tensor

    @property
    def mutual(self) -> torch.Tensor:
        return self.forward * self.backward

    @property
    def keypoint_joint(self) -> torch.Tensor:
        return self.keypoints_a[:, None] * self.keypoints_b[None, :]

    @property
    def shape(self):
        return tuple(self.P.shape)


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Sampled pairs; ``cells_a``/``cells_b`` are flattened cell indices."""

    cells_a: np.ndarray
    cells_b: np.ndarray
    x_a: torch.Tensor
    x_b: torch.Tensor
    prob: torch.Tensor

    def __len__(self):
        return len(self.cells_a)

    def subset(self, indices) -> "CorrespondenceSet":
        idx = np.asarray(indices, dtype=np.int64)
        t = torch.as_tensor(idx)
        return CorrespondenceSet(self.cells_a[idx], self.cells_b[idx], self.x_a[t], self.x_b[t], self.prob[t])

    @classmethod
    def from_points(cls, x_a, x_b, prob=None) -> "CorrespondenceSet":
        x_a = as_tensor(x_a)
        x_b = as_tensor(x_b)
        n = x_a.shape[0]
        if prob is None:
            prob = torch.full((n,), 1.0 / max(n, 1), dtype=DTYPE)
        ar = np.arange(n)
        return cls(ar, ar.copy(), x_a, x_b, as_tensor(prob))


def similarity_matrix(desc_a, desc_b) -> torch.Tensor:
    """Cosine similarities between all descriptors (grids are flattened)."""
    desc_a = as_tensor(desc_a)
    desc_b = as_tensor(desc_b)
    if desc_a.shape[-1] != desc_b.shape[-1]:
        raise ShapeError(f"descriptor length mismatch: {desc_a.shape[-1]} vs {desc_b.shape[-1]}")
    a = desc_a.reshape(-1, desc_a.shape[-1])
    b = desc_b.reshape(-1, desc_b.shape[-1])
    return a @ b.T


def match_distribution(m, temperature: float = 0.1, dustbin=1.0) -> MatchDistribution:
    """Dual softmax over ``m / temperature``.

    ``dustbin`` is a single logit (float or 0-d tensor, possibly learnable)
    appended as an extra column for the row softmax and an extra row for the
    column softmax, then dropped.  ``None`` disables it.
    """
    if not temperature > 0:
        raise DomainError("softmax temperature must be positive")
    m = as_tensor(m)
    if dustbin is None:
        fwd = torch.softmax(m / temperature, dim=1)
        bwd = torch.softmax(m / temperature, dim=0)
    else:
        db = as_tensor(dustbin).reshape(())
        col = db.expand(m.shape[0], 1)
        row = db.expand(1, m.shape[1])
        fwd = torch.softmax(torch.cat([m, col], dim=1) / temperature, dim=1)[:, :-1]
        bwd = torch.softmax(torch.cat([m, row], dim=0) / temperature, dim=0)[:-1, :]
    return MatchDistribution(fwd, bwd, fwd * bwd)


def keypoint_distribution(confidence) -> torch.Tensor:
    """Spatial softmax over all confidence logits; output keeps the input shape."""
    c = as_tensor(confidence)
    return torch.softmax(c.reshape(-1), dim=0).reshape(c.shape)


def correspondence_probability(forward, backward, keypoints_a, keypoints_b) -> CorrespondenceProbability:
    forward = as_tensor(forward)
    backward = as_tensor(backward)
    ka = as_tensor(keypoints_a).reshape(-1)
    kb = as_tensor(keypoints_b).reshape(-1)
    if forward.shape != backward.shape or forward.shape != (ka.numel(), kb.numel()):
        raise ShapeError(
            f"factor shapes disagree: fwd {tuple(forward.shape)}, bwd {tuple(backward.shape)}, "
            f"keypoints {ka.numel()} x {kb.numel()}"
        )
    P = (ka[:, None] * forward) * (kb[None, :] * backward)
    return CorrespondenceProbability(forward, backward, ka, kb, P)


def correspondence_model(maps_a: KeypointMaps, maps_b: KeypointMaps, temperature: float = 0.1, dustbin=1.0):
    """Full probability matrix for a pair of keypoint maps."""
    m = similarity_matrix(maps_a.descriptors, maps_b.descriptors)
    match = match_distribution(m, temperature, dustbin)
    return correspondence_probability(
        match.forward, match.backward,
        keypoint_distribution(maps_a.confidence), keypoint_distribution(maps_b.confidence),
    )


def _sampling_weights(P) -> np.ndarray:
    p = as_tensor(P).detach().reshape(-1).numpy().copy()
    p[~(p >= MIN_SAMPLE_PROB)] = 0.0
    total = p.sum()
    if total <= 0:
        raise EmptyDistributionError("correspondence matrix has no sampleable entry")
    return p / total


def sample_indices(P, size: int, rng: np.random.Generator, replace: bool = False) -> np.ndarray:
    """Draw flat indices of ``P`` proportionally to its entries.

    Without replacement this is successive sampling, done in one shot with
    Gumbel top-k keys so the whole draw costs a single sort.
    """
    p = _sampling_weights(P)
    if size < 1:
        raise DomainError("sample size must be positive")
    if replace:
        return rng.choice(p.size, size=size, replace=True, p=p)
    support = np.count_nonzero(p)
    if size > support:
        raise SupportError(f"cannot draw {size} distinct pairs from a support of {support}")
    with np.errstate(divide="ignore"):
        keys = np.log(p) + rng.gumbel(size=p.size)
    return np.argsort(-keys, kind="stable")[:size]


def set_log_prob(P, flat_indices) -> torch.Tensor:
    """``sum log P_hat(y)`` over the drawn pairs, with ``P_hat`` the normalized matrix."""
    flat = as_tensor(P).reshape(-1)
    idx = torch.as_tensor(np.asarray(flat_indices), dtype=torch.long)
    return torch.log(flat[idx]).sum() - idx.numel() * torch.log(flat.sum())


def gather_set(prob: CorrespondenceProbability, points_a, points_b, flat_indices) -> CorrespondenceSet:
    n_b = prob.P.shape[1]
    flat = np.asarray(flat_indices, dtype=np.int64)
    ia, ib = flat // n_b, flat % n_b
    ta, tb = torch.as_tensor(ia), torch.as_tensor(ib)
    return CorrespondenceSet(ia, ib, points_a[ta], points_b[tb], prob.P.reshape(-1)[torch.as_tensor(flat)])


def sample_set(
    prob: CorrespondenceProbability,
    maps_a: KeypointMaps,
    maps_b: KeypointMaps,
    K_a: Intrinsics,
    K_b: Intrinsics,
    size: int,
    rng: np.random.Generator,
    replace: bool = False,
) -> CorrespondenceSet:
    """Sample ``size`` correspondences and lift both endpoints to 3D."""
    flat = sample_indices(prob.P, size, rng, replace=replace)
    return gather_set(prob, maps_a.points(K_a), maps_b.points(K_b), flat)
