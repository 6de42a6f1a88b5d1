"""Weighted Kabsch alignment of 3D-3D correspondences and its backward pass.

The rotation is the orthogonal polar factor of the transposed cross-covariance,
``H^T = R P`` with ``P = U diag(s1, s2, d*s3) U^T``.  Differentiating that
identity gives a Sylvester equation for ``R^T dR`` whose solution in the
``U`` basis divides by ``s_i' + s_j'``.  The smallest such sum (``s2 + d*s3``)
is reported as the conditioning gap; the backward pass refuses to run when it
collapses.
"""

from __future__ import annotations

from typing import NamedTuple

import torch

from .errors import DegenerateConfigurationError, DomainError, IllConditionedGradientError, ShapeError
from .geometry import DTYPE, Pose, as_tensor

RANK_TOL = 1e-9
GAP_TOL = 1e-8


def _weighted_stats(X, Xp, W):
    wsum = W.sum(-1)
    mu = (W.unsqueeze(-1) * X).sum(-2) / wsum.unsqueeze(-1)
    mup = (W.unsqueeze(-1) * Xp).sum(-2) / wsum.unsqueeze(-1)
    Xc = X - mu.unsqueeze(-2)
    Xpc = Xp - mup.unsqueeze(-2)
    H = torch.einsum("...n,...ni,...nj->...ij", W, Xc, Xpc)
    return wsum, mu, mup, Xc, Xpc, H


class _KabschFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, X, Xp, W):
        wsum, mu, mup, Xc, Xpc, H = _weighted_stats(X, Xp, W)
        U, S, Vh = torch.linalg.svd(H)
        V = Vh.transpose(-1, -2)
        d = torch.sign(torch.linalg.det(V @ U.transpose(-1, -2)))
        d = torch.where(d == 0, torch.ones_like(d), d)
        sig = torch.stack([S[..., 0], S[..., 1], d * S[..., 2]], dim=-1)
        D = torch.diag_embed(torch.stack([torch.ones_like(d), torch.ones_like(d), d], dim=-1))
        R = V @ D @ U.transpose(-1, -2)
        t = mup - (R @ mu.unsqueeze(-1)).squeeze(-1)
        ctx.save_for_backward(W, wsum, mu, mup, Xc, Xpc, U, sig, R)
        ctx.mark_non_differentiable(sig)
        return R, t, sig

    @staticmethod
    def backward(ctx, gR, gt, _gsig):
        W, wsum, mu, mup, Xc, Xpc, U, sig, R = ctx.saved_tensors
        if gR is None:
            gR = torch.zeros_like(R)
        if gt is None:
            gt = torch.zeros_like(mu)
        g_mup = gt
        g_mu = -(R.transpose(-1, -2) @ gt.unsqueeze(-1)).squeeze(-1)
        gR = gR - gt.unsqueeze(-1) * mu.unsqueeze(-2)

        G = R.transpose(-1, -2) @ gR
        Gt = U.transpose(-1, -2) @ G @ U
        denom = sig.unsqueeze(-1) + sig.unsqueeze(-2)
        scale = sig[..., :1].abs().unsqueeze(-1).clamp_min(torch.finfo(DTYPE).tiny)
        offdiag = ~torch.eye(3, dtype=torch.bool)
        ok = (denom.abs() > GAP_TOL * scale) & offdiag
        Bt = torch.where(ok, Gt / torch.where(ok, denom, torch.ones_like(denom)), torch.zeros_like(Gt))
        B = U @ Bt @ U.transpose(-1, -2)
        gH = (B.transpose(-1, -2) - B) @ R.transpose(-1, -2)
        # ill-conditioned problems contribute nothing; callers drop them
        bad = ((sig[..., 1] + sig[..., 2]) <= GAP_TOL * sig[..., 0].abs()).unsqueeze(-1).unsqueeze(-1)
        gH = torch.where(bad, torch.zeros_like(gH), gH)

        Wn = (W / wsum.unsqueeze(-1)).unsqueeze(-1)
        gX = W.unsqueeze(-1) * (Xpc @ gH.transpose(-1, -2)) + Wn * g_mu.unsqueeze(-2)
        gXp = W.unsqueeze(-1) * (Xc @ gH) + Wn * g_mup.unsqueeze(-2)
        gW = (
            torch.einsum("...ni,...ij,...nj->...n", Xc, gH, Xpc)
            + (Xc @ g_mu.unsqueeze(-1)).squeeze(-1) / wsum.unsqueeze(-1)
            + (Xpc @ g_mup.unsqueeze(-1)).squeeze(-1) / wsum.unsqueeze(-1)
        )
        return gX, gXp, gW


class KabschResult(NamedTuple):
    rotation: torch.Tensor
    translation: torch.Tensor
    rank_ok: torch.Tensor
    conditioned: torch.Tensor
    gap: torch.Tensor

    @property
    def valid(self) -> torch.Tensor:
        return self.rank_ok & self.conditioned


def kabsch_batched(X, Xp, W=None) -> KabschResult:
    """Solve many alignment problems at once.

    ``X``, ``Xp``: (..., n, 3); ``W``: (..., n) non-negative weights (uniform if None).
    ``rotation`` and ``translation`` are differentiable wrt all three inputs.
    Problems with ``rank_ok`` False have no unique solution; problems with
    ``conditioned`` False have no usable gradient.  Both must be discarded
    on the training path.
    """
    X = as_tensor(X)
    Xp = as_tensor(Xp)
    if W is None:
        W = torch.ones(X.shape[:-1], dtype=DTYPE)
    W = as_tensor(W)
    R, t, sig = _KabschFunction.apply(X, Xp, W)
    s0 = sig[..., 0]
    rank_ok = (sig[..., 1] > RANK_TOL * s0) & (s0 > 0) & (W.sum(-1) > 0)
    gap = sig[..., 1] + sig[..., 2]
    return KabschResult(R, t, rank_ok, gap > GAP_TOL * s0, gap)


def _check_problem(x, x_prime, weights):
    x = as_tensor(x)
    x_prime = as_tensor(x_prime)
    if x.ndim != 2 or x.shape[-1] != 3 or x.shape != x_prime.shape:
        raise ShapeError(f"expected matching (n, 3) point sets, got {tuple(x.shape)} and {tuple(x_prime.shape)}")
    if x.shape[0] < 3:
        raise DomainError("Kabsch needs at least 3 correspondences")
    if weights is None:
        weights = torch.ones(x.shape[0], dtype=DTYPE)
    weights = as_tensor(weights)
    if weights.shape != x.shape[:1]:
        raise ShapeError("one weight per correspondence expected")
    if torch.any(weights < 0) or not torch.any(weights > 0):
        raise DomainError("weights must be non-negative and not all zero")
    return x, x_prime, weights


def kabsch(x, x_prime, weights=None) -> Pose:
    """Rigid transform minimizing ``sum w * ||R x + t - x'||^2``."""
    x, x_prime, weights = _check_problem(x, x_prime, weights)
    res = kabsch_batched(x, x_prime, weights)
    if not bool(res.rank_ok):
        raise DegenerateConfigurationError("centered cross-covariance has rank < 2")
    return Pose(res.rotation, res.translation)


def kabsch_vjp(x, x_prime, grad_rotation, grad_translation, weights=None):
    """Pull a gradient on ``(R, t)`` back to the points and weights.

    Returns ``(grad_x, grad_x_prime, grad_weights)``.
    """
    x, x_prime, weights = _check_problem(x, x_prime, weights)
    x = x.detach().clone().requires_grad_(True)
    x_prime = x_prime.detach().clone().requires_grad_(True)
    weights = weights.detach().clone().requires_grad_(True)
    res = kabsch_batched(x, x_prime, weights)
    if not bool(res.rank_ok):
        raise DegenerateConfigurationError("centered cross-covariance has rank < 2")
    if not bool(res.conditioned):
        raise IllConditionedGradientError(res.gap.item())
    return torch.autograd.grad(
        (res.rotation, res.translation),
        (x, x_prime, weights),
        (as_tensor(grad_rotation), as_tensor(grad_translation)),
    )
