"""Differentiable RANSAC over 3D-3D correspondence sets.

Two entry points share the same building blocks:

* the inference path (:func:`estimate_pose`) scores minimal-set hypotheses,
  keeps the best one over all sampled correspondence sets and refines only
  that winner;
* the training path (:func:`train_hypotheses`) refines every hypothesis in a
  vectorized loop and re-solves the final inlier set with gradients enabled.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .correspondence import CorrespondenceProbability, CorrespondenceSet, gather_set, sample_indices
from .errors import (
    DegenerateConfigurationError,
    DomainError,
    EmptyError,
    InsufficientDataError,
    NoHypothesisError,
)
from .geometry import DTYPE, Intrinsics, Pose, as_tensor, residuals_rt
from .kabsch import kabsch, kabsch_batched
from .keypoints import KeypointMaps


@dataclass(frozen=True)
class RansacConfig:
    J: int = 100
    n: int = 3
    tau: float = 0.15
    beta: float | None = None  # defaults to 5 / tau
    t_max: int = 4
    mode: str = "test"
    max_retries: int = 5

    def __post_init__(self):
        if self.J < 1 or self.n < 3 or not self.tau > 0 or self.t_max < 0:
            raise DomainError(f"invalid RANSAC config: {self}")
        if self.beta is not None and not self.beta > 0:
            raise DomainError("beta must be positive")
        if self.mode not in ("train", "test"):
            raise DomainError(f"unknown mode {self.mode!r}")

    @property
    def sharpness(self) -> float:
        return 5.0 / self.tau if self.beta is None else self.beta

    @classmethod
    def train(cls, **kw) -> "RansacConfig":
        return cls(**{"J": 20, "n": 5, "mode": "train", **kw})

    @classmethod
    def test(cls, **kw) -> "RansacConfig":
        return cls(**{"J": 100, "n": 3, "mode": "test", **kw})


@dataclass
class Hypothesis:
    pose: Pose
    score: float
    minimal_set: np.ndarray
    refined: bool = False
    inlier_indices: np.ndarray | None = None
    iterations: int = 0
    set_index: int = 0


@dataclass
class PoseEstimate:
    pose: Pose
    confidence: float
    inlier_indices: np.ndarray
    set_index: int
    hypothesis: Hypothesis = field(repr=False)


def seed_sequence(seed, *key: int) -> np.random.SeedSequence:
    """Child of ``seed`` addressed by ``key`` (pure; no spawn counters involved)."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return np.random.SeedSequence(ss.entropy, spawn_key=tuple(ss.spawn_key) + key)


def substream(seed, *key: int) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(seed, *key))


def soft_inlier_scores(R, t, x_a, x_b, tau: float, beta: float | None = None) -> torch.Tensor:
    """Batched soft-inlier count; ``R`` (..., 3, 3), points (..., Y, 3) -> (...)."""
    beta = 5.0 / tau if beta is None else beta
    r = residuals_rt(R, t, x_a, x_b)
    return torch.sigmoid(beta * tau - beta * r).sum(-1)


def soft_inlier_count(h: Pose, cs: CorrespondenceSet, tau: float, beta: float | None = None) -> torch.Tensor:
    if not tau > 0:
        raise DomainError("inlier threshold must be positive")
    if len(cs) == 0:
        return torch.zeros((), dtype=DTYPE)
    return soft_inlier_scores(h.rotation, h.translation, cs.x_a, cs.x_b, tau, beta)


def hard_inliers(h: Pose, cs: CorrespondenceSet, tau: float) -> np.ndarray:
    """Indices whose residual is strictly below ``tau``."""
    if not tau > 0:
        raise DomainError("inlier threshold must be positive")
    with torch.no_grad():
        r = residuals_rt(h.rotation, h.translation, cs.x_a, cs.x_b)
    return np.flatnonzero(r.numpy() < tau)


def _draw_minimal_set(rng: np.random.Generator, logp: np.ndarray, n: int) -> np.ndarray:
    keys = logp + rng.gumbel(size=logp.size)
    return np.sort(np.argsort(-keys, kind="stable")[:n])


def generate_hypotheses(cs: CorrespondenceSet, cfg: RansacConfig, seed=0) -> list[Hypothesis]:
    """Score ``cfg.J`` minimal-set poses drawn with probability proportional to pair weights.

    Each slot ``k`` draws from its own substream of ``seed`` so the result does
    not depend on evaluation order.  Degenerate draws are retried up to
    ``cfg.max_retries`` times before the slot is dropped.
    """
    Y = len(cs)
    if Y < cfg.n:
        raise InsufficientDataError(f"need at least {cfg.n} correspondences, got {Y}")
    p = cs.prob.detach().numpy()
    with np.errstate(divide="ignore"):
        logp = np.log(np.clip(p, 0.0, None))
    if np.count_nonzero(np.isfinite(logp)) < cfg.n:
        logp = np.zeros(Y)
    rngs = [substream(seed, k) for k in range(cfg.J)]
    sets = np.stack([_draw_minimal_set(rng, logp, cfg.n) for rng in rngs])
    xa = cs.x_a.detach()
    xb = cs.x_b.detach()
    pending = np.arange(cfg.J)
    poses: dict[int, tuple] = {}
    for _attempt in range(cfg.max_retries + 1):
        idx = torch.as_tensor(sets[pending])
        res = kabsch_batched(xa[idx], xb[idx])
        ok = res.rank_ok if cfg.mode == "test" else res.valid
        ok = ok.numpy()
        for row, k in enumerate(pending):
            if ok[row]:
                poses[int(k)] = (res.rotation[row], res.translation[row])
        pending = pending[~ok]
        if pending.size == 0:
            break
        for k in pending:
            sets[k] = _draw_minimal_set(rngs[k], logp, cfg.n)
    if not poses:
        raise NoHypothesisError("every minimal set was degenerate")
    keep = sorted(poses)
    R = torch.stack([poses[k][0] for k in keep])
    t = torch.stack([poses[k][1] for k in keep])
    scores = soft_inlier_scores(R, t, xa, xb, cfg.tau, cfg.sharpness).tolist()
    return [Hypothesis(Pose(R[i], t[i]), scores[i], sets[k].copy()) for i, k in enumerate(keep)]


def refine(h: Hypothesis, cs: CorrespondenceSet, cfg: RansacConfig) -> Hypothesis:
    """Alternate inlier selection and Kabsch until the inlier count stops growing.

    Only the final solve touches the (possibly differentiable) point tensors,
    so gradients flow through the last iteration with its inlier set fixed.
    """
    if cfg.t_max == 0:
        return h
    pose = h.pose
    inliers = hard_inliers(pose, cs, cfg.tau)
    used = None
    iterations = 0
    for _ in range(cfg.t_max):
        if inliers.size < cfg.n:
            break
        idx = torch.as_tensor(inliers)
        try:
            new_pose = kabsch(cs.x_a[idx], cs.x_b[idx])
        except DegenerateConfigurationError:
            break
        iterations += 1
        new_inliers = hard_inliers(new_pose, cs, cfg.tau)
        pose, used = new_pose, inliers
        if new_inliers.size <= inliers.size:
            break
        inliers = new_inliers
    if used is None:
        return h
    score = float(soft_inlier_count(pose, cs, cfg.tau, cfg.sharpness))
    return replace(h, pose=pose, score=score, refined=True, inlier_indices=used, iterations=iterations)


def select_best(hypotheses) -> int:
    """Index of the highest score; ties go to the lowest index."""
    scores = [h.score if isinstance(h, Hypothesis) else float(h) for h in hypotheses]
    if not scores:
        raise EmptyError("no hypotheses to select from")
    return int(np.argmax(np.asarray(scores)))


def estimate_pose_from_sets(sets, cfg: RansacConfig, seed=0) -> PoseEstimate:
    """Best minimal-set hypothesis over all correspondence sets, then refine it."""
    best: Hypothesis | None = None
    for q, cs in enumerate(sets):
        try:
            hyps = generate_hypotheses(cs, cfg, seed_sequence(seed, 1, q))
        except (NoHypothesisError, InsufficientDataError):
            continue
        cand = hyps[select_best(hyps)]
        if best is None or cand.score > best.score:
            best = replace(cand, set_index=q)
    if best is None:
        raise NoHypothesisError("no correspondence set produced a hypothesis")
    cs = sets[best.set_index]
    final = refine(best, cs, cfg)
    inliers = final.inlier_indices
    if inliers is None:
        inliers = hard_inliers(final.pose, cs, cfg.tau)
    return PoseEstimate(final.pose, float(final.score), inliers, best.set_index, final)


def sample_sets(
    prob: CorrespondenceProbability,
    maps_a: KeypointMaps,
    maps_b: KeypointMaps,
    K_a: Intrinsics,
    K_b: Intrinsics,
    size: int,
    count: int,
    seed=0,
    replace: bool = False,
) -> list[CorrespondenceSet]:
    points_a = maps_a.points(K_a)
    points_b = maps_b.points(K_b)
    out = []
    for q in range(count):
        rng = substream(seed, 0, q)
        out.append(gather_set(prob, points_a, points_b, sample_indices(prob.P, size, rng, replace)))
    return out


def estimate_pose(
    prob: CorrespondenceProbability,
    maps_a: KeypointMaps,
    maps_b: KeypointMaps,
    K_a: Intrinsics,
    K_b: Intrinsics,
    cfg: RansacConfig | None = None,
    seed=0,
    num_correspondences: int = 100,
    num_samplings: int = 20,
) -> PoseEstimate:
    """Inference path: sample ``num_samplings`` sets, pick the best hypothesis, refine it."""
    cfg = cfg or RansacConfig.test()
    with torch.no_grad():
        sets = sample_sets(prob, maps_a, maps_b, K_a, K_b, num_correspondences, num_samplings, seed)
        return estimate_pose_from_sets(sets, cfg, seed)


@dataclass
class TrainHypotheses:
    rotation: torch.Tensor  # (Q, J, 3, 3), differentiable
    translation: torch.Tensor  # (Q, J, 3)
    scores: torch.Tensor  # (Q, J) soft-inlier counts of the refined poses
    valid: torch.Tensor  # (Q, J) bool
    inliers: torch.Tensor  # (Q, J, Y) bool mask of the final solve


def train_hypotheses(x_a, x_b, weights, cfg: RansacConfig, rng: np.random.Generator) -> TrainHypotheses:
    """Vectorized training-mode RANSAC over ``Q`` correspondence sets of size ``Y``.

    ``x_a``, ``x_b``: (Q, Y, 3) points (may require grad); ``weights``: (Q, Y)
    sampling weights for minimal sets.  Every hypothesis is refined; only the
    final Kabsch solve is differentiable.
    """
    x_a = as_tensor(x_a)
    x_b = as_tensor(x_b)
    Q, Y, _ = x_a.shape
    J, n = cfg.J, cfg.n
    if Y < n:
        raise InsufficientDataError(f"need at least {n} correspondences, got {Y}")
    w = np.asarray(as_tensor(weights).detach().numpy(), dtype=float)
    with np.errstate(divide="ignore"):
        logp = np.log(np.clip(w, 0.0, None))[:, None, :]
    keys = logp + rng.gumbel(size=(Q, J, Y))
    minimal = np.argsort(-keys, axis=-1, kind="stable")[..., :n]

    xa = x_a.detach().unsqueeze(1).expand(Q, J, Y, 3)
    xb = x_b.detach().unsqueeze(1).expand(Q, J, Y, 3)
    with torch.no_grad():
        used = torch.zeros(Q, J, Y, dtype=torch.bool)
        used.scatter_(-1, torch.as_tensor(minimal), True)
        res = kabsch_batched(xa, xb, used.to(DTYPE))
        valid0 = res.rank_ok
        inl = residuals_rt(res.rotation, res.translation, xa, xb) < cfg.tau
        cnt = inl.sum(-1)
        active = valid0.clone()
        for _ in range(cfg.t_max):
            active &= cnt >= n
            if not bool(active.any()):
                break
            # finished problems re-solve their last set so no batch element is empty
            step = kabsch_batched(xa, xb, torch.where(active.unsqueeze(-1), inl, used).to(DTYPE))
            active &= step.rank_ok
            new_inl = residuals_rt(step.rotation, step.translation, xa, xb) < cfg.tau
            new_cnt = new_inl.sum(-1)
            used = torch.where(active.unsqueeze(-1), inl, used)
            grow = active & (new_cnt > cnt)
            inl = torch.where(grow.unsqueeze(-1), new_inl, inl)
            cnt = torch.where(grow, new_cnt, cnt)
            active = grow

    xa_g = x_a.unsqueeze(1).expand(Q, J, Y, 3)
    xb_g = x_b.unsqueeze(1).expand(Q, J, Y, 3)
    final = kabsch_batched(xa_g, xb_g, used.to(DTYPE))
    valid = valid0 & final.valid
    scores = soft_inlier_scores(final.rotation, final.translation, xa_g, xb_g, cfg.tau, cfg.sharpness)
    return TrainHypotheses(final.rotation, final.translation, scores, valid, used)
