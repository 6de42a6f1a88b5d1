"""Synthetic two-view scenes and a learnable parameter-table backbone.

The backbone holds raw per-cell tables for every image (offset logits,
log-depths, confidence logits, descriptor pre-vectors) plus one shared dustbin
logit.  Training runs the full probabilistic pipeline on it: correspondence
sampling, training-mode RANSAC, the VCRE expectation with a null hypothesis,
and the baseline-corrected score-function estimator.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .correspondence import CorrespondenceSet, correspondence_model, sample_indices, set_log_prob
from .errors import DivergenceError, DomainError, GenerationError, MetricPoseError
from .geometry import DTYPE, Intrinsics, Pose, backproject, grid_pixels, project, rotation_about_axis, transform
from .keypoints import KeypointMaps
from .objective import (
    CurriculumSchedule,
    NullHypothesisConfig,
    curriculum_select,
    expected_set_loss,
    reinforce_surrogate,
    virtual_grid,
    vcre_rt,
)
from .ransac import RansacConfig, substream, train_hypotheses

log = logging.getLogger(__name__)

CONF_HIGH = 4.0
CONF_LOW = -4.0
DESCRIPTOR_DIM = 128


@dataclass(frozen=True)
class SceneConfig:
    grid_w: int = 8
    grid_h: int = 8
    cell_size: int = 14
    focal: float = 100.0
    depth_range: tuple = (2.0, 5.0)
    translation: tuple | None = None  # fixed relative translation; else random direction * baseline
    baseline: float = 1.0
    max_rotation_deg: float = 20.0
    noise_sigma: float = 0.0
    outlier_fraction: float = 0.0
    min_points: int = 20
    max_attempts: int = 50

    def __post_init__(self):
        if self.grid_w < 1 or self.grid_h < 1 or self.cell_size < 1:
            raise DomainError("grid dimensions must be positive")
        if not (0 < self.depth_range[0] < self.depth_range[1]):
            raise DomainError("depth range must be increasing and positive")
        if not (0.0 <= self.outlier_fraction < 1.0):
            raise DomainError("outlier_fraction must lie in [0, 1)")
        if self.noise_sigma < 0 or self.baseline < 0 or self.max_rotation_deg < 0:
            raise DomainError("noise, baseline and rotation must be non-negative")
        if self.min_points < 20:
            raise DomainError("scenes need at least 20 points")
        if self.min_points > self.grid_w * self.grid_h:
            raise DomainError("grid too small for the requested point count")

    def intrinsics(self) -> Intrinsics:
        w = self.grid_w * self.cell_size
        h = self.grid_h * self.cell_size
        return Intrinsics(self.focal, self.focal, w / 2.0, h / 2.0, w, h)


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    points3d: torch.Tensor  # world frame (= camera A frame unless pose_a says otherwise)
    intrinsics_a: Intrinsics
    pose_a: Pose
    intrinsics_b: Intrinsics
    pose_b: Pose
    noise_sigma: float
    outlier_fraction: float
    grid_shape: tuple  # (h, w)
    cell_size: int
    depth_range: tuple
    seed: int

    @property
    def gt_relative(self) -> Pose:
        return self.pose_b.compose(self.pose_a.inverse())

    def camera_points(self, view: str) -> torch.Tensor:
        pose = self.pose_a if view == "a" else self.pose_b
        return transform(pose, self.points3d)

    def cells(self, view: str) -> np.ndarray:
        """Flattened cell index of every scene point in ``view``."""
        K = self.intrinsics_a if view == "a" else self.intrinsics_b
        uv = project(self.camera_points(view), K).numpy()
        h, w = self.grid_shape
        ij = np.floor(uv / self.cell_size).astype(int)
        return ij[:, 1] * w + ij[:, 0]


def _relative_pose(cfg: SceneConfig, rng: np.random.Generator) -> Pose:
    if cfg.max_rotation_deg > 0:
        axis = rng.normal(size=3)
        angle = math.radians(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg))
        R = rotation_about_axis(axis, angle)
    else:
        R = torch.eye(3, dtype=DTYPE)
    if cfg.translation is not None:
        t = torch.as_tensor(cfg.translation, dtype=DTYPE)
    else:
        d = rng.normal(size=3)
        t = torch.as_tensor(cfg.baseline * d / np.linalg.norm(d), dtype=DTYPE)
    return Pose(R, t)


def generate_scene(cfg: SceneConfig, seed: int = 0) -> SyntheticScene:
    """One 3D point per populated cell of view A, kept if it lands in a free cell of view B."""
    K = cfg.intrinsics()
    h, w = cfg.grid_h, cfg.grid_w
    rng = np.random.default_rng(seed)
    for _ in range(cfg.max_attempts):
        rel = _relative_pose(cfg, rng)
        offsets = rng.uniform(0.1, 0.9, size=(h, w, 2))
        depth = rng.uniform(*cfg.depth_range, size=(h, w))
        x_a = backproject(grid_pixels(offsets, cfg.cell_size).reshape(-1, 2), depth.reshape(-1), K)
        x_b = transform(rel, x_a)
        uv = project(x_b, K, min_depth=1e-9).numpy()
        vis = (x_b[:, 2].numpy() > 0.1) & (uv[:, 0] >= 0) & (uv[:, 0] < K.width) & (uv[:, 1] >= 0) & (uv[:, 1] < K.height)
        taken = set()
        keep = []
        for k in np.flatnonzero(vis):
            cell = int(uv[k, 1] // cfg.cell_size) * w + int(uv[k, 0] // cfg.cell_size)
            if cell not in taken:
                taken.add(cell)
                keep.append(k)
        if len(keep) >= cfg.min_points:
            return SyntheticScene(
                points3d=x_a[torch.as_tensor(keep)],
                intrinsics_a=K,
                pose_a=Pose.identity(),
                intrinsics_b=K,
                pose_b=rel,
                noise_sigma=cfg.noise_sigma,
                outlier_fraction=cfg.outlier_fraction,
                grid_shape=(h, w),
                cell_size=cfg.cell_size,
                depth_range=tuple(cfg.depth_range),
                seed=seed,
            )
    raise GenerationError(f"fewer than {cfg.min_points} co-visible points after {cfg.max_attempts} attempts")


def scene_descriptors(scene: SyntheticScene, dim: int = DESCRIPTOR_DIM) -> torch.Tensor:
    """Unit descriptor per scene point, fixed by the scene seed."""
    rng = substream(scene.seed, 7)
    d = rng.normal(size=(len(scene.points3d), dim))
    return torch.as_tensor(d / np.linalg.norm(d, axis=1, keepdims=True), dtype=DTYPE)


def render_ground_truth_maps(
    scene: SyntheticScene,
    view: str,
    rng: np.random.Generator | None = None,
    corrupt: bool = True,
    descriptor_dim: int = DESCRIPTOR_DIM,
) -> KeypointMaps:
    """Maps a perfect backbone would predict for ``view`` ("a" or "b").

    Occupied cells carry the point's sub-cell offset, its depth plus
    ``N(0, noise_sigma)``, a high confidence and the point's descriptor.
    With ``corrupt``, ``floor(outlier_fraction * count)`` occupied cells get a
    depth drawn uniformly from the scene depth range instead.
    """
    if view not in ("a", "b"):
        raise DomainError("view must be 'a' or 'b'")
    rng = substream(scene.seed, 1 if view == "a" else 2) if rng is None else rng
    h, w = scene.grid_shape
    f = scene.cell_size
    K = scene.intrinsics_a if view == "a" else scene.intrinsics_b
    pts = scene.camera_points(view)
    uv = project(pts, K).numpy()
    cells = scene.cells(view)
    desc_pts = scene_descriptors(scene, descriptor_dim).numpy()

    offsets = np.full((h * w, 2), 0.5)
    depth = np.full(h * w, float(np.median(pts[:, 2].numpy())))
    conf = np.full(h * w, CONF_LOW)
    desc = rng.normal(size=(h * w, descriptor_dim))
    desc /= np.linalg.norm(desc, axis=1, keepdims=True)

    ij = np.stack([cells % w, cells // w], axis=1)
    offsets[cells] = np.clip(uv / f - ij, 0.0, 1.0)
    z = pts[:, 2].numpy().copy()
    if scene.noise_sigma > 0:
        z = z + scene.noise_sigma * rng.normal(size=z.shape)
    n_bad = int(math.floor(scene.outlier_fraction * len(cells))) if corrupt else 0
    if n_bad:
        bad = rng.choice(len(cells), size=n_bad, replace=False)
        z[bad] = rng.uniform(*scene.depth_range, size=n_bad)
    depth[cells] = np.maximum(z, 1e-3)
    conf[cells] = CONF_HIGH
    desc[cells] = desc_pts
    return KeypointMaps(
        torch.as_tensor(offsets.reshape(h, w, 2), dtype=DTYPE),
        torch.as_tensor(depth.reshape(h, w), dtype=DTYPE),
        torch.as_tensor(conf.reshape(h, w), dtype=DTYPE),
        torch.as_tensor(desc.reshape(h, w, descriptor_dim), dtype=DTYPE),
        f,
    )


def synthetic_correspondence_set(
    scene: SyntheticScene, count: int, outlier_fraction: float, noise_sigma: float, rng: np.random.Generator
) -> CorrespondenceSet:
    """Directly built 3D-3D set: depth noise on both views, ``floor(f * count)`` mismatched pairs."""
    n = len(scene.points3d)
    if count > n:
        raise DomainError(f"scene has only {n} points")
    pick = rng.choice(n, size=count, replace=False)
    t = torch.as_tensor(pick)
    x_a = scene.camera_points("a")[t]
    x_b = scene.camera_points("b")[t]
    if noise_sigma > 0:
        x_a = x_a * (1 + noise_sigma * torch.as_tensor(rng.normal(size=count), dtype=DTYPE) / x_a[:, 2]).unsqueeze(-1)
        x_b = x_b * (1 + noise_sigma * torch.as_tensor(rng.normal(size=count), dtype=DTYPE) / x_b[:, 2]).unsqueeze(-1)
    n_bad = int(math.floor(outlier_fraction * count))
    if n_bad:
        bad = rng.choice(count, size=n_bad, replace=False)
        # a cyclic shift guarantees every corrupted pair points at another point
        x_b[torch.as_tensor(bad)] = x_b[torch.as_tensor(np.roll(bad, 1))]
    return CorrespondenceSet.from_points(x_a, x_b)


class ImageTables(nn.Module):
    """Raw per-cell parameters of one image."""

    def __init__(self, grid_shape, descriptor_dim: int):
        super().__init__()
        h, w = grid_shape
        self.offset_logits = nn.Parameter(torch.zeros(h, w, 2, dtype=DTYPE))
        self.log_depth = nn.Parameter(torch.zeros(h, w, dtype=DTYPE))
        self.conf_logits = nn.Parameter(torch.zeros(h, w, dtype=DTYPE))
        self.desc_raw = nn.Parameter(torch.ones(h, w, descriptor_dim, dtype=DTYPE))


class ToyBackbone(nn.Module):
    """Per-image raw parameter tables standing in for an encoder and keypoint heads.

    Every image owns separate tensors, so images left out of a step receive no
    gradient at all and adaptive optimizers keep their state untouched.
    """

    def __init__(self, num_scenes: int, grid_shape=(8, 8), descriptor_dim: int = DESCRIPTOR_DIM,
                 cell_size: int = 14, dustbin: float = 1.0):
        super().__init__()
        self.cell_size = cell_size
        self.images = nn.ModuleList(ImageTables(grid_shape, descriptor_dim) for _ in range(2 * num_scenes))
        self.dustbin = nn.Parameter(torch.tensor(float(dustbin), dtype=DTYPE))

    @property
    def num_scenes(self) -> int:
        return len(self.images) // 2

    def tables(self, scene: int, view: int) -> ImageTables:
        return self.images[2 * scene + view]

    def maps(self, scene: int, view: int, log_depth: torch.Tensor | None = None) -> KeypointMaps:
        p = self.tables(scene, view)
        log_depth = p.log_depth if log_depth is None else log_depth
        return KeypointMaps(
            torch.sigmoid(p.offset_logits),
            torch.exp(log_depth),
            p.conf_logits,
            p.desc_raw / torch.linalg.vector_norm(p.desc_raw, dim=-1, keepdim=True),
            self.cell_size,
        )

    def forward(self, scene: int) -> tuple[KeypointMaps, KeypointMaps]:
        return self.maps(scene, 0), self.maps(scene, 1)

    @torch.no_grad()
    def load_maps(self, scene: int, view: int, maps: KeypointMaps):
        """Set raw parameters so the forward pass reproduces ``maps``."""
        p = self.tables(scene, view)
        o = maps.offsets.clamp(1e-9, 1 - 1e-9)
        p.offset_logits.copy_(torch.log(o) - torch.log1p(-o))
        p.log_depth.copy_(torch.log(maps.depth))
        p.conf_logits.copy_(maps.confidence)
        p.desc_raw.copy_(maps.descriptors * math.sqrt(maps.descriptors.shape[-1]))


def toy_forward(backbone: ToyBackbone, scene: int = 0) -> tuple[KeypointMaps, KeypointMaps]:
    return backbone(scene)


def initialize_backbone(scenes, descriptor_noise: float = 1.0, depth_noise: float | None = None,
                        depth_scale: float = 1.0, offset_noise: float | None = None, seed: int = 0,
                        **kw) -> ToyBackbone:
    """Perturbed start with flat confidences.

    Descriptors are ground truth plus isotropic noise.  Depths are one shared
    value when ``depth_noise`` is None, else ground truth times
    ``depth_scale * exp(N(0, depth_noise))``; a scale other than one keeps the
    points rigid but metrically wrong.  Offsets sit at cell centers when
    ``offset_noise`` is None, else at ground truth plus ``N(0, offset_noise)``.
    """
    h, w = scenes[0].grid_shape
    bb = ToyBackbone(len(scenes), (h, w), cell_size=scenes[0].cell_size, **kw)
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for s, scene in enumerate(scenes):
            for v, view in enumerate("ab"):
                gt = render_ground_truth_maps(scene, view, corrupt=False)
                noise = rng.normal(size=gt.descriptors.shape) / math.sqrt(gt.descriptors.shape[-1])
                desc = gt.descriptors + descriptor_noise * torch.as_tensor(noise, dtype=DTYPE)
                if depth_noise is None:
                    depth = torch.full_like(gt.depth, 0.5 * sum(scene.depth_range))
                else:
                    depth = gt.depth * depth_scale * torch.as_tensor(np.exp(depth_noise * rng.normal(size=gt.depth.shape)))
                offsets = torch.full_like(gt.offsets, 0.5)
                if offset_noise is not None:
                    jitter = torch.as_tensor(offset_noise * rng.normal(size=gt.offsets.shape), dtype=DTYPE)
                    offsets = (gt.offsets + jitter).clamp(0.02, 0.98)
                bb.load_maps(s, v, KeypointMaps(offsets, depth, torch.zeros_like(gt.confidence),
                                                desc / torch.linalg.vector_norm(desc, dim=-1, keepdim=True),
                                                gt.cell_size))
    return bb


@dataclass
class TrainConfig:
    iterations: int = 2000
    set_size: int = 32  # Y
    samplings: int = 20  # Q
    ransac: RansacConfig = field(default_factory=RansacConfig.train)
    null: NullHypothesisConfig | None = field(default_factory=NullHypothesisConfig)
    temperature: float = 0.1
    curriculum: CurriculumSchedule = field(default_factory=CurriculumSchedule)
    optimizer: str = "adam"
    lr: float = 1e-4
    momentum: float = 0.9
    snapshot_every: int = 0
    # draw the same sets every iteration (keyed by scene only)
    common_random_numbers: bool = False
    # keypoint locations carry no supervision of their own; leaving them free
    # lets sub-cell shifts absorb depth errors
    train_offsets: bool = True
    # lr multiplier for the matching parameters (descriptors, confidences, dustbin);
    # Adam turns their noisy score-function gradients into full-size steps
    score_lr_scale: float = 1.0
    grid: tuple = ((2.1, 1.2, 2.1), 0.3)

    def __post_init__(self):
        if self.iterations < 0:
            raise DomainError("iterations must be non-negative")
        if self.set_size < self.ransac.n:
            raise DomainError(f"set size {self.set_size} is below the minimal set size {self.ransac.n}")
        if self.samplings < 2:
            raise DomainError("the baseline needs at least two samplings")
        if not self.temperature > 0:
            raise DomainError("temperature must be positive")
        if not self.lr >= 0 or not self.score_lr_scale >= 0 or self.optimizer not in ("adam", "sgd"):
            raise DomainError("invalid optimizer config")
        if self.snapshot_every < 0:
            raise DomainError("snapshot_every must be non-negative")


@dataclass
class TrainRecord:
    iteration: int
    loss: float  # mean expected VCRE over the curriculum subset
    loss_all: float  # same over every scene
    grad_norm: float
    selected: int
    scene_losses: tuple = ()


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)

    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records])

    def as_rows(self):
        return [asdict(r) for r in self.records]


def trainable_parameters(backbone: ToyBackbone, cfg: TrainConfig) -> list:
    return [p for name, p in backbone.named_parameters() if cfg.train_offsets or not name.endswith("offset_logits")]


GEOMETRY_PARAMETERS = ("log_depth", "offset_logits")


def make_optimizer(backbone: ToyBackbone, cfg: TrainConfig) -> torch.optim.Optimizer:
    """Optimizer over the trainable tables; matching parameters run at ``lr * score_lr_scale``."""
    ids = {id(p) for p in trainable_parameters(backbone, cfg)}
    named = [(name, p) for name, p in backbone.named_parameters() if id(p) in ids]
    geometry = [p for name, p in named if name.endswith(GEOMETRY_PARAMETERS)]
    matching = [p for name, p in named if not name.endswith(GEOMETRY_PARAMETERS)]
    groups = [{"params": geometry, "lr": cfg.lr}, {"params": matching, "lr": cfg.lr * cfg.score_lr_scale}]
    if cfg.optimizer == "adam":
        return torch.optim.Adam(groups, lr=cfg.lr)
    return torch.optim.SGD(groups, lr=cfg.lr, momentum=cfg.momentum)


def scene_loss(backbone: ToyBackbone, s: int, scene: SyntheticScene, cfg: TrainConfig, rng: np.random.Generator,
               grid=None):
    """Per-sample expected losses (Q,) and log-probabilities of the sampled sets."""
    grid = virtual_grid(*cfg.grid) if grid is None else grid
    maps_a, maps_b = backbone(s)
    prob = correspondence_model(maps_a, maps_b, cfg.temperature, backbone.dustbin)
    n_b = prob.P.shape[1]
    flat = np.stack([sample_indices(prob.P, cfg.set_size, rng) for _ in range(cfg.samplings)])
    log_probs = torch.stack([set_log_prob(prob.P, f) for f in flat])
    ia = torch.as_tensor(flat // n_b)
    ib = torch.as_tensor(flat % n_b)
    x_a = maps_a.points(scene.intrinsics_a)[ia]
    x_b = maps_b.points(scene.intrinsics_b)[ib]
    weights = prob.P.detach().reshape(-1)[torch.as_tensor(flat)]
    hyps = train_hypotheses(x_a, x_b, weights, cfg.ransac, rng)
    gt = scene.gt_relative
    losses = vcre_rt(hyps.rotation, hyps.translation, gt.rotation, gt.translation, scene.intrinsics_b, grid)
    losses = torch.where(hyps.valid, losses, torch.zeros_like(losses))
    per_set = expected_set_loss(hyps.scores, losses, cfg.null, cfg.set_size, hyps.valid)
    return per_set, log_probs


def _state_copy(backbone: ToyBackbone) -> dict:
    return {k: v.detach().clone() for k, v in backbone.state_dict().items()}


def train(scenes, backbone: ToyBackbone, cfg: TrainConfig, seed: int = 0, start_iteration: int = 0,
          optimizer: torch.optim.Optimizer | None = None) -> TrainHistory:
    """Run ``cfg.iterations`` optimization steps starting at ``start_iteration``.

    Each scene's sampling stream is keyed by (seed, iteration, scene), so a
    resumed run reproduces an uninterrupted one.  Scenes are reduced in index
    order.  A non-finite loss, a collapsed depth or a degenerate match distribution raises
    :class:`DivergenceError` carrying the offending state.
    """
    if not scenes:
        raise DomainError("need at least one scene")
    if backbone.num_scenes != len(scenes):
        raise DomainError(f"backbone holds {backbone.num_scenes} scenes, got {len(scenes)}")
    params = trainable_parameters(backbone, cfg)
    optimizer = optimizer or make_optimizer(backbone, cfg)
    grid = virtual_grid(*cfg.grid)
    history = TrainHistory()
    for it in range(start_iteration, start_iteration + cfg.iterations):
        surrogates, means = [], []
        try:
            for s, scene in enumerate(scenes):
                rng = substream(seed, s) if cfg.common_random_numbers else substream(seed, it, s)
                per_set, log_probs = scene_loss(backbone, s, scene, cfg, rng, grid)
                surrogates.append(reinforce_surrogate(per_set, log_probs))
                means.append(per_set.mean())
        except (MetricPoseError, torch.linalg.LinAlgError) as exc:
            raise DivergenceError(f"iteration {it}: {exc}", {"iteration": it, "params": _state_copy(backbone)}) from exc
        means_t = torch.stack(means).detach()
        sel = curriculum_select(means_t, it, cfg.curriculum)
        total = torch.stack([surrogates[k] for k in sel]).mean()
        if not torch.isfinite(total):
            raise DivergenceError(
                f"non-finite loss at iteration {it}",
                {"iteration": it, "scene_losses": means_t.tolist(), "params": _state_copy(backbone)},
            )
        optimizer.zero_grad()
        total.backward()
        gn = math.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None))
        if cfg.lr > 0:
            optimizer.step()
        rec = TrainRecord(it, float(means_t[sel].mean()), float(means_t.mean()), gn, len(sel),
                          tuple(means_t.tolist()))
        history.records.append(rec)
        if cfg.snapshot_every and (it + 1) % cfg.snapshot_every == 0:
            history.snapshots[it + 1] = _state_copy(backbone)
        if it % 100 == 0:
            log.info("iter %d loss %.3f (all %.3f) |g| %.3e", it, rec.loss, rec.loss_all, gn)
    return history


@torch.no_grad()
def scene_expected_vcre(backbone: ToyBackbone, scenes, cfg: TrainConfig, seed: int = 12345) -> np.ndarray:
    """Expected VCRE of every scene under a fixed evaluation stream."""
    grid = virtual_grid(*cfg.grid)
    return np.array([float(scene_loss(backbone, s, sc, cfg, substream(seed, s), grid)[0].mean())
                     for s, sc in enumerate(scenes)])


def mean_expected_vcre(backbone: ToyBackbone, scenes, cfg: TrainConfig, seed: int = 12345) -> float:
    return float(scene_expected_vcre(backbone, scenes, cfg, seed).mean())


@torch.no_grad()
def cell_marginals(backbone: ToyBackbone, scene: int, temperature: float = 0.1) -> tuple[torch.Tensor, torch.Tensor]:
    """Probability that each cell of view A (resp. B) takes part in a sampled correspondence."""
    maps_a, maps_b = backbone(scene)
    P = correspondence_model(maps_a, maps_b, temperature, backbone.dustbin).P
    P = P / P.sum()
    return P.sum(1), P.sum(0)


@torch.no_grad()
def top_cell_depth_errors(backbone: ToyBackbone, scene_index: int, scene: SyntheticScene, k: int = 5,
                          temperature: float = 0.1) -> np.ndarray:
    """Relative depth error of the ``k`` most probable cells of each view (A then B)."""
    out = []
    for v, marg in enumerate(cell_marginals(backbone, scene_index, temperature)):
        gt = render_ground_truth_maps(scene, "ab"[v], corrupt=False)
        top = torch.argsort(marg, descending=True, stable=True)[:k]
        learned = backbone.maps(scene_index, v).depth.reshape(-1)[top]
        out.append((learned / gt.depth.reshape(-1)[top] - 1.0).abs().numpy())
    return np.concatenate(out)


@torch.no_grad()
def descriptor_match_rate(backbone: ToyBackbone, scene_index: int, scene: SyntheticScene) -> float:
    """Fraction of corresponding cell pairs whose similarity beats every non-corresponding pair in their row and column."""
    maps_a, maps_b = backbone(scene_index)
    M = maps_a.flat_descriptors() @ maps_b.flat_descriptors().T
    ca = torch.as_tensor(scene.cells("a"))
    cb = torch.as_tensor(scene.cells("b"))
    true = M[ca, cb]
    row = M[ca].clone()
    row[torch.arange(len(ca)), cb] = -math.inf
    col = M[:, cb].clone()
    col[ca, torch.arange(len(cb))] = -math.inf
    ok = (true > row.max(1).values) & (true > col.max(0).values)
    return float(ok.double().mean())


@dataclass(frozen=True)
class ToyRunConfig:
    """Defaults of the small end-to-end demonstration run."""

    num_scenes: int = 4
    iterations: int = 2000
    seed: int = 0
    scene: SceneConfig = field(default_factory=SceneConfig)
    set_size: int = 16
    lr: float = 1e-2
    descriptor_noise: float = 1.0
    depth_noise: float = 0.10
    curriculum_interval: int = 200
    curriculum_warmup_end: int = 1000
    score_lr_scale: float = 0.1

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            iterations=self.iterations,
            set_size=self.set_size,
            lr=self.lr,
            train_offsets=False,
            score_lr_scale=self.score_lr_scale,
            curriculum=CurriculumSchedule(increment_interval=self.curriculum_interval,
                                          warmup_end=self.curriculum_warmup_end),
        )

    def scenes(self) -> list:
        return [generate_scene(self.scene, 1000 * self.seed + s) for s in range(self.num_scenes)]

    def backbone(self, scenes) -> ToyBackbone:
        return initialize_backbone(scenes, self.descriptor_noise, self.depth_noise, offset_noise=0.0, seed=self.seed)


@dataclass
class ToyRunResult:
    scenes: list
    backbone: ToyBackbone
    history: TrainHistory
    initial_vcre: np.ndarray  # per scene
    final_vcre: np.ndarray
    trained_scenes: np.ndarray  # curriculum subset at the last iteration
    initial_top_errors: np.ndarray
    final_top_errors: np.ndarray

    @property
    def vcre_ratio(self) -> float:
        return float(self.final_vcre.mean() / self.initial_vcre.mean())


def toy_run(cfg: ToyRunConfig | None = None) -> ToyRunResult:
    cfg = cfg or ToyRunConfig()
    tcfg = cfg.train_config()
    scenes = cfg.scenes()
    bb = cfg.backbone(scenes)
    v0 = scene_expected_vcre(bb, scenes, tcfg)
    last = tcfg.iterations - 1
    history = train(scenes, bb, tcfg, seed=cfg.seed)
    v1 = scene_expected_vcre(bb, scenes, tcfg)
    trained = curriculum_select(np.array(history.records[-1].scene_losses), last, tcfg.curriculum) \
        if history.records else np.arange(len(scenes))
    init_bb = cfg.backbone(scenes)
    e0 = np.concatenate([top_cell_depth_errors(init_bb, s, scenes[s]) for s in trained])
    e1 = np.concatenate([top_cell_depth_errors(bb, s, scenes[s]) for s in trained])
    return ToyRunResult(scenes, bb, history, v0, v1, trained, e0, e1)
