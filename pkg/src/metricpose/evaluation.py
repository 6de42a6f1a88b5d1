"""Relocalization metrics: VCRE precision, confidence-ranked AUC and median pose errors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError
from .geometry import Intrinsics, Pose, as_tensor, rotation_angle_deg
from .objective import virtual_grid, vcre

VCRE_THRESHOLD_PX = 90.0


@dataclass(frozen=True, eq=False)
class Estimate:
    pose: Pose | None
    confidence: float
    pair_id: str = ""

    def __post_init__(self):
        if self.pose is not None and not np.isfinite(self.confidence):
            raise DomainError("a present estimate needs a finite confidence")

    @property
    def present(self) -> bool:
        return self.pose is not None


@dataclass(frozen=True)
class EvalReport:
    precision: float
    auc: float
    median_trans: float | None
    median_rot: float | None
    median_vcre: float | None
    estimate_rate: float
    num_pairs: int
    tie_break: str = "pair_id"


def _check_aligned(estimates, gts):
    if len(estimates) != len(gts):
        raise ShapeError(f"{len(estimates)} estimates for {len(gts)} ground-truth poses")


def _intrinsics_list(K, n):
    if isinstance(K, Intrinsics):
        return [K] * n
    if len(K) != n:
        raise ShapeError("one intrinsics per pair expected")
    return list(K)


def pair_vcres(estimates, gts, K, grid=None) -> np.ndarray:
    """VCRE per pair in pixels; ``inf`` for missing estimates."""
    _check_aligned(estimates, gts)
    grid = virtual_grid() if grid is None else as_tensor(grid)
    Ks = _intrinsics_list(K, len(gts))
    out = np.full(len(gts), np.inf)
    for k, (e, gt, Kk) in enumerate(zip(estimates, gts, Ks)):
        if e.pose is not None:
            out[k] = float(vcre(e.pose.detach(), gt, Kk, grid))
    return out


def vcre_precision(estimates, gts, K, grid=None, threshold_px: float = VCRE_THRESHOLD_PX) -> float:
    """Fraction of all pairs with VCRE strictly below the threshold; missing estimates fail."""
    errs = pair_vcres(estimates, gts, K, grid)
    if errs.size == 0:
        return 0.0
    return float(np.mean(errs < threshold_px))


def auc_precision_curve(estimates, correct, pair_ids=None):
    """Precision of every confidence-ranked prefix, and the area under that step curve.

    Present estimates are ranked by confidence (descending, ties by pair id);
    absent ones follow as incorrect.  Returns ``(ratios, precisions, auc)``
    where ``auc`` is the exact integral of the step curve over ratio [0, 1].
    """
    n = len(estimates)
    if n == 0:
        raise DomainError("need at least one pair")
    if len(correct) != n:
        raise ShapeError("one correctness flag per pair expected")
    ids = [e.pair_id for e in estimates] if pair_ids is None else list(pair_ids)
    present = [k for k, e in enumerate(estimates) if e.present]
    absent = [k for k, e in enumerate(estimates) if not e.present]
    present.sort(key=lambda k: (-float(estimates[k].confidence), ids[k], k))
    absent.sort(key=lambda k: (ids[k], k))
    hits = np.array([bool(correct[k]) for k in present] + [False] * len(absent), dtype=float)
    ranks = np.arange(1, n + 1)
    precisions = np.cumsum(hits) / ranks
    ratios = ranks / n
    return ratios, precisions, float(precisions.mean())


def pose_errors(h: Pose, h_hat: Pose) -> tuple[float, float]:
    """Translation distance (m) and rotation angle (deg) between two poses."""
    trans = float(np.linalg.norm((h.translation - h_hat.translation).detach().numpy()))
    rot = rotation_angle_deg(h.rotation.detach() @ h_hat.rotation.detach().T)
    return trans, rot


def median_errors(estimates, gts, K=None, grid=None) -> dict:
    """Medians over present estimates only, plus the estimate rate."""
    _check_aligned(estimates, gts)
    n = len(gts)
    idx = [k for k, e in enumerate(estimates) if e.present]
    if not idx:
        return {"median_trans": None, "median_rot": None, "median_vcre": None, "estimate_rate": 0.0}
    errs = np.array([pose_errors(gts[k], estimates[k].pose) for k in idx])
    out = {
        "median_trans": float(np.median(errs[:, 0])),
        "median_rot": float(np.median(errs[:, 1])),
        "median_vcre": None,
        "estimate_rate": len(idx) / n,
    }
    if K is not None:
        v = pair_vcres(estimates, gts, K, grid)
        out["median_vcre"] = float(np.median(v[idx]))
    return out


def evaluate(estimates, gts, K, grid=None, threshold_px: float = VCRE_THRESHOLD_PX) -> tuple[EvalReport, tuple]:
    """Full report and the ``(ratios, precisions)`` curve."""
    _check_aligned(estimates, gts)
    n = len(gts)
    if n == 0:
        return EvalReport(0.0, 0.0, None, None, None, 0.0, 0), (np.zeros(0), np.zeros(0))
    errs = pair_vcres(estimates, gts, K, grid)
    correct = errs < threshold_px
    ratios, precisions, auc = auc_precision_curve(estimates, correct)
    med = median_errors(estimates, gts, K, grid)
    report = EvalReport(
        precision=float(correct.mean()),
        auc=auc,
        median_trans=med["median_trans"],
        median_rot=med["median_rot"],
        median_vcre=med["median_vcre"],
        estimate_rate=med["estimate_rate"],
        num_pairs=n,
    )
    return report, (ratios, precisions)
