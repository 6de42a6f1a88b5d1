import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_pose
from metricpose.errors import DomainError, ShapeError
from metricpose.geometry import Intrinsics, Pose, rotation_about_axis
from metricpose.evaluation import (
    Estimate,
    auc_precision_curve,
    evaluate,
    median_errors,
    pair_vcres,
    pose_errors,
    vcre_precision,
)

K = Intrinsics(100.0, 100.0, 56.0, 56.0, 112, 112)


def shifted(gt, dx):
    return Pose.from_translation([dx, 0.0, 0.0]) @ gt


def dx_for_vcre(px, grid_z):
    # a pure x shift of dx moves every grid point by fx * dx / z pixels
    return px / (K.fx * np.mean(1.0 / grid_z))


def test_precision_examples(rng):
    gts = [random_pose(rng, 0.3) for _ in range(3)]
    assert vcre_precision([Estimate(g, 1.0) for g in gts], gts, K) == 1.0
    assert vcre_precision([Estimate(None, float("nan")) for _ in gts], gts, K) == 0.0


def test_precision_threshold_is_exclusive(rng):
    from metricpose.objective import virtual_grid

    z = virtual_grid()[:, 2].numpy()
    gts = [random_pose(rng, 0.3) for _ in range(3)]
    ests = [Estimate(shifted(g, dx_for_vcre(px, z)), 1.0) for g, px in zip(gts, [10.0, 89.9, 90.1])]
    assert pair_vcres(ests, gts, K) == pytest.approx([10.0, 89.9, 90.1], rel=1e-10)
    assert vcre_precision(ests, gts, K, threshold_px=90.0) == pytest.approx(2 / 3)


def test_length_mismatch():
    with pytest.raises(ShapeError):
        vcre_precision([Estimate(None, 0.0)], [Pose.identity(), Pose.identity()], K)


def test_absent_pose_needs_no_confidence_but_present_does():
    assert not Estimate(None, float("nan")).present
    with pytest.raises(DomainError):
        Estimate(Pose.identity(), float("inf"))


def est(conf, pid="", present=True):
    return Estimate(Pose.identity() if present else None, conf if present else float("nan"), pid)


def test_auc_examples():
    _, _, auc = auc_precision_curve([est(1.0, "a"), est(2.0, "b")], [True, True])
    assert auc == 1.0
    _, _, auc = auc_precision_curve([est(1.0, "a"), est(2.0, "b")], [False, False])
    assert auc == 0.0
    ratios, prec, auc = auc_precision_curve([est(5.0, "p0"), est(1.0, "p1")], [True, False])
    assert ratios.tolist() == [0.5, 1.0] and prec.tolist() == [1.0, 0.5]
    assert auc == 0.75


def test_auc_ranks_by_confidence_then_pair_id():
    ests = [est(1.0, "b"), est(1.0, "a"), est(3.0, "c")]
    _, prec, _ = auc_precision_curve(ests, [False, True, False])
    assert prec.tolist() == [0.0, 0.5, pytest.approx(1 / 3)]


def test_absent_estimates_go_last_as_failures():
    ests = [est(0, "x", present=False), est(0.1, "y")]
    _, prec, _ = auc_precision_curve(ests, [True, True])
    assert prec.tolist() == [1.0, 0.5]


@given(st.lists(st.tuples(st.floats(-10, 10), st.booleans()), min_size=1, max_size=30))
@settings(max_examples=60, deadline=None)
def test_auc_invariants(items):
    ests = [est(c, f"p{k:03d}") for k, (c, _) in enumerate(items)]
    correct = [ok for _, ok in items]
    ratios, prec, auc = auc_precision_curve(ests, correct)
    assert prec.min() - 1e-12 <= auc <= prec.max() + 1e-12
    assert prec[-1] == pytest.approx(np.mean(correct))
    # a strictly monotone map (exact in floating point) keeps the ranking
    mapped = [est(4 * c, e.pair_id) for (c, _), e in zip(items, ests)]
    assert auc_precision_curve(mapped, correct)[2] == pytest.approx(auc, abs=1e-15)
    # an extra absent pair cannot raise the final precision
    more = auc_precision_curve(ests + [est(0, "zzz", present=False)], correct + [True])[1]
    assert more[-1] <= prec[-1]


def test_absent_pair_can_raise_auc_of_a_badly_ranked_curve():
    # only the least confident estimate is right: appending a failure lengthens the good tail
    ests = [est(2.0, "a"), est(1.0, "b")]
    base = auc_precision_curve(ests, [False, True])[2]
    more = auc_precision_curve(ests + [est(0, "c", present=False)], [False, True, False])[2]
    assert base == 0.25 and more == pytest.approx((0 + 0.5 + 1 / 3) / 3) and more > base


def test_auc_needs_pairs():
    with pytest.raises(DomainError):
        auc_precision_curve([], [])


def test_pose_error_examples():
    assert pose_errors(Pose.identity(), Pose.identity()) == (0.0, 0.0)
    half_turn = Pose(rotation_about_axis([0, 0, 1], math.pi), torch.zeros(3))
    t, r = pose_errors(half_turn, Pose.identity())
    assert t == 0.0 and r == pytest.approx(180.0, abs=1e-9)
    assert pose_errors(Pose.from_translation([0.0, 3.0, 4.0]), Pose.identity()) == (5.0, 0.0)


def test_median_examples():
    gt = [Pose.identity()] * 4
    ests = [Estimate(Pose.from_translation([d, 0.0, 0.0]), 1.0) for d in (1.0, 2.0, 10.0)] + [Estimate(None, 0.0)]
    m = median_errors(ests, gt)
    assert m["median_trans"] == 2.0 and m["estimate_rate"] == 0.75
    perfect = median_errors([Estimate(Pose.identity(), 1.0)], [Pose.identity()], K)
    assert (perfect["median_trans"], perfect["median_rot"], perfect["median_vcre"], perfect["estimate_rate"]) == (
        0.0, 0.0, 0.0, 1.0)


def test_even_count_median_averages_central_pair():
    gt = [Pose.identity()] * 2
    m = median_errors([Estimate(Pose.from_translation([d, 0.0, 0.0]), 1.0) for d in (1.0, 4.0)], gt)
    assert m["median_trans"] == 2.5


def test_no_present_estimates():
    m = median_errors([Estimate(None, 0.0)] * 2, [Pose.identity()] * 2)
    assert m == {"median_trans": None, "median_rot": None, "median_vcre": None, "estimate_rate": 0.0}


def test_evaluate_report(rng):
    gts = [random_pose(rng, 0.3) for _ in range(4)]
    ests = [Estimate(g, float(k), f"p{k}") for k, g in enumerate(gts[:3])] + [Estimate(None, float("nan"), "p3")]
    report, (ratios, precisions) = evaluate(ests, gts, K)
    assert report.precision == 0.75 and report.estimate_rate == 0.75 and report.num_pairs == 4
    assert report.median_vcre == pytest.approx(0.0, abs=1e-9)
    assert precisions[-1] == report.precision and ratios[-1] == 1.0
    assert report.auc == pytest.approx(np.mean([1, 1, 1, 0.75]))


def test_evaluate_empty():
    report, (ratios, _) = evaluate([], [], K)
    assert report.estimate_rate == 0.0 and report.num_pairs == 0 and len(ratios) == 0
