import math

import numpy as np
import pytest
import torch

from conftest import tensor
from metricpose.correspondence import (
    CorrespondenceSet,
    correspondence_model,
    correspondence_probability,
    keypoint_distribution,
    match_distribution,
    sample_indices,
    sample_set,
    set_log_prob,
    similarity_matrix,
)
from metricpose.errors import DomainError, EmptyDistributionError, ShapeError, SupportError
from metricpose.geometry import Intrinsics
from metricpose.keypoints import KeypointMaps


def unit(rng, *shape):
    v = rng.normal(size=shape)
    return tensor(v / np.linalg.norm(v, axis=-1, keepdims=True))


def brute_dual_softmax(m, temp, dustbin):
    """Row and column softmaxes with explicit loops and exp-sums."""
    n, k = len(m), len(m[0])
    fwd = [[0.0] * k for _ in range(n)]
    bwd = [[0.0] * k for _ in range(n)]
    for i in range(n):
        logits = [m[i][j] / temp for j in range(k)] + ([dustbin / temp] if dustbin is not None else [])
        top = max(logits)
        z = sum(math.exp(v - top) for v in logits)
        for j in range(k):
            fwd[i][j] = math.exp(logits[j] - top) / z
    for j in range(k):
        logits = [m[i][j] / temp for i in range(n)] + ([dustbin / temp] if dustbin is not None else [])
        top = max(logits)
        z = sum(math.exp(v - top) for v in logits)
        for i in range(n):
            bwd[i][j] = math.exp(logits[i] - top) / z
    return np.array(fwd), np.array(bwd)


def test_similarity_examples(rng):
    d = unit(rng, 1, 128)
    q = unit(rng, 1, 128)
    q = q - (q @ d.T) * d
    q = q / torch.linalg.vector_norm(q)
    assert float(similarity_matrix(d, d)) == pytest.approx(1.0, abs=1e-15)
    assert float(similarity_matrix(d, q)) == pytest.approx(0.0, abs=1e-15)
    assert float(similarity_matrix(d, -d)) == pytest.approx(-1.0, abs=1e-15)


def test_similarity_flattens_grids_and_stays_bounded(rng):
    m = similarity_matrix(unit(rng, 2, 3, 16), unit(rng, 4, 1, 16))
    assert m.shape == (6, 4)
    assert torch.all(m.abs() <= 1 + 1e-12)


def test_similarity_shape_mismatch(rng):
    with pytest.raises(ShapeError):
        similarity_matrix(unit(rng, 2, 8), unit(rng, 2, 9))


def test_match_1x1_with_dustbin():
    md = match_distribution([[1.0]], 0.1, 1.0)
    assert float(md.forward) == pytest.approx(0.5, abs=1e-15)
    assert float(md.mutual) == pytest.approx(0.25, abs=1e-15)


def test_match_identity_without_dustbin():
    md = match_distribution(torch.eye(2), 0.1, None)
    p = math.exp(10) / (math.exp(10) + 1)
    assert float(md.forward[0, 0]) == pytest.approx(p, rel=1e-14)
    assert float(md.mutual[1, 1]) == pytest.approx(p * p, rel=1e-14)


def test_match_rejects_bad_temperature():
    with pytest.raises(DomainError):
        match_distribution(torch.eye(2), 0.0)


def test_match_row_shift_invariance(rng):
    m = tensor(rng.uniform(-1, 1, (3, 4)))
    shifted = m.clone()
    shifted[1] += 0.37
    a = match_distribution(m, 0.1, None).forward
    b = match_distribution(shifted, 0.1, None).forward
    assert torch.allclose(a, b, atol=1e-14)


@pytest.mark.parametrize("dustbin", [None, 1.0, -0.3])
def test_dual_softmax_matches_brute_force(rng, dustbin):
    for _ in range(10):
        m = rng.uniform(-1, 1, (5, 5))
        md = match_distribution(tensor(m), 0.1, dustbin)
        fwd, bwd = brute_dual_softmax(m.tolist(), 0.1, dustbin)
        assert np.abs(md.forward.numpy() - fwd).max() < 1e-12
        assert np.abs(md.backward.numpy() - bwd).max() < 1e-12
        assert np.abs(md.mutual.numpy() - fwd * bwd).max() < 1e-12


def test_dustbin_removal_leaves_subunit_sums(rng):
    md = match_distribution(tensor(rng.uniform(-1, 1, (4, 6))), 0.1, 0.5)
    assert torch.all(md.forward.sum(1) <= 1) and torch.all(md.backward.sum(0) <= 1)
    assert torch.allclose(match_distribution(tensor(rng.uniform(-1, 1, (4, 6))), 0.1, None).forward.sum(1),
                          torch.ones(4, dtype=torch.float64), atol=1e-12)


def test_mutual_symmetric_under_transpose(rng):
    m = tensor(rng.uniform(-1, 1, (3, 5)))
    a = match_distribution(m, 0.1, 1.0)
    b = match_distribution(m.T, 0.1, 1.0)
    assert torch.allclose(a.forward, b.backward.T, atol=1e-15)
    assert torch.allclose(a.mutual, b.mutual.T, atol=1e-15)


def test_low_temperature_concentrates_on_argmax(rng):
    # every row has a unique maximum with a clear margin
    m = tensor(rng.permuted(np.tile([0.5, 0.49, 0.0, -0.25], (4, 1)), axis=1))
    md = match_distribution(m, 1e-4, None)
    assert torch.all(md.forward.max(1).values > 1 - 1e-6)


def test_keypoint_distribution_examples():
    assert torch.allclose(keypoint_distribution(torch.zeros(2, 2)), torch.full((2, 2), 0.25, dtype=torch.float64))
    assert torch.allclose(keypoint_distribution([0.0, math.log(3)]), tensor([0.25, 0.75]), atol=1e-15)


def test_keypoint_distribution_shift_invariant_and_normalized(rng):
    c = tensor(rng.normal(size=(3, 4)))
    p = keypoint_distribution(c)
    assert torch.allclose(p, keypoint_distribution(c + 7.5), atol=1e-15)
    assert abs(float(p.sum()) - 1) < 1e-12 and torch.all(p > 0)


def test_correspondence_probability_uniform_factors():
    half = torch.full((2, 2), 0.5, dtype=torch.float64)
    prob = correspondence_probability(half, half, [0.5, 0.5], [0.5, 0.5])
    assert torch.allclose(prob.P, torch.full((2, 2), 0.0625, dtype=torch.float64), atol=0)


def test_correspondence_probability_zero_keypoint_row(rng):
    f = tensor(rng.uniform(size=(3, 3)))
    prob = correspondence_probability(f, f, [0.0, 0.5, 0.5], [0.2, 0.3, 0.5])
    assert torch.all(prob.P[0] == 0)


def test_correspondence_probability_is_product_and_bounded(rng):
    md = match_distribution(tensor(rng.uniform(-1, 1, (5, 5))), 0.1, 1.0)
    ka = keypoint_distribution(tensor(rng.normal(size=5)))
    kb = keypoint_distribution(tensor(rng.normal(size=5)))
    prob = correspondence_probability(md.forward, md.backward, ka, kb)
    brute = np.array([[float(ka[i]) * float(md.forward[i, j]) * float(kb[j]) * float(md.backward[i, j])
                       for j in range(5)] for i in range(5)])
    assert np.abs(prob.P.numpy() - brute).max() < 1e-12
    assert torch.equal(prob.P, (ka[:, None] * prob.forward) * (kb[None, :] * prob.backward))
    bound = torch.minimum(ka[:, None].expand(5, 5), kb[None, :].expand(5, 5))
    assert torch.all(prob.P <= bound)
    assert torch.all((prob.P >= 0) & (prob.P <= 1))


def test_correspondence_probability_shape_errors():
    with pytest.raises(ShapeError):
        correspondence_probability(torch.ones(2, 3), torch.ones(2, 3), [1, 1], [1, 1])
    with pytest.raises(ShapeError):
        correspondence_probability(torch.ones(2, 2), torch.ones(2, 3), [1, 1], [1, 1])


def test_sample_single_nonzero_entry():
    P = torch.zeros(3, 3, dtype=torch.float64)
    P[1, 2] = 0.4
    for seed in range(5):
        assert sample_indices(P, 1, np.random.default_rng(seed)).tolist() == [5]


def test_sample_errors():
    with pytest.raises(EmptyDistributionError):
        sample_indices(torch.zeros(2, 2), 1, np.random.default_rng(0))
    P = torch.zeros(2, 2, dtype=torch.float64)
    P[0, 0] = P[1, 1] = 0.5
    with pytest.raises(SupportError):
        sample_indices(P, 3, np.random.default_rng(0))
    assert len(sample_indices(P, 3, np.random.default_rng(0), replace=True)) == 3


def test_entries_below_floor_are_never_drawn():
    P = torch.tensor([[1e-40, 1.0]], dtype=torch.float64)
    with pytest.raises(SupportError):
        sample_indices(P, 2, np.random.default_rng(0))


def test_sampling_without_replacement_is_distinct_and_deterministic(rng):
    P = tensor(rng.uniform(size=(4, 5)))
    a = sample_indices(P, 12, np.random.default_rng(9))
    b = sample_indices(P, 12, np.random.default_rng(9))
    assert np.array_equal(a, b) and len(set(a.tolist())) == 12


def test_first_draw_frequencies_match_target():
    rng = np.random.default_rng(3)
    P = tensor(rng.uniform(size=(4, 4)) ** 2)
    target = (P / P.sum()).reshape(-1).numpy()
    draws = np.array([sample_indices(P, 3, rng)[0] for _ in range(20_000)])
    freq = np.bincount(draws, minlength=16) / len(draws)
    assert 0.5 * np.abs(freq - target).sum() < 0.02


def test_second_draw_follows_successive_sampling():
    # P(second = k) = sum_j p_j p_k / (1 - p_j), j != k
    p = np.array([0.5, 0.3, 0.2])
    oracle = np.array([sum(p[j] * p[k] / (1 - p[j]) for j in range(3) if j != k) for k in range(3)])
    rng = np.random.default_rng(5)
    draws = np.array([sample_indices(tensor(p), 2, rng)[1] for _ in range(20_000)])
    freq = np.bincount(draws, minlength=3) / len(draws)
    assert 0.5 * np.abs(freq - oracle).sum() < 0.02


def test_set_log_prob_uses_normalized_matrix(rng):
    P = tensor(rng.uniform(size=(3, 3)))
    idx = [0, 4, 8]
    expected = sum(math.log(float(P.reshape(-1)[k]) / float(P.sum())) for k in idx)
    assert float(set_log_prob(P, idx)) == pytest.approx(expected, rel=1e-13)
    assert float(set_log_prob(3 * P, idx)) == pytest.approx(expected, rel=1e-13)


def test_sample_set_builds_backprojected_points(rng):
    h, w = 2, 3
    K = Intrinsics(50.0, 50.0, 21.0, 14.0, 42, 28)
    maps = [
        KeypointMaps(tensor(rng.uniform(0, 1, (h, w, 2))), tensor(rng.uniform(1, 3, (h, w))),
                     tensor(rng.normal(size=(h, w))), unit(rng, h, w, 8))
        for _ in range(2)
    ]
    prob = correspondence_model(*maps)
    cs = sample_set(prob, *maps, K, K, 4, np.random.default_rng(0))
    again = sample_set(prob, *maps, K, K, 4, np.random.default_rng(0))
    assert np.array_equal(cs.cells_a, again.cells_a) and np.array_equal(cs.cells_b, again.cells_b)
    assert len(cs) == 4 and torch.all(cs.prob > 0)
    assert torch.equal(cs.x_a, maps[0].points(K)[torch.as_tensor(cs.cells_a)])
    assert torch.equal(cs.x_b, maps[1].points(K)[torch.as_tensor(cs.cells_b)])
    assert torch.equal(cs.prob, prob.P[torch.as_tensor(cs.cells_a), torch.as_tensor(cs.cells_b)])


def test_set_from_points_defaults_to_uniform():
    cs = CorrespondenceSet.from_points(torch.zeros(4, 3), torch.ones(4, 3))
    assert len(cs) == 4 and torch.allclose(cs.prob, torch.full((4,), 0.25, dtype=torch.float64))
    assert len(cs.subset([1, 3])) == 2
