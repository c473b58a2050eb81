import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fixseg.segmentation import (
    SegmentationError, SoftSegmentation, assignment_solve, is_permutation, matched_iou, noisy_init,
    quotient_distance, read_csv, uniform_random_init, write_csv,
)

seeds = st.integers(0, 2**32 - 1)


def brute_force_distance(y1, y2):
    P = y1.shape[1]
    return min(np.linalg.norm(y1[:, list(s)] - y2) for s in itertools.permutations(range(P)))


def test_soft_segmentation_validation():
    with pytest.raises(SegmentationError):
        SoftSegmentation(np.array([[0.5, 0.4]]))
    with pytest.raises(SegmentationError):
        SoftSegmentation(np.array([[1.5, -0.5]]))
    with pytest.raises(SegmentationError):
        SoftSegmentation(np.array([[np.nan, 1.0]]))
    y = SoftSegmentation(np.array([[1.0 + 1e-10, -1e-10]]))
    assert y.assign.min() >= 0.0


def test_from_labels_and_hard_labels():
    y = SoftSegmentation.from_labels([2, 0, 1, 2], P=4)
    assert y.P == 4 and y.N == 4
    np.testing.assert_array_equal(y.hard_labels(), [2, 0, 1, 2])
    with pytest.raises(SegmentationError):
        SoftSegmentation.from_labels([0, 3], P=3)


def test_permuted_columns():
    y = SoftSegmentation(np.array([[0.2, 0.3, 0.5]]))
    np.testing.assert_array_equal(y.permuted([2, 0, 1]).assign, [[0.5, 0.2, 0.3]])


@settings(max_examples=100, deadline=None)
@given(seeds, st.integers(1, 6))
def test_assignment_matches_brute_force(seed, P):
    profit = np.random.default_rng(seed).standard_normal((P, P))
    perm = assignment_solve(profit)
    assert is_permutation(perm)
    best = max(sum(profit[i, s[i]] for i in range(P)) for s in itertools.permutations(range(P)))
    assert np.isclose(sum(profit[i, perm[i]] for i in range(P)), best, rtol=0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(seeds, st.integers(1, 32), st.integers(1, 5))
def test_quotient_distance_matches_brute_force(seed, N, P):
    rng = np.random.default_rng(seed)
    y1, y2 = uniform_random_init(N, P, rng).assign, uniform_random_init(N, P, rng).assign
    d, perm = quotient_distance(y1, y2)
    assert np.isclose(d, brute_force_distance(y1, y2), rtol=0, atol=1e-9)
    assert np.isclose(np.linalg.norm(y1[:, perm] - y2), d, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(seeds, st.integers(1, 32), st.integers(1, 5))
def test_metric_axioms(seed, N, P):
    rng = np.random.default_rng(seed)
    y1, y2, y3 = (uniform_random_init(N, P, rng).assign for _ in range(3))
    d12, d21 = quotient_distance(y1, y2)[0], quotient_distance(y2, y1)[0]
    assert d12 >= 0
    assert abs(d12 - d21) < 1e-9
    assert d12 <= quotient_distance(y1, y3)[0] + quotient_distance(y3, y2)[0] + 1e-9
    s = rng.permutation(P)
    assert abs(quotient_distance(y1[:, s], y2)[0] - d12) < 1e-9
    assert quotient_distance(y1, y1[:, s])[0] < 1e-12


def test_distinct_binary_segmentations_have_positive_distance():
    a = SoftSegmentation.from_labels([0, 0, 1, 1], 2)
    b = SoftSegmentation.from_labels([0, 1, 1, 1], 2)
    assert quotient_distance(a, b)[0] > 0
    assert quotient_distance(a, SoftSegmentation.from_labels([1, 1, 0, 0], 2))[0] == 0


def test_matched_iou_is_label_permutation_invariant():
    gt = SoftSegmentation.from_labels([0, 0, 1, 1, 2, 2], 3)
    pred = SoftSegmentation.from_labels([2, 2, 0, 0, 1, 1], 3)
    assert matched_iou(pred, gt) == 1.0
    half = SoftSegmentation.from_labels([0, 1, 1, 1, 2, 2], 3)
    score, parts = matched_iou(half, gt, return_parts=True)
    np.testing.assert_allclose(parts, [0.5, 2 / 3, 1.0])
    assert np.isclose(score, np.mean([0.5, 2 / 3, 1.0]))


def test_matched_iou_respects_semantic_groups():
    gt = SoftSegmentation.from_labels([0, 0, 1, 1, 2, 2], 3)
    pred = SoftSegmentation.from_labels([1, 1, 0, 0, 2, 2], 3)
    assert matched_iou(pred, gt) == 1.0
    # part 0 is its own group, so it cannot be matched with part 1
    assert matched_iou(pred, gt, per_semantic_groups=[[0], [1, 2]]) < 1.0
    swapped = SoftSegmentation.from_labels([0, 0, 2, 2, 1, 1], 3)
    assert matched_iou(swapped, gt, per_semantic_groups=[[0], [1, 2]]) == 1.0
    with pytest.raises(SegmentationError):
        matched_iou(pred, gt, per_semantic_groups=[[0], [1]])


def test_matched_iou_skips_empty_parts_with_warning():
    gt = SoftSegmentation.from_labels([0, 0, 1, 1], 3)
    with pytest.warns(UserWarning):
        assert matched_iou(gt, gt) == 1.0


def test_matched_iou_hardens_soft_predictions():
    gt = SoftSegmentation.from_labels([0, 1], 2)
    pred = SoftSegmentation(np.array([[0.6, 0.4], [0.45, 0.55]]))
    assert matched_iou(pred, gt) == 1.0


def test_noisy_init_endpoints():
    rng = np.random.default_rng(0)
    gt = SoftSegmentation.from_labels(rng.integers(3, size=10), 3)
    assert np.array_equal(noisy_init(gt, 0.0, rng).assign, gt.assign)
    raw = noisy_init(gt, 1.0, np.random.default_rng(1), renormalize=False)
    np.testing.assert_array_equal(raw, np.random.default_rng(1).random((10, 3)))
    y = noisy_init(gt, 0.5, rng)
    np.testing.assert_allclose(y.assign.sum(1), 1.0)
    with pytest.raises(SegmentationError):
        noisy_init(gt, 1.5, rng)


def test_noisy_init_mean_matches_blend():
    # E[(1 - a) g + a xi] = (1 - a) g + a / 2 before renormalisation
    rng = np.random.default_rng(2)
    g = SoftSegmentation.from_labels([0, 1], 2)
    draws = np.stack([noisy_init(g, 0.4, rng, renormalize=False) for _ in range(20000)])
    np.testing.assert_allclose(draws.mean(0), 0.6 * g.assign + 0.2, atol=0.01)


def test_uniform_random_init_rows_and_determinism():
    a = uniform_random_init(50, 4, np.random.default_rng(3))
    b = uniform_random_init(50, 4, np.random.default_rng(3))
    assert a.assign.tobytes() == b.assign.tobytes()
    np.testing.assert_allclose(a.assign.sum(1), 1.0, atol=1e-12)


def test_csv_round_trip(tmp_path):
    y = uniform_random_init(6, 3, np.random.default_rng(4))
    write_csv(tmp_path / "y.csv", y)
    assert read_csv(tmp_path / "y.csv").assign.tobytes() == y.assign.tobytes()
