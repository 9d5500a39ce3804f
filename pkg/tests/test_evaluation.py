import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from slimseg.evaluation import (
    DEFAULT_BINS,
    ConfusionMatrix,
    diff_map,
    distance_transform,
    error_distance_histogram,
    miou,
    squared_distance_transform,
    update_confusion,
)
from slimseg.losses import boundary_gt


def confusion_oracle(pred, gt, K, ignore=255):
    cm = np.zeros((K, K), dtype=np.int64)
    for p, g in zip(pred.ravel(), gt.ravel()):
        if g != ignore:
            cm[g, p] += 1
    return cm


def miou_oracle(cm):
    K = cm.shape[0]
    ious = []
    for k in range(K):
        union = cm[k, :].sum() + cm[:, k].sum() - cm[k, k]
        if union:
            ious.append(cm[k, k] / union)
    return sum(ious) / len(ious)


def sq_dist_oracle(b):
    pts = np.argwhere(b)
    H, W = b.shape
    out = np.zeros((H, W), dtype=np.int64)
    for i in range(H):
        for j in range(W):
            out[i, j] = min((i - u) ** 2 + (j - v) ** 2 for u, v in pts)
    return out


# ---------------------------------------------------------------------------
# confusion and mIoU
# ---------------------------------------------------------------------------


def test_confusion_examples():
    cm = ConfusionMatrix(3)
    cm = update_confusion(cm, np.full(100, 2), np.full(100, 2))
    assert cm.counts[2, 2] == 100 and cm.total == 100
    same = update_confusion(cm, np.zeros(10), np.full(10, 255))
    np.testing.assert_array_equal(same.counts, cm.counts)


def test_confusion_out_of_range():
    with pytest.raises(ValueError):
        update_confusion(ConfusionMatrix(2), np.array([2]), np.array([0]))
    with pytest.raises(ValueError):
        update_confusion(ConfusionMatrix(2), np.array([0]), np.array([5]))


@pytest.mark.parametrize("seed", range(10))
def test_confusion_and_miou_match_oracle(seed):
    g = np.random.default_rng(seed)
    K = 4
    gt = g.integers(0, K, size=(32, 32))
    gt[g.random((32, 32)) < 0.1] = 255
    pred = np.where(g.random((32, 32)) < 0.7, np.minimum(gt, K - 1), g.integers(0, K, size=(32, 32)))
    cm = update_confusion(ConfusionMatrix(K), pred, gt)
    np.testing.assert_array_equal(cm.counts, confusion_oracle(pred, gt, K))
    assert cm.total == int((gt != 255).sum())
    assert miou(cm)[0] == pytest.approx(miou_oracle(cm.counts), abs=1e-15)


def test_miou_examples():
    gt = np.array([0, 0, 1, 1])
    score, ious = miou(update_confusion(ConfusionMatrix(2), gt, gt))
    assert score == 1.0
    score, ious = miou(update_confusion(ConfusionMatrix(2), np.zeros(4, int), gt))
    np.testing.assert_allclose(ious, [0.5, 0.0])
    assert score == 0.25


def test_miou_absent_classes():
    score, ious = miou(update_confusion(ConfusionMatrix(3), np.array([0, 1]), np.array([0, 1])))
    assert score == 1.0 and np.isnan(ious[2])
    with pytest.raises(ValueError):
        miou(ConfusionMatrix(3))


@given(st.integers(0, 10_000))
def test_miou_permutation_invariant(seed):
    g = np.random.default_rng(seed)
    K = 5
    gt, pred = g.integers(0, K, size=50), g.integers(0, K, size=50)
    perm = g.permutation(K)
    a = miou(update_confusion(ConfusionMatrix(K), pred, gt))[0]
    b = miou(update_confusion(ConfusionMatrix(K), perm[pred], perm[gt]))[0]
    assert a == pytest.approx(b, abs=1e-12)


@given(st.integers(0, 10_000))
def test_merge_order_irrelevant(seed):
    g = np.random.default_rng(seed)
    K = 3
    shards = [update_confusion(ConfusionMatrix(K), g.integers(0, K, 20), g.integers(0, K, 20)) for _ in range(3)]
    a = (shards[0] + shards[1]) + shards[2]
    b = shards[2].merge(shards[0].merge(shards[1]))
    np.testing.assert_array_equal(a.counts, b.counts)
    whole = ConfusionMatrix(K)
    for s in shards:
        whole = whole + s
    assert whole.total == 60


# ---------------------------------------------------------------------------
# distance transform
# ---------------------------------------------------------------------------


def test_distance_examples():
    b = np.zeros((6, 6), np.uint8)
    b[0, 0] = 1
    assert distance_transform(b)[3, 4] == 5.0
    assert not distance_transform(np.ones((4, 5))).any()
    with pytest.raises(ValueError):
        distance_transform(np.zeros((3, 3)))


@pytest.mark.parametrize("seed", range(10))
def test_distance_matches_brute_force(seed):
    g = np.random.default_rng(seed)
    b = g.random((32, 32)) < g.uniform(0.002, 0.05)
    b[g.integers(32), g.integers(32)] = True
    sq = squared_distance_transform(b)
    np.testing.assert_array_equal(sq, sq_dist_oracle(b))
    np.testing.assert_array_equal(distance_transform(b), np.sqrt(sq_dist_oracle(b)))


def test_distance_rectangular():
    b = np.zeros((7, 20), bool)
    b[6, 19] = True
    b[0, 3] = True
    np.testing.assert_array_equal(squared_distance_transform(b), sq_dist_oracle(b))


# ---------------------------------------------------------------------------
# error histogram
# ---------------------------------------------------------------------------


def _two_class(size=16, col=8):
    gt = np.zeros((size, size), np.uint8)
    gt[:, col:] = 1
    return gt


def test_histogram_perfect_prediction():
    gt = _two_class()
    assert not error_distance_histogram(gt, gt).any()


def test_histogram_errors_on_boundary_only():
    gt = _two_class()
    pred = gt.copy()
    band = boundary_gt(gt, 1)[0].astype(bool)
    pred[band] = 1 - pred[band]
    counts = error_distance_histogram(pred, gt)
    assert counts[0] == band.sum() and counts[1:].sum() == 0


def test_histogram_constructed_case():
    # band = columns 7 and 8; an error at column c sits at distance 7 - c or c - 8
    gt = _two_class()
    pred = gt.copy()
    errors = {0: 7, 2: 5, 4: 3, 5: 2, 10: 2, 14: 6}  # column -> distance
    for row, col in enumerate(errors):
        pred[row, col] = 1 - pred[row, col]
    pred[10, 3] = 255  # disagreeing ignore prediction still counts as an error
    gt_ign = gt.copy()
    gt_ign[12, 0] = 255
    pred[12, 0] = 1
    counts = error_distance_histogram(pred, gt_ign)
    expected = np.zeros(len(DEFAULT_BINS) - 1, int)
    for d in list(errors.values()) + [4]:
        expected[np.searchsorted(DEFAULT_BINS, d, side="right") - 1] += 1
    np.testing.assert_array_equal(counts, expected)


@pytest.mark.parametrize("seed", range(10))
def test_histogram_total_matches_confusion(seed):
    g = np.random.default_rng(seed)
    K = 3
    gt = np.kron(g.integers(0, K, size=(4, 4)), np.ones((8, 8), int))
    gt[0, 0], gt[0, 1] = 0, 1
    gt[g.random(gt.shape) < 0.05] = 255
    pred = np.where(g.random(gt.shape) < 0.8, np.where(gt == 255, 0, gt), g.integers(0, K, size=gt.shape))
    cm = update_confusion(ConfusionMatrix(K), pred, gt)
    off_diag = cm.total - np.trace(cm.counts)
    assert error_distance_histogram(pred, gt).sum() == off_diag


# ---------------------------------------------------------------------------
# difference maps
# ---------------------------------------------------------------------------


def test_diff_map_examples():
    a = np.array([[0, 1], [1, 0]])
    assert diff_map(a, a, a).ratio == 0.0
    d = diff_map(a, 1 - a, np.array([[3, 3], [4, 4]]))
    assert d.ratio == 1.0
    np.testing.assert_array_equal(d.labels, [[3, 3], [4, 4]])
    with pytest.raises(ValueError):
        diff_map(a, a[:1], a)


@pytest.mark.parametrize("seed", range(5))
def test_diff_map_matches_oracle(seed):
    g = np.random.default_rng(seed)
    a, b, gt = (g.integers(0, 3, size=(16, 16)) for _ in range(3))
    d = diff_map(a, b, gt)
    count = 0
    for idx in np.ndindex(a.shape):
        if a[idx] != b[idx]:
            count += 1
            assert d.labels[idx] == gt[idx]
        else:
            assert d.labels[idx] == -1
    assert d.ratio == count / a.size
