import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from slimseg import losses as L
from slimseg import tensor as T
from slimseg.losses import LossConfig, OhemConfig, WidthTerms
from slimseg.tensor import Tensor, backward, grad_check

NO_OHEM = LossConfig(ohem=None)


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def probs(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def clip(p):
    return np.clip(p, L.PROB_EPS, 1 - L.PROB_EPS)


# ---------------------------------------------------------------------------
# brute-force oracles
# ---------------------------------------------------------------------------


def ce_oracle(logits, labels, selected):
    p = clip(probs(logits))
    vals = []
    B, _, H, W = logits.shape
    for b in range(B):
        for i in range(H):
            for j in range(W):
                if selected[b, i, j]:
                    vals.append(-math.log(p[b, labels[b, i, j], i, j]))
    return sum(vals) / len(vals) if vals else 0.0


def kd_oracle(logits, teacher, selected):
    p = clip(probs(logits))
    vals = []
    B, K, H, W = logits.shape
    for b in range(B):
        for i in range(H):
            for j in range(W):
                if selected[b, i, j]:
                    vals.append(-sum(teacher[b, k, i, j] * math.log(p[b, k, i, j]) for k in range(K)))
    return sum(vals) / len(vals) if vals else 0.0


def bce_oracle(p, y, selected):
    p = clip(p)
    vals = [
        -(y[idx] * math.log(p[idx]) + (1 - y[idx]) * math.log(1 - p[idx]))
        for idx in np.ndindex(p.shape)
        if selected[idx]
    ]
    return sum(vals) / len(vals) if vals else 0.0


def boundary_oracle(labels, radius, ignore):
    H, W = labels.shape
    out = np.zeros((H, W), dtype=np.uint8)
    for i in range(H):
        for j in range(W):
            if labels[i, j] == ignore:
                continue
            for u in range(H):
                for v in range(W):
                    lab = labels[u, v]
                    if lab != ignore and lab != labels[i, j] and (u - i) ** 2 + (v - j) ** 2 <= radius * radius:
                        out[i, j] = 1
                        break
                if out[i, j]:
                    break
    return out


def random_labels(seed, size=32, K=4, ignore_frac=0.05):
    g = np.random.default_rng(seed)
    # blocky maps give realistic borders; sprinkle ignore pixels on top
    coarse = g.integers(0, K, size=(size // 4, size // 4))
    lab = np.kron(coarse, np.ones((4, 4), dtype=np.int64))
    lab = np.where(g.random((size, size)) < 0.1, g.integers(0, K, size=(size, size)), lab)
    lab = np.where(g.random((size, size)) < ignore_frac, 255, lab)
    return lab.astype(np.uint8)


# ---------------------------------------------------------------------------
# cross-entropy and OHEM
# ---------------------------------------------------------------------------


def test_ce_confident_correct():
    labels = np.random.default_rng(0).integers(0, 3, size=(2, 4, 4))
    logits = np.eye(3)[labels].transpose(0, 3, 1, 2) * 20.0
    assert L.cross_entropy(t64(logits), labels).item() < 1e-6


def test_ce_uniform_two_class():
    labels = np.random.default_rng(0).integers(0, 2, size=(1, 3, 3))
    assert L.cross_entropy(t64(np.zeros((1, 2, 3, 3))), labels).item() == pytest.approx(math.log(2), abs=1e-12)


def test_ce_all_ignored_is_zero_and_connected():
    x = t64(np.random.default_rng(0).normal(size=(1, 3, 2, 2)), grad=True)
    loss = L.cross_entropy(x, np.full((1, 2, 2), 255))
    assert loss.item() == 0.0
    backward(loss)
    assert not x.grad.any()


def test_ce_label_out_of_range():
    with pytest.raises(ValueError, match="out of range"):
        L.cross_entropy(t64(np.zeros((1, 3, 2, 2))), np.full((1, 2, 2), 3))


def test_ohem_drops_easy_pixels():
    # 8 pixels at true-class prob 0.99, 8 at 0.5
    labels = np.zeros((1, 4, 4), dtype=np.int64)
    logits = np.zeros((1, 2, 4, 4))
    logits[0, 0, :2] = math.log(99.0)
    sel = L.ohem_selection(probs(logits)[:, 0], np.ones((1, 4, 4), bool), OhemConfig())
    np.testing.assert_array_equal(sel[0, :2], False)
    np.testing.assert_array_equal(sel[0, 2:], True)
    assert L.cross_entropy(t64(logits), labels).item() == pytest.approx(math.log(2), abs=1e-12)


def test_ohem_backfills_lowest_probabilities():
    valid = np.ones((1, 8, 8), bool)
    valid[0, 0, 0] = False
    g = np.random.default_rng(1)
    p = 0.8 + 0.19 * g.random((1, 8, 8))
    sel = L.ohem_selection(p, valid, OhemConfig(0.7, 1 / 16))
    assert sel.sum() == 3  # floor(63 / 16)
    chosen = np.sort(p[sel])
    np.testing.assert_array_equal(chosen, np.sort(p[valid])[:3])
    assert not sel[0, 0, 0]


@given(st.integers(0, 10_000))
def test_ohem_selection_properties(seed):
    g = np.random.default_rng(seed)
    p = g.random((2, 5, 5))
    valid = g.random((2, 5, 5)) < 0.8
    sel = L.ohem_selection(p, valid, OhemConfig())
    assert not (sel & ~valid).any()
    n = int(valid.sum())
    if n:
        assert sel.sum() >= max(1, n // 16)
        hard = valid & (p < 0.7)
        if hard.sum() >= max(1, n // 16):
            np.testing.assert_array_equal(sel, hard)


# ---------------------------------------------------------------------------
# soft targets, entropy, Gibbs
# ---------------------------------------------------------------------------


def test_soft_target_equal_distribution_gives_entropy():
    t = np.array([0.25, 0.75]).reshape(1, 2, 1, 1)
    loss = L.soft_target_ce(t64(np.log(t)), t64(t)).item()
    expected = -(0.25 * math.log(0.25) + 0.75 * math.log(0.75))
    assert loss == pytest.approx(expected, abs=1e-7)
    assert expected == pytest.approx(0.5623, abs=1e-4)


def test_soft_target_one_hot_match():
    t = np.zeros((1, 3, 2, 2))
    t[:, 1] = 1
    assert L.soft_target_ce(t64(t * 20.0), t64(t)).item() < 1e-6


def test_soft_target_rejects_unnormalized():
    with pytest.raises(ValueError):
        L.soft_target_ce(t64(np.zeros((1, 2, 1, 1))), t64(np.full((1, 2, 1, 1), 0.6)))


def test_gibbs_inequality_1000_pixels():
    g = np.random.default_rng(7)
    for K in (2, 3, 5):
        teacher = probs(g.normal(scale=3, size=(1, K, 1000, 1)))
        student = g.normal(scale=3, size=(1, K, 1000, 1))
        for b in range(1000):
            sl = slice(b, b + 1)
            ce = L.soft_target_ce(t64(student[:, :, sl]), t64(teacher[:, :, sl])).item()
            assert ce >= L.entropy(teacher[:, :, sl]) - 1e-7


def test_gibbs_equality_when_student_is_teacher():
    g = np.random.default_rng(8)
    logits = g.normal(scale=3, size=(1, 4, 1000, 1))
    teacher = probs(logits)
    for b in range(0, 1000, 7):
        sl = slice(b, b + 1)
        ce = L.soft_target_ce(t64(logits[:, :, sl]), t64(teacher[:, :, sl])).item()
        assert abs(ce - L.entropy(teacher[:, :, sl])) <= 1e-7


@given(st.integers(0, 10_000), st.integers(2, 6))
def test_gibbs_property(seed, K):
    g = np.random.default_rng(seed)
    teacher = probs(g.normal(scale=2, size=(1, K, 3, 3)))
    student = g.normal(scale=2, size=(1, K, 3, 3))
    assert L.soft_target_ce(t64(student), t64(teacher)).item() >= L.entropy(teacher) - 1e-7


# ---------------------------------------------------------------------------
# binary CE and masks
# ---------------------------------------------------------------------------


def test_binary_ce_examples():
    y = np.random.default_rng(0).integers(0, 2, size=(1, 1, 4, 4)).astype(np.float64)
    assert L.binary_ce(t64(np.full(y.shape, 0.5)), y).item() == pytest.approx(math.log(2), abs=1e-12)
    assert L.binary_ce(t64(y), y).item() <= 1e-6
    ones = np.ones((1, 1, 3, 3))
    assert L.binary_ce(t64(np.full(ones.shape, 0.9)), ones).item() == pytest.approx(-math.log(0.9), abs=1e-12)
    assert L.binary_ce(t64(np.full(ones.shape, 0.9)), ones).item() == pytest.approx(0.1054, abs=1e-4)


def test_boundary_mask_strict():
    assert L.boundary_mask(np.full((1, 1, 3, 3), 0.9), 0.7).all()
    assert not L.boundary_mask(np.full((1, 1, 3, 3), 0.7), 0.7).any()


@pytest.mark.parametrize("seed", range(10))
def test_boundary_mask_elementwise_oracle(seed):
    p = np.random.default_rng(seed).random((1, 1, 32, 32))
    p[0, 0, 0, :4] = 0.7
    mask = L.boundary_mask(Tensor(p, dtype=np.float64), 0.7)
    ref = np.array([[[[p[0, 0, i, j] > 0.7 for j in range(32)] for i in range(32)]]])
    np.testing.assert_array_equal(mask, ref)


def _checkerboard(shape):
    return (np.indices(shape).sum(axis=0) % 2).astype(bool)


def test_masked_losses_restrictions():
    g = np.random.default_rng(3)
    logits = g.normal(size=(2, 3, 4, 4))
    labels = g.integers(0, 3, size=(2, 4, 4))
    full = np.ones((2, 4, 4), bool)
    assert L.masked_ce(t64(logits), labels, full, NO_OHEM).item() == pytest.approx(
        L.cross_entropy(t64(logits), labels, NO_OHEM).item(), abs=1e-12
    )
    assert L.masked_ce(t64(logits), labels, ~full).item() == 0.0
    teacher = probs(g.normal(size=(2, 3, 4, 4)))
    assert L.masked_kd(t64(logits), t64(teacher), full).item() == pytest.approx(
        L.soft_target_ce(t64(logits), t64(teacher)).item(), abs=1e-12
    )
    assert L.masked_kd(t64(logits), t64(teacher), ~full).item() == 0.0
    cb = _checkerboard((2, 4, 4))
    assert L.masked_ce(t64(logits), labels, cb).item() == pytest.approx(ce_oracle(logits, labels, cb), abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_masked_losses_match_oracles_32x32(seed):
    g = np.random.default_rng(100 + seed)
    K = 4
    logits = g.normal(scale=2, size=(1, K, 32, 32))
    labels = random_labels(seed, K=K).astype(np.int64)[None]
    teacher = probs(g.normal(size=(1, K, 32, 32)))
    p_b = g.random((1, 1, 32, 32))
    mask = L.boundary_mask(p_b, 0.7)[:, 0]
    sel = mask & (labels != 255)
    assert L.masked_ce(t64(logits), labels, mask).item() == pytest.approx(ce_oracle(logits, labels, sel), rel=1e-12)
    assert L.masked_kd(t64(logits), t64(teacher), mask).item() == pytest.approx(kd_oracle(logits, teacher, mask), rel=1e-12)
    y = (g.random((1, 1, 32, 32)) < 0.3).astype(np.float64)
    assert L.binary_ce(t64(p_b), y, mask[:, None]).item() == pytest.approx(bce_oracle(p_b, y, mask[:, None]), rel=1e-12)
    soft = g.random((1, 1, 32, 32))
    assert L.masked_binary_kd(t64(p_b), t64(soft)).item() == pytest.approx(
        bce_oracle(p_b, soft, np.ones_like(p_b, bool)), rel=1e-12
    )


def test_empty_mask_gives_zero_gradient():
    x = t64(np.random.default_rng(0).normal(size=(1, 3, 2, 2)), grad=True)
    loss = L.masked_ce(x, np.zeros((1, 2, 2), int), np.zeros((1, 2, 2), bool))
    backward(loss)
    assert loss.item() == 0.0 and not x.grad.any()


# ---------------------------------------------------------------------------
# boundary ground truth
# ---------------------------------------------------------------------------


def test_boundary_gt_single_class():
    assert not L.boundary_gt(np.full((8, 8), 2)).any()


def test_boundary_gt_vertical_split():
    lab = np.zeros((10, 20), dtype=np.uint8)
    c = 9
    lab[:, c:] = 1
    b = L.boundary_gt(lab, 3)[0]
    cols = np.flatnonzero(b.any(axis=0))
    np.testing.assert_array_equal(cols, np.arange(c - 3, c + 3))
    assert (b[:, c - 3 : c + 3] == 1).all()


@pytest.mark.parametrize("seed", range(10))
def test_boundary_gt_matches_oracle(seed):
    lab = random_labels(seed)
    np.testing.assert_array_equal(L.boundary_gt(lab, 3)[0], boundary_oracle(lab, 3, 255))


@pytest.mark.parametrize("radius", [1, 2, 4])
def test_boundary_gt_other_radii(radius):
    lab = random_labels(50 + radius, size=16)
    np.testing.assert_array_equal(L.boundary_gt(lab, radius)[0], boundary_oracle(lab, radius, 255))


def test_boundary_gt_batch_shape_and_ignore():
    lab = np.stack([random_labels(1, 16), random_labels(2, 16)])
    out = L.boundary_gt(lab)
    assert out.shape == (2, 1, 16, 16) and out.dtype == np.uint8
    assert not out[:, 0][lab == 255].any()


@given(st.integers(0, 10_000))
def test_boundary_gt_relabel_invariant(seed):
    lab = random_labels(seed, size=16, K=4)
    perm = np.random.default_rng(seed).permutation(4)
    relabeled = np.where(lab == 255, 255, perm[np.minimum(lab, 3)])
    np.testing.assert_array_equal(L.boundary_gt(lab), L.boundary_gt(relabeled))


# ---------------------------------------------------------------------------
# combination
# ---------------------------------------------------------------------------


def _gt_terms(g, K=3, B=2, S=8):
    logits = t64(g.normal(size=(B, K, S, S)), grad=True)
    p_b = T.sigmoid(t64(g.normal(size=(B, 1, S, S)), grad=True))
    labels = g.integers(0, K, size=(B, S, S))
    bnd = L.boundary_gt(labels, 1)
    return WidthTerms(logits, p_b, labels, bnd)


def test_single_width_total():
    g = np.random.default_rng(0)
    terms = _gt_terms(g)
    cfg = LossConfig()
    rep = L.combine_losses({0: terms}, cfg)
    ce = L.cross_entropy(terms.seg_logits, terms.labels, cfg).item()
    bce = L.binary_ce(terms.boundary_prob, terms.boundary).item()
    mask = L.boundary_mask(terms.boundary_prob, cfg.tau)
    g_ce = L.masked_ce(terms.seg_logits, terms.labels, mask, cfg).item()
    assert rep.total.item() == pytest.approx(ce + 10 * bce + g_ce, rel=1e-12)
    assert rep.per_width[0]["L_seg"] == ce


def test_zero_weights_give_seg_only():
    g = np.random.default_rng(1)
    terms = _gt_terms(g)
    cfg = LossConfig(lambda1=0, lambda2=0)
    rep = L.combine_losses({0: terms}, cfg)
    assert rep.total.item() == L.cross_entropy(terms.seg_logits, terms.labels, cfg).item()
    assert rep.b == 0 and rep.g == 0


def test_kd_equals_teacher_entropy_when_student_matches():
    g = np.random.default_rng(2)
    top = _gt_terms(g)
    teacher = T.detach(T.softmax_channels(top.seg_logits))
    teacher_b = T.detach(top.boundary_prob)
    student = WidthTerms(
        t64(top.seg_logits.data, grad=True),
        t64(top.boundary_prob.data, grad=True),
        teachers_seg=[teacher],
        teachers_b=[teacher_b],
    )
    rep = L.combine_losses({1: top, 0: student}, LossConfig())
    kd = rep.per_width[0]
    assert kd["L_seg"] == pytest.approx(L.entropy(teacher.data), abs=1e-7)
    pb = np.clip(teacher_b.data, L.PROB_EPS, 1 - L.PROB_EPS)
    bin_entropy = float(-(pb * np.log(pb) + (1 - pb) * np.log(1 - pb)).mean())
    assert kd["L_b"] == pytest.approx(bin_entropy, abs=1e-7)
    mask = L.boundary_mask(teacher_b.data, 0.7)[:, 0]
    if mask.any():
        masked_entropy = float((-(teacher.data * np.log(clip(teacher.data))).sum(axis=1))[mask].mean())
        assert kd["L_g"] == pytest.approx(masked_entropy, abs=1e-7)


def test_missing_teacher_errors():
    g = np.random.default_rng(3)
    with pytest.raises(ValueError, match="teacher"):
        L.combine_losses({1: _gt_terms(g), 0: WidthTerms(t64(g.normal(size=(2, 3, 8, 8))))})


def test_no_gradient_reaches_teacher():
    g = np.random.default_rng(4)
    top = _gt_terms(g)
    t_src = t64(g.normal(size=(2, 3, 8, 8)), grad=True)
    teacher = T.detach(T.softmax_channels(t_src))
    student = WidthTerms(t64(g.normal(size=(2, 3, 8, 8)), grad=True), teachers_seg=[teacher])
    rep = L.combine_losses({1: top, 0: student}, LossConfig(lambda1=0))
    backward(rep.total)
    assert t_src.grad is None and teacher.grad is None
    assert student.seg_logits.grad is not None


def test_ground_truth_mask_source():
    g = np.random.default_rng(5)
    terms = _gt_terms(g)
    cfg = LossConfig(lambda1=0, mask_source="ground_truth")
    rep = L.combine_losses({0: WidthTerms(terms.seg_logits, None, terms.labels, terms.boundary)}, cfg)
    expected = L.masked_ce(terms.seg_logits, terms.labels, terms.boundary[:, 0], cfg).item()
    assert rep.per_width[0]["L_g"] == pytest.approx(expected, rel=1e-12)


@given(st.integers(0, 10_000))
def test_losses_nonnegative_and_finite(seed):
    g = np.random.default_rng(seed)
    terms = _gt_terms(g, S=4)
    terms.seg_logits = t64(g.normal(scale=50, size=terms.seg_logits.shape))
    rep = L.combine_losses({0: terms})
    for v in rep.per_width[0].values():
        assert math.isfinite(v) and v >= 0


def test_loss_config_validation():
    for kwargs in [dict(lambda1=-1), dict(tau=1.0), dict(tau=0.0), dict(boundary_radius=0), dict(mask_source="x")]:
        with pytest.raises(ValueError):
            LossConfig(**kwargs)


# ---------------------------------------------------------------------------
# gradient checks of the full objective (20 random instances)
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(20))
def test_grad_full_objective(seed):
    g = np.random.default_rng(seed)
    K, B, S = 3, 1, 4
    labels = g.integers(0, K, size=(B, S, S))
    labels[0, 0, 0] = 255
    bnd = L.boundary_gt(labels, 1)
    # fixed teachers: the detached branch is a constant for both analytic and numeric paths
    teacher = t64(probs(g.normal(size=(B, K, S, S))))
    teacher_b = t64(g.uniform(0.05, 0.95, size=(B, 1, S, S)))
    z0 = g.normal(size=(B, 2 * K + 2, S, S))
    # keep boundary probabilities clear of the mask threshold
    for c in (2 * K, 2 * K + 1):
        z0[:, c] = np.where(np.abs(T.sigmoid(t64(z0[:, c])).data - 0.7) < 0.02, 2.5, z0[:, c])
    cfg = LossConfig(ohem=OhemConfig(keep_threshold=1.01))

    def objective(z):
        top = WidthTerms(z[:, :K], T.sigmoid(z[:, 2 * K : 2 * K + 1]), labels, bnd)
        low = WidthTerms(z[:, K : 2 * K], T.sigmoid(z[:, 2 * K + 1 :]), teachers_seg=[teacher], teachers_b=[teacher_b])
        return L.combine_losses({1: top, 0: low}, cfg).total

    assert grad_check(objective, t64(z0)).passed
