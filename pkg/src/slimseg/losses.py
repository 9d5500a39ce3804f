"""Segmentation, distillation and boundary losses.

Every pixel-averaged loss is a weighted sum of per-pixel terms: a constant
weight map carries pixel selection (ignore labels, OHEM, boundary masks) and
the ``1 / |selected|`` normalisation, so restricting a loss to a mask is the
same code path as the unrestricted loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, clamp, log, mul, scale, softmax_channels

__all__ = [
    "OhemConfig",
    "LossConfig",
    "PROB_EPS",
    "cross_entropy",
    "soft_target_ce",
    "binary_ce",
    "boundary_mask",
    "masked_ce",
    "masked_kd",
    "masked_binary_kd",
    "boundary_gt",
    "entropy",
    "ohem_selection",
    "WidthTerms",
    "LossReport",
    "combine_losses",
]

PROB_EPS = 1e-7


@dataclass(frozen=True)
class OhemConfig:
    keep_threshold: float = 0.7
    min_kept_fraction: float = 1.0 / 16


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 10.0
    lambda2: float = 1.0
    tau: float = 0.7
    boundary_radius: int = 3
    ignore_index: int = 255
    ohem: OhemConfig | None = field(default_factory=OhemConfig)
    # "predicted" thresholds the boundary head; "ground_truth" masks with y_b
    # (the variant used when the boundary head is not trained)
    mask_source: str = "predicted"

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0 < self.tau < 1:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if self.boundary_radius < 1:
            raise ValueError("boundary_radius must be at least 1")
        if self.mask_source not in ("predicted", "ground_truth"):
            raise ValueError(f"unknown mask_source {self.mask_source!r}")


def _labels_array(labels) -> np.ndarray:
    return labels.data if isinstance(labels, Tensor) else np.asarray(labels)


def _check_labels(labels: np.ndarray, num_classes: int, ignore_index: int) -> np.ndarray:
    labels = labels.astype(np.int64, copy=False)
    valid = labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= num_classes))
    if bad.any():
        raise ValueError(f"label {int(labels[bad][0])} out of range for {num_classes} classes")
    return valid


def _log_probs(logits: Tensor) -> Tensor:
    return log(clamp(softmax_channels(logits), PROB_EPS, 1.0 - PROB_EPS))


def _weighted_sum(terms: Tensor, weights: np.ndarray) -> Tensor:
    return mul(terms, Tensor._wrap(weights.astype(terms.dtype, copy=False))).sum()


def _zero_like(x: Tensor) -> Tensor:
    # keeps the graph connected so callers always get a differentiable scalar
    return scale(x.sum(), 0.0)


def ohem_selection(true_prob: np.ndarray, valid: np.ndarray, ohem: OhemConfig) -> np.ndarray:
    """Pixels kept by online hard example mining.

    Valid pixels whose true-class probability is below ``keep_threshold`` are
    kept; when that leaves fewer than ``min_kept_fraction`` of the valid
    pixels, the lowest-probability valid pixels fill the quota instead.
    """
    n_valid = int(valid.sum())
    if n_valid == 0:
        return valid.copy()
    hard = valid & (true_prob < ohem.keep_threshold)
    min_kept = max(1, int(math.floor(ohem.min_kept_fraction * n_valid)))
    if hard.sum() >= min_kept:
        return hard
    flat_valid = np.flatnonzero(valid)
    order = np.argsort(true_prob.reshape(-1)[flat_valid], kind="stable")
    keep = np.zeros(valid.size, dtype=bool)
    keep[flat_valid[order[:min_kept]]] = True
    return keep.reshape(valid.shape)


def _ce_terms(logits: Tensor, labels: np.ndarray, selected: np.ndarray):
    onehot = np.zeros(logits.shape, dtype=bool)
    safe = np.where(selected, labels, 0).astype(np.int64)
    np.put_along_axis(onehot, safe[:, None], True, axis=1)
    onehot &= selected[:, None]
    return _log_probs(logits), onehot


def cross_entropy(logits: Tensor, labels, cfg: LossConfig = LossConfig(), use_ohem: bool = True) -> Tensor:
    """Hard-label cross-entropy averaged over contributing pixels."""
    labels = _labels_array(labels)
    valid = _check_labels(labels, logits.shape[1], cfg.ignore_index)
    if use_ohem and cfg.ohem is not None and valid.any():
        probs = softmax_channels(logits).data
        safe = np.where(valid, labels, 0).astype(np.int64)
        true_prob = np.take_along_axis(probs, safe[:, None], axis=1)[:, 0]
        valid = ohem_selection(true_prob, valid, cfg.ohem)
    return _masked_ce(logits, labels, valid)


def _masked_ce(logits: Tensor, labels: np.ndarray, selected: np.ndarray) -> Tensor:
    count = int(selected.sum())
    if count == 0:
        return _zero_like(logits)
    logp, onehot = _ce_terms(logits, labels, selected)
    return _weighted_sum(logp, onehot * (-1.0 / count))


def soft_target_ce(student_logits: Tensor, teacher_probs: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Mean over pixels of -sum_k teacher_k * log softmax(student)_k (temperature 1)."""
    t = teacher_probs.data
    if t.shape != student_logits.shape:
        raise ValueError(f"teacher shape {t.shape} does not match student {student_logits.shape}")
    if np.abs(t.sum(axis=1) - 1.0).max() > 1e-4:
        raise ValueError("teacher probabilities must sum to 1 at every pixel")
    B, K, H, W = student_logits.shape
    selected = np.ones((B, H, W), dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(B, H, W)
    count = int(selected.sum())
    if count == 0:
        return _zero_like(student_logits)
    weights = t * selected[:, None] * (-1.0 / count)
    return _weighted_sum(_log_probs(student_logits), weights)


def entropy(probs: np.ndarray) -> float:
    """Mean per-pixel entropy of a [B, K, H, W] probability map."""
    p = np.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    return float((-(probs * np.log(p)).sum(axis=1)).mean())


def binary_ce(p_b: Tensor, y_b, mask: np.ndarray | None = None) -> Tensor:
    """Mean of -[y log p + (1 - y) log(1 - p)] with p clamped to [1e-7, 1 - 1e-7].

    ``y_b`` may be hard {0, 1} labels or soft teacher probabilities.
    """
    y = _labels_array(y_b).astype(p_b.dtype, copy=False)
    if y.shape != p_b.shape:
        raise ValueError(f"boundary target shape {y.shape} does not match prediction {p_b.shape}")
    selected = np.ones(p_b.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(p_b.shape)
    count = int(selected.sum())
    if count == 0:
        return _zero_like(p_b)
    p = clamp(p_b, PROB_EPS, 1.0 - PROB_EPS)
    log_p = log(p)
    log_q = log(1.0 - p)
    w = -1.0 / count
    return _weighted_sum(log_p, y * selected * w) + _weighted_sum(log_q, (1.0 - y) * selected * w)


def boundary_mask(p_b, tau: float) -> np.ndarray:
    """Valid pixels of the boundary-guided loss: strictly ``p_b > tau``."""
    return _labels_array(p_b) > tau


def masked_ce(logits: Tensor, labels, mask, cfg: LossConfig = LossConfig()) -> Tensor:
    """Cross-entropy restricted to mask-valid, non-ignored pixels (no OHEM)."""
    labels = _labels_array(labels)
    valid = _check_labels(labels, logits.shape[1], cfg.ignore_index)
    m = np.asarray(mask, dtype=bool).reshape(valid.shape)
    return _masked_ce(logits, labels, valid & m)


def masked_kd(student_logits: Tensor, teacher_probs: Tensor, mask) -> Tensor:
    """Soft-target cross-entropy over the student's mask-valid pixels only."""
    return soft_target_ce(student_logits, teacher_probs, mask)


def masked_binary_kd(p_b: Tensor, teacher_b: Tensor, mask=None) -> Tensor:
    return binary_ce(p_b, teacher_b, mask)


# ---------------------------------------------------------------------------
# boundary ground truth
# ---------------------------------------------------------------------------


def _disk_offsets(radius: int) -> list[tuple[int, int]]:
    r = int(radius)
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if (dy or dx) and dy * dy + dx * dx <= r * r]


def boundary_gt(labels, radius: int = 3, ignore_index: int = 255) -> np.ndarray:
    """Pixels within Euclidean distance ``radius`` of a differently labelled pixel.

    Accepts [H, W] or [B, H, W] label maps and returns uint8 maps of shape
    [B, 1, H, W] (or [1, H, W] for a single map).  Ignore-labelled pixels are
    never marked and never count as a different label.
    """
    if radius < 1:
        raise ValueError("radius must be at least 1")
    lab = _labels_array(labels).astype(np.int64)
    single = lab.ndim == 2
    if single:
        lab = lab[None]
    B, H, W = lab.shape
    r = int(radius)
    pad = np.pad(lab, ((0, 0), (r, r), (r, r)), constant_values=ignore_index)
    valid = lab != ignore_index
    out = np.zeros((B, H, W), dtype=bool)
    for dy, dx in _disk_offsets(r):
        nb = pad[:, r + dy : r + dy + H, r + dx : r + dx + W]
        out |= (nb != lab) & (nb != ignore_index)
    out &= valid
    out = out.astype(np.uint8)
    return out[0][None] if single else out[:, None]


# ---------------------------------------------------------------------------
# combination
# ---------------------------------------------------------------------------


@dataclass
class WidthTerms:
    """Per-width loss inputs for one training step.

    The largest width carries ground truth (``labels``, ``boundary``); the
    others carry detached teacher maps.  ``teachers_seg`` / ``teachers_b``
    are lists: one entry for every strategy except ``larger``, whose losses
    are averaged over all listed teachers.
    """

    seg_logits: Tensor
    boundary_prob: Tensor | None = None
    labels: np.ndarray | None = None
    boundary: np.ndarray | None = None
    teachers_seg: list[Tensor] | None = None
    teachers_b: list[Tensor] | None = None


@dataclass
class LossReport:
    total: Tensor
    seg: float = 0.0
    b: float = 0.0
    g: float = 0.0
    per_width: dict[int, dict[str, float]] = field(default_factory=dict)


def _guided_mask(terms: WidthTerms, cfg: LossConfig, gt_boundary: np.ndarray | None) -> np.ndarray | None:
    if cfg.mask_source == "ground_truth":
        if gt_boundary is None:
            raise ValueError("ground-truth masking needs boundary labels")
        return gt_boundary.astype(bool)
    if terms.boundary_prob is None:
        return None
    return boundary_mask(terms.boundary_prob, cfg.tau)


def width_loss(
    terms: WidthTerms,
    is_largest: bool,
    cfg: LossConfig,
    gt_boundary: np.ndarray | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Weighted loss of one width: seg + lambda1 * boundary + lambda2 * guided."""
    use_b = cfg.lambda1 > 0 and terms.boundary_prob is not None
    use_g = cfg.lambda2 > 0
    mask = _guided_mask(terms, cfg, gt_boundary) if use_g else None
    if is_largest:
        if terms.labels is None:
            raise ValueError("the largest width needs ground-truth labels")
        l_seg = cross_entropy(terms.seg_logits, terms.labels, cfg)
        l_b = binary_ce(terms.boundary_prob, terms.boundary) if use_b else None
        l_g = masked_ce(terms.seg_logits, terms.labels, mask, cfg) if use_g and mask is not None else None
    else:
        if not terms.teachers_seg:
            raise ValueError("a non-largest width needs a detached teacher")
        k = len(terms.teachers_seg)
        l_seg = _mean([soft_target_ce(terms.seg_logits, t) for t in terms.teachers_seg])
        l_b = None
        if use_b:
            if not terms.teachers_b or len(terms.teachers_b) != k:
                raise ValueError("boundary distillation needs a detached boundary teacher")
            l_b = _mean([binary_ce(terms.boundary_prob, t) for t in terms.teachers_b])
        l_g = None
        if use_g and mask is not None:
            l_g = _mean([masked_kd(terms.seg_logits, t, mask) for t in terms.teachers_seg])
    total = l_seg
    parts = {"L_seg": l_seg.item(), "L_b": 0.0, "L_g": 0.0}
    if l_b is not None:
        total = total + scale(l_b, cfg.lambda1)
        parts["L_b"] = l_b.item()
    if l_g is not None:
        total = total + scale(l_g, cfg.lambda2)
        parts["L_g"] = l_g.item()
    parts["total"] = total.item()
    return total, parts


def _mean(losses: list[Tensor]) -> Tensor:
    out = losses[0]
    for extra in losses[1:]:
        out = out + extra
    return out if len(losses) == 1 else scale(out, 1.0 / len(losses))


def combine_losses(per_width: dict[int, WidthTerms], cfg: LossConfig = LossConfig()) -> LossReport:
    """Full objective summed over widths, with the per-term breakdown.

    ``per_width`` maps width index to its terms; the highest index is the
    full-width network supervised by ground truth.
    """
    if not per_width:
        raise ValueError("no widths given")
    top = max(per_width)
    gt_boundary = per_width[top].boundary
    total = None
    report = LossReport(total=None)  # type: ignore[arg-type]
    for n in sorted(per_width, reverse=True):
        loss, parts = width_loss(per_width[n], n == top, cfg, gt_boundary)
        total = loss if total is None else total + loss
        report.per_width[n] = parts
        report.seg += parts["L_seg"]
        report.b += parts["L_b"]
        report.g += parts["L_g"]
    report.total = total
    return report
