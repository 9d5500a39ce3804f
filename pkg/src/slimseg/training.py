"""Slimmable training: descending-width loop with in-place distillation.

Each step clears gradients, visits the widths from largest to smallest,
supervises the largest with ground truth and every other width with detached
predictions of larger widths, accumulates all gradients and applies a single
SGD update.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, TextIO

import numpy as np

from . import segnet
from .data import SynthDataset, augment, random_augment_params
from .evaluation import ConfusionMatrix, miou, update_confusion
from .losses import LossConfig, WidthTerms, boundary_gt, width_loss
from .segnet import SlimSegModel
from .slim import WidthList
from .tensor import Tensor, backward, detach, no_grad

__all__ = [
    "STRATEGIES",
    "TrainConfig",
    "OptimizerState",
    "TeacherCache",
    "StepReport",
    "NonFiniteLossError",
    "poly_lr",
    "teacher_target",
    "sgd_step",
    "train_step",
    "train_loop",
    "predict",
    "evaluate_widths",
    "log_header",
]

log = logging.getLogger(__name__)

STRATEGIES = ("prev", "largest", "mean", "larger")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 8
    base_lr: float = 0.01
    power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 5e-4
    widths: WidthList = field(default_factory=WidthList)
    teacher_strategy: str = "prev"
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    augment: bool = True
    val_every: int = 200

    def __post_init__(self):
        object.__setattr__(self, "widths", WidthList(self.widths))
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.base_lr < 0:
            raise ValueError("base_lr must be non-negative")
        if self.teacher_strategy not in STRATEGIES:
            raise ValueError(f"teacher_strategy must be one of {STRATEGIES}, got {self.teacher_strategy!r}")


class NonFiniteLossError(FloatingPointError):
    pass


def poly_lr(iteration: int, iter_max: int, base: float = 0.01, power: float = 0.9) -> float:
    if not 0 <= iteration <= iter_max:
        raise ValueError(f"iteration {iteration} outside [0, {iter_max}]")
    return base * (1.0 - iteration / iter_max) ** power


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """One momentum buffer per full parameter tensor, shared by all widths."""

    momentum: float = 0.9
    weight_decay: float = 5e-4
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    lr: float = 0.0
    steps: int = 0


def _decays(name: str) -> bool:
    return name.endswith(".kernel")


def sgd_step(model: SlimSegModel, opt: OptimizerState, lr: float) -> None:
    """``buf = m * buf + (g + wd * w)`` on kernels (no decay elsewhere), ``w -= lr * buf``."""
    opt.lr = lr
    for name, p in model.named_parameters():
        if p.grad is None:
            continue
        g = p.grad
        if opt.weight_decay and _decays(name):
            g = g + p.dtype.type(opt.weight_decay) * p.data
        buf = opt.buffers.get(name)
        buf = g.copy() if buf is None else p.dtype.type(opt.momentum) * buf + g
        opt.buffers[name] = buf
        if lr != 0.0:
            p.data = p.data - p.dtype.type(lr) * buf
    opt.steps += 1


# ---------------------------------------------------------------------------
# teachers
# ---------------------------------------------------------------------------


@dataclass
class TeacherCache:
    """Detached predictions of larger widths, kept only as long as needed."""

    strategy: str = "prev"
    num_widths: int = 4
    seg: dict[int, Tensor] = field(default_factory=dict)
    boundary: dict[int, Tensor | None] = field(default_factory=dict)
    held: set = field(default_factory=set)
    peak: int = 0

    def put(self, n: int, seg_probs: Tensor, boundary_prob: Tensor | None) -> None:
        self.seg[n] = detach(seg_probs)
        self.boundary[n] = detach(boundary_prob) if boundary_prob is not None else None
        self.held.add(n)
        top = self.num_widths - 1
        if self.strategy == "prev":
            keep = {n}
        elif self.strategy == "largest":
            keep = {top}
        else:
            keep = set(self.seg)
        for k in list(self.seg):
            if k not in keep:
                del self.seg[k]
                del self.boundary[k]
        self.peak = max(self.peak, len(self.seg))

    def clear(self) -> None:
        self.seg.clear()
        self.boundary.clear()
        self.held.clear()
        self.peak = 0


def _mean_probs(tensors: list[Tensor]) -> Tensor:
    acc = tensors[0].data.copy()
    for t in tensors[1:]:
        acc = acc + t.data
    return Tensor._wrap(acc / acc.dtype.type(len(tensors)))


def teacher_target(strategy: str, probs: dict[int, Tensor | None], n: int, N: int) -> list[Tensor]:
    """Teacher maps for student width index ``n`` (0-based) out of ``N``.

    ``larger`` returns every larger-width map; the caller averages the losses.
    The other strategies return a single map.
    """
    if not 0 <= n < N - 1:
        raise ValueError(f"width index {n} has no larger width among {N}")
    needed = {"prev": [n + 1], "largest": [N - 1]}.get(strategy, list(range(n + 1, N)))
    missing = [j for j in needed if probs.get(j) is None]
    if missing:
        raise KeyError(f"teacher for width index {missing[0]} is not cached")
    maps = [probs[j] for j in needed]
    if strategy == "mean":
        return [_mean_probs(maps)]
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown teacher strategy {strategy!r}")
    return maps


# ---------------------------------------------------------------------------
# one step
# ---------------------------------------------------------------------------


@dataclass
class StepReport:
    iteration: int
    lr: float
    per_width: dict[int, dict[str, float]]
    teachers_held: list[int]
    order: list[int]
    peak_teachers: int = 0


def _needs_boundary(cfg: TrainConfig) -> bool:
    lc = cfg.loss
    return lc.lambda1 > 0 or (lc.lambda2 > 0 and lc.mask_source == "predicted")


def train_step(
    model: SlimSegModel,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    opt: OptimizerState,
    iteration: int,
    boundaries: np.ndarray | None = None,
    step: bool = True,
) -> StepReport:
    """One iteration over all widths followed by one optimizer update."""
    if len(images) == 0:
        raise ValueError("empty batch")
    widths = model.widths
    N = len(widths)
    with_b = _needs_boundary(cfg) and model.has_boundary_head
    if boundaries is None:
        boundaries = boundary_gt(labels, cfg.loss.boundary_radius, cfg.loss.ignore_index)
    x = Tensor(images.astype(np.float32, copy=False))
    model.zero_grad()
    cache = TeacherCache(cfg.teacher_strategy, N)
    report = {}
    order = widths.descending()
    for n in order:
        out = segnet.forward(model, x, n, "train", with_boundary=with_b)
        terms = WidthTerms(out.seg_logits, out.boundary_prob)
        if n == N - 1:
            terms.labels, terms.boundary = labels, boundaries
        else:
            terms.teachers_seg = teacher_target(cfg.teacher_strategy, cache.seg, n, N)
            if with_b:
                terms.teachers_b = teacher_target(cfg.teacher_strategy, cache.boundary, n, N)
        loss, parts = width_loss(terms, n == N - 1, cfg.loss, boundaries)
        for term, value in parts.items():
            if not math.isfinite(value):
                raise NonFiniteLossError(f"non-finite {term} at width {widths[n]} (iteration {iteration})")
        if n > 0:
            cache.put(n, out.seg_probs, out.boundary_prob)
        backward(loss)
        report[n] = parts
    lr = poly_lr(iteration, cfg.iterations, cfg.base_lr, cfg.power)
    if step:
        sgd_step(model, opt, lr)
    return StepReport(iteration, lr, report, sorted(cache.held), order, cache.peak)


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------


def predict(model: SlimSegModel, images: np.ndarray, width_index: int, batch_size: int = 50) -> np.ndarray:
    """Arg-max label maps from an eval-mode forward pass."""
    preds = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            x = Tensor(images[start : start + batch_size].astype(np.float32, copy=False))
            out = segnet.forward(model, x, width_index, "eval")
            preds.append(out.seg_logits.data.argmax(axis=1).astype(np.uint8))
    return np.concatenate(preds)


def evaluate_widths(
    model: SlimSegModel, dataset: SynthDataset, width_indices=None, ignore_index: int = 255
) -> dict[int, tuple[float, np.ndarray, np.ndarray]]:
    """Width index -> (mIoU, per-class IoU, predictions) on ``dataset``."""
    if width_indices is None:
        width_indices = range(len(model.widths))
    out = {}
    for n in width_indices:
        preds = predict(model, dataset.images, n)
        cm = ConfusionMatrix(model.config.num_classes)
        for p, g in zip(preds, dataset.labels):
            cm = update_confusion(cm, p, g, ignore_index)
        score, ious = miou(cm)
        out[n] = (score, ious, preds)
    return out


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------


def _term_names(widths: WidthList, n: int) -> list[str]:
    tag = f"w{widths[n]:g}"
    if n == len(widths) - 1:
        return [f"{tag}.CE", f"{tag}.BCE", f"{tag}.CE_g", f"{tag}.total"]
    return [f"{tag}.KD", f"{tag}.KD_b", f"{tag}.KD_g", f"{tag}.total"]


def log_header(widths: WidthList) -> str:
    cols = ["iter", "lr"]
    for n in widths.descending():
        cols += _term_names(widths, n)
    return "\t".join(cols)


def _log_row(rep: StepReport) -> str:
    cols = [str(rep.iteration), repr(rep.lr)]
    for n in rep.order:
        p = rep.per_width[n]
        cols += [repr(p["L_seg"]), repr(p["L_b"]), repr(p["L_g"]), repr(p["total"])]
    return "\t".join(cols)


def _batch(dataset: SynthDataset, idx: np.ndarray, rng: np.random.Generator, cfg: TrainConfig):
    images, labels, bounds = [], [], []
    for i in idx:
        s = dataset.sample(int(i))
        if cfg.augment:
            s = augment(s, random_augment_params(rng, s.labels.shape), cfg.loss.boundary_radius)
        images.append(s.image)
        labels.append(s.labels)
        bounds.append(s.boundary)
    return np.stack(images), np.stack(labels), np.stack(bounds)[:, None]


@dataclass
class TrainResult:
    model: SlimSegModel
    losses: list[StepReport]
    validation: list[tuple[int, int, float]]  # (iteration, width index, mIoU)


def train_loop(
    model: SlimSegModel,
    dataset: SynthDataset,
    cfg: TrainConfig,
    val_dataset: SynthDataset | None = None,
    log_file: TextIO | None = None,
    val_file: TextIO | None = None,
    checkpoint_dir: Path | None = None,
    checkpoint_every: int = 0,
    on_step: Callable[[StepReport], None] | None = None,
) -> TrainResult:
    """Run ``cfg.iterations`` seeded steps; validate every ``cfg.val_every``."""
    if tuple(model.widths) != tuple(cfg.widths):
        raise ValueError(f"model widths {list(model.widths)} differ from config widths {list(cfg.widths)}")
    rng = np.random.default_rng(cfg.seed)
    opt = OptimizerState(cfg.momentum, cfg.weight_decay)
    history: list[StepReport] = []
    validation: list[tuple[int, int, float]] = []
    if log_file is not None:
        log_file.write(log_header(model.widths) + "\n")
    if val_file is not None:
        val_file.write("iter\twidth\tmIoU\n")
    order = np.empty(0, dtype=np.int64)
    pos = 0
    for it in range(cfg.iterations):
        if pos + cfg.batch_size > len(order):
            order = rng.permutation(len(dataset))
            pos = 0
        idx = order[pos : pos + cfg.batch_size]
        pos += cfg.batch_size
        images, labels, bounds = _batch(dataset, idx, rng, cfg)
        rep = train_step(model, images, labels, cfg, opt, it, bounds)
        history.append(rep)
        if log_file is not None:
            log_file.write(_log_row(rep) + "\n")
        if on_step is not None:
            on_step(rep)
        done = it + 1
        if val_dataset is not None and cfg.val_every and (done % cfg.val_every == 0 or done == cfg.iterations):
            for n, (score, _, _) in evaluate_widths(model, val_dataset, ignore_index=cfg.loss.ignore_index).items():
                validation.append((done, n, score))
                if val_file is not None:
                    val_file.write(f"{done}\t{model.widths[n]:g}\t{score!r}\n")
            log.info("iter %d val mIoU %s", done, [round(v[2], 4) for v in validation[-len(model.widths):]])
            for f in (log_file, val_file):
                if f is not None:
                    f.flush()
        if checkpoint_dir is not None and checkpoint_every and done % checkpoint_every == 0 and done != cfg.iterations:
            segnet.save_checkpoint(model, Path(checkpoint_dir) / f"ckpt_{done:06d}.slsckpt")
    return TrainResult(model, history, validation)
