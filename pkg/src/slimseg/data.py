"""Synthetic shape segmentation data, augmentation and ``SLSD1`` sample files.

``SLSD1`` layout (little-endian): 5-byte magic ``SLSD1``, u32 version, u32 H,
u32 W, u32 K, then the float32 image (C, H, W) row-major and the uint8 label
map (H, W).  Version 2 is the labels-only variant written for predictions:
same header, no image payload.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .losses import boundary_gt

__all__ = [
    "IGNORE_INDEX",
    "SegmentationSample",
    "SynthConfig",
    "AugmentParams",
    "SampleFormatError",
    "synth_generate",
    "augment",
    "random_augment_params",
    "save_sample",
    "load_sample",
    "save_labels",
    "SynthDataset",
    "split_indices",
]

IGNORE_INDEX = 255
MAGIC = b"SLSD1"
VERSION_FULL = 1
VERSION_LABELS = 2
HEADER = struct.Struct("<5sIIII")

# background plus well separated class colours; extra classes cycle hues
_PALETTE = np.array(
    [
        [0.45, 0.45, 0.45],
        [0.90, 0.20, 0.20],
        [0.20, 0.80, 0.25],
        [0.20, 0.35, 0.90],
        [0.95, 0.85, 0.15],
        [0.80, 0.25, 0.85],
        [0.15, 0.85, 0.85],
        [0.95, 0.55, 0.10],
    ]
)


class SampleFormatError(ValueError):
    pass


@dataclass
class SegmentationSample:
    image: np.ndarray | None  # float32 [3, H, W] in [0, 1]
    labels: np.ndarray  # uint8 [H, W], IGNORE_INDEX for void
    boundary: np.ndarray  # uint8 [H, W] in {0, 1}
    num_classes: int = 5

    @classmethod
    def from_labels(cls, image, labels, num_classes: int, radius: int = 3) -> "SegmentationSample":
        labels = np.asarray(labels, dtype=np.uint8)
        return cls(image, labels, boundary_gt(labels, radius, IGNORE_INDEX)[0], num_classes)


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 5
    height: int = 64
    width: int = 64
    shapes_min: int = 2
    shapes_max: int = 5
    noise_std: float = 0.05
    seed: int = 0
    boundary_radius: int = 3

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.height % 16 or self.width % 16:
            raise ValueError(f"canvas must be divisible by 16, got {self.height}x{self.width}")
        if not 0 <= self.shapes_min <= self.shapes_max:
            raise ValueError("invalid shapes_per_image range")


def _class_colour(k: int) -> np.ndarray:
    return _PALETTE[k % len(_PALETTE)]


def _shape_mask(kind: int, rng: np.random.Generator, H: int, W: int) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W]
    lo, hi = max(4, min(H, W) // 10), max(6, min(H, W) // 3)
    if kind == 0:  # rectangle
        h, w = rng.integers(lo, hi + 1, size=2) * 2
        y0, x0 = rng.integers(-h // 4, H - h // 2), rng.integers(-w // 4, W - w // 2)
        return (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
    if kind == 1:  # disk
        r = rng.uniform(lo, hi)
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        return (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= r * r
    # triangle from three points around a centre, filled by half-plane tests
    cy, cx = rng.uniform(0, H), rng.uniform(0, W)
    r = rng.uniform(lo, hi) * 1.3
    ang = rng.uniform(0, 2 * np.pi) + np.array([0.0, 2.1, 4.2]) + rng.uniform(-0.3, 0.3, size=3)
    py, px = cy + r * np.sin(ang), cx + r * np.cos(ang)
    py_, px_ = yy + 0.5, xx + 0.5
    signs = []
    for i in range(3):
        j = (i + 1) % 3
        signs.append((px[j] - px[i]) * (py_ - py[i]) - (py[j] - py[i]) * (px_ - px[i]))
    s = np.stack(signs)
    return (s >= 0).all(axis=0) | (s <= 0).all(axis=0)


def synth_generate(cfg: SynthConfig, index: int, num_shapes: int | None = None) -> SegmentationSample:
    """Deterministic sample ``index`` of the synthetic set defined by ``cfg``."""
    rng = np.random.default_rng([cfg.seed, index])
    H, W, K = cfg.height, cfg.width, cfg.num_classes
    if num_shapes is None:
        num_shapes = int(rng.integers(cfg.shapes_min, cfg.shapes_max + 1))
    labels = np.zeros((H, W), dtype=np.uint8)
    image = np.empty((3, H, W))
    image[:] = (_class_colour(0) + rng.uniform(-0.1, 0.1, size=3))[:, None, None]
    classes = rng.permutation(np.arange(1, K))
    for i in range(num_shapes):
        # distinct classes while they last, then repeats
        k = int(classes[i]) if i < len(classes) else int(rng.integers(1, K))
        mask = _shape_mask(int(rng.integers(0, 3)), rng, H, W)
        colour = np.clip(_class_colour(k) + rng.uniform(-0.08, 0.08, size=3), 0, 1)
        labels[mask] = k
        image[:, mask] = colour[:, None]
    image += rng.normal(0.0, cfg.noise_std, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return SegmentationSample.from_labels(image, labels, K, cfg.boundary_radius)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentParams:
    flip: bool = False
    scale: float = 1.0
    crop_origin: tuple[int, int] = (0, 0)
    crop_size: tuple[int, int] | None = None


def _resize_bilinear(image: np.ndarray, h: int, w: int) -> np.ndarray:
    from .tensor import _bilinear_matrix

    H, W = image.shape[-2:]
    if (H, W) == (h, w):
        return image.copy()
    rows = _bilinear_matrix(H, h, "<f8")
    cols = _bilinear_matrix(W, w, "<f8")
    return (rows @ image.astype(np.float64) @ cols.T).astype(image.dtype)


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    return np.minimum(((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64), n_in - 1)


def augment(sample: SegmentationSample, params: AugmentParams, radius: int = 3) -> SegmentationSample:
    """Scale, flip and crop image and labels identically; recompute the boundary.

    Images resize bilinearly and labels by nearest neighbour.  Crop regions
    outside the scaled canvas get image 0 and the ignore label.
    """
    labels = sample.labels
    image = sample.image
    H, W = labels.shape
    sh, sw = max(1, int(round(H * params.scale))), max(1, int(round(W * params.scale)))
    if (sh, sw) != (H, W):
        labels = labels[_nearest_index(H, sh)][:, _nearest_index(W, sw)]
        if image is not None:
            image = _resize_bilinear(image, sh, sw)
    if params.flip:
        labels = labels[:, ::-1]
        if image is not None:
            image = image[:, :, ::-1]
    ch, cw = params.crop_size if params.crop_size is not None else (H, W)
    oy, ox = params.crop_origin
    out_labels = np.full((ch, cw), IGNORE_INDEX, dtype=np.uint8)
    out_image = None if image is None else np.zeros((image.shape[0], ch, cw), dtype=image.dtype)
    y0, y1 = max(oy, 0), min(oy + ch, sh)
    x0, x1 = max(ox, 0), min(ox + cw, sw)
    if y1 > y0 and x1 > x0:
        out_labels[y0 - oy : y1 - oy, x0 - ox : x1 - ox] = labels[y0:y1, x0:x1]
        if out_image is not None:
            out_image[:, y0 - oy : y1 - oy, x0 - ox : x1 - ox] = image[:, y0:y1, x0:x1]
    return SegmentationSample.from_labels(out_image, out_labels, sample.num_classes, radius)


def random_augment_params(
    rng: np.random.Generator, shape: tuple[int, int], scale_range=(0.5, 2.0)
) -> AugmentParams:
    """Random flip, scale in ``scale_range`` and a crop of the original size."""
    H, W = shape
    flip = bool(rng.integers(0, 2))
    s = float(rng.uniform(*scale_range))
    sh, sw = max(1, int(round(H * s))), max(1, int(round(W * s)))
    oy = int(rng.integers(0, sh - H + 1)) if sh > H else 0
    ox = int(rng.integers(0, sw - W + 1)) if sw > W else 0
    return AugmentParams(flip=flip, scale=s, crop_origin=(oy, ox), crop_size=(H, W))


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def _encode(sample: SegmentationSample, version: int) -> bytes:
    H, W = sample.labels.shape
    head = HEADER.pack(MAGIC, version, H, W, sample.num_classes)
    body = b""
    if version == VERSION_FULL:
        body = np.ascontiguousarray(sample.image, dtype="<f4").tobytes()
    return head + body + np.ascontiguousarray(sample.labels, dtype=np.uint8).tobytes()


def save_sample(sample: SegmentationSample, path: str | Path) -> None:
    if sample.image is None:
        raise ValueError("sample has no image; use save_labels")
    Path(path).write_bytes(_encode(sample, VERSION_FULL))


def save_labels(labels: np.ndarray, num_classes: int, path: str | Path) -> None:
    sample = SegmentationSample(None, np.asarray(labels, dtype=np.uint8), np.zeros_like(labels, np.uint8), num_classes)
    Path(path).write_bytes(_encode(sample, VERSION_LABELS))


def load_sample(path: str | Path, radius: int = 3) -> SegmentationSample:
    buf = Path(path).read_bytes()
    if len(buf) < HEADER.size:
        raise SampleFormatError(f"{path}: truncated header")
    magic, version, H, W, K = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise SampleFormatError(f"{path}: bad magic {magic!r}")
    if version not in (VERSION_FULL, VERSION_LABELS):
        raise SampleFormatError(f"{path}: unsupported version {version}")
    img_bytes = 4 * 3 * H * W if version == VERSION_FULL else 0
    expected = HEADER.size + img_bytes + H * W
    if len(buf) != expected:
        raise SampleFormatError(f"{path}: expected {expected} bytes, found {len(buf)}")
    image = None
    if img_bytes:
        image = np.frombuffer(buf, dtype="<f4", count=3 * H * W, offset=HEADER.size).reshape(3, H, W).astype(np.float32)
    labels = np.frombuffer(buf, dtype=np.uint8, count=H * W, offset=HEADER.size + img_bytes).reshape(H, W).copy()
    return SegmentationSample.from_labels(image, labels, K, radius)


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------


def split_indices(n_train: int, n_val: int) -> tuple[range, range]:
    """Disjoint train/val index ranges of the generator stream."""
    return range(0, n_train), range(n_train, n_train + n_val)


@dataclass
class SynthDataset:
    """A materialised slice of the synthetic stream, stacked into arrays."""

    cfg: SynthConfig
    indices: range
    images: np.ndarray = field(init=False, repr=False)
    labels: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        samples = [synth_generate(self.cfg, i) for i in self.indices]
        self.images = np.stack([s.image for s in samples])
        self.labels = np.stack([s.labels for s in samples])

    def __len__(self) -> int:
        return len(self.indices)

    def sample(self, i: int) -> SegmentationSample:
        return SegmentationSample.from_labels(self.images[i], self.labels[i], self.cfg.num_classes, self.cfg.boundary_radius)

    def batches(self, batch_size: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        for start in range(0, len(self), batch_size):
            yield self.images[start : start + batch_size], self.labels[start : start + batch_size]
