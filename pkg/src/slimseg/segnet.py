"""Slimmable segmentation network: encoder, pyramid pooling, FPN-style decoder
and a removable boundary head on the 1/4-resolution stage features.

Checkpoints use the ``SLSCKPT1`` container: magic, u32 version, u32 tensor
count, then per tensor a u32 name length, UTF-8 name, u8 dtype code
(0 float32, 1 float64), u8 rank and u64 dims, all little-endian, followed by
the raw little-endian payloads in manifest order.
"""

from __future__ import annotations

import copy
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .slim import Module, SlimmableConv, SlimmableUnit, WidthList, active_channels
from .tensor import ShapeError, Tensor, adaptive_avg_pool, bilinear_upsample, concat, sigmoid, softmax_channels

__all__ = [
    "SegNetConfig",
    "SlimSegModel",
    "ForwardOutput",
    "FlopCounter",
    "build",
    "forward",
    "strip_boundary_head",
    "count_flops",
    "count_params",
    "flop_breakdown",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_bytes",
    "CheckpointError",
]

CKPT_MAGIC = b"SLSCKPT1"
CKPT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
STRIDE = 16


@dataclass(frozen=True)
class SegNetConfig:
    num_classes: int = 5
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    ppm_bins: tuple[int, ...] = (1, 2, 4)
    widths: WidthList = field(default_factory=WidthList)
    input_channels: int = 3
    decoder_channels: int = 32

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "ppm_bins", tuple(int(b) for b in self.ppm_bins))
        object.__setattr__(self, "widths", WidthList(self.widths))
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if len(self.stage_channels) != 4:
            raise ValueError("the encoder has exactly four stages (total stride 16)")
        if not self.ppm_bins or any(b <= a for a, b in zip(self.ppm_bins, self.ppm_bins[1:])):
            raise ValueError(f"ppm_bins must be non-empty and strictly increasing, got {self.ppm_bins}")


@dataclass
class ForwardOutput:
    seg_logits: Tensor
    seg_probs: Tensor
    boundary_prob: Tensor | None = None


class FlopCounter:
    """Tallies FLOPs during a forward pass, grouped by component."""

    def __init__(self):
        self.by_component: dict[str, int] = {}
        self.component = "encoder"

    def add(self, n: int) -> None:
        self.by_component[self.component] = self.by_component.get(self.component, 0) + int(n)

    @property
    def total(self) -> int:
        return sum(self.by_component.values())


def _channels(widths: WidthList, full: int, fixed: bool = False) -> list[int]:
    return [active_channels(w, full, fixed) for w in widths]


class SlimSegModel(Module):
    def __init__(self, config: SegNetConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        ws = config.widths
        prev = _channels(ws, config.input_channels, fixed=True)
        self.stages = []
        for c in config.stage_channels:
            cur = _channels(ws, c)
            stage = _Stage(prev, cur, rng)
            self.stages.append(stage)
            prev = cur
        top = _channels(ws, config.stage_channels[-1])
        dec = _channels(ws, config.decoder_channels)
        nb = len(config.ppm_bins)
        self.ppm_fuse = SlimmableUnit([c * (nb + 1) for c in top], dec, 3, rng=rng)
        self.laterals = [SlimmableUnit(_channels(ws, c), dec, 1, rng=rng) for c in config.stage_channels[:-1]]
        self.fuse = SlimmableUnit(dec, dec, 3, rng=rng)
        self.classifier = SlimmableConv(dec, [config.num_classes] * len(ws), 1, bias=True, rng=rng)
        low = _channels(ws, config.stage_channels[1])
        self.boundary_head: _BoundaryHead | None = _BoundaryHead(low, rng)

    @property
    def widths(self) -> WidthList:
        return self.config.widths

    @property
    def has_boundary_head(self) -> bool:
        return self.boundary_head is not None


class _Stage(Module):
    def __init__(self, cin: list[int], cout: list[int], rng):
        self.units = [SlimmableUnit(cin, cout, 3, 1, rng=rng), SlimmableUnit(cout, cout, 3, 2, rng=rng)]

    def forward(self, x, n, mode, flops=None):
        for unit in self.units:
            x = unit.forward(x, n, mode, flops)
        return x


class _BoundaryHead(Module):
    def __init__(self, channels: list[int], rng):
        self.unit = SlimmableUnit(channels, channels, 3, rng=rng)
        self.conv = SlimmableConv(channels, [1] * len(channels), 1, bias=True, rng=rng)


def build(config: SegNetConfig | None = None, seed: int = 0) -> SlimSegModel:
    """Fresh model with He-initialized kernels, gamma=1, beta=0."""
    return SlimSegModel(config if config is not None else SegNetConfig(), seed)


def _upsample(x: Tensor, h: int, w: int, flops) -> Tensor:
    out = bilinear_upsample(x, h, w)
    if flops is not None:
        flops.add(2 * out.size)
    return out


def forward(
    model: SlimSegModel,
    image: Tensor,
    width_index: int,
    mode: str = "train",
    with_boundary: bool = False,
    flops: FlopCounter | None = None,
) -> ForwardOutput:
    """Run the width-``width_index`` subnetwork on ``image`` [B, C, H, W]."""
    B, C, H, W = image.shape
    if H % STRIDE or W % STRIDE:
        raise ShapeError(f"input height and width must be divisible by {STRIDE}, got {H}x{W}")
    if min(H, W) // STRIDE < max(model.config.ppm_bins):
        need = STRIDE * max(model.config.ppm_bins)
        raise ShapeError(f"input must be at least {need}x{need} for pyramid bins {model.config.ppm_bins}, got {H}x{W}")
    if not 0 <= width_index < len(model.widths):
        raise IndexError(f"width index {width_index} out of range for {len(model.widths)} widths")
    if with_boundary and model.boundary_head is None:
        raise RuntimeError("boundary head has been stripped from this model")
    n = width_index
    if flops is not None:
        flops.component = "encoder"
    feats = []
    x = image
    for stage in model.stages:
        x = stage.forward(x, n, mode, flops)
        feats.append(x)

    if flops is not None:
        flops.component = "ppm"
    top = feats[-1]
    th, tw = top.shape[-2:]
    branches = [top]
    for b in model.config.ppm_bins:
        branches.append(_upsample(adaptive_avg_pool(top, b), th, tw, flops))
    y = model.ppm_fuse.forward(concat(branches, axis=1), n, mode, flops)

    if flops is not None:
        flops.component = "decoder"
    for lateral, feat in zip(reversed(model.laterals), reversed(feats[:-1])):
        fh, fw = feat.shape[-2:]
        y = lateral.forward(feat, n, mode, flops) + _upsample(y, fh, fw, flops)
    y = model.fuse.forward(y, n, mode, flops)
    logits = _upsample(model.classifier.forward(y, n, flops), H, W, flops)
    out = ForwardOutput(logits, softmax_channels(logits))

    if with_boundary:
        if flops is not None:
            flops.component = "boundary"
        head = model.boundary_head
        b = head.conv.forward(head.unit.forward(feats[1], n, mode, flops), n, flops)
        out.boundary_prob = sigmoid(_upsample(b, H, W, flops))
        if flops is not None:
            flops.add(2 * out.boundary_prob.size)
    return out


def strip_boundary_head(model: SlimSegModel) -> SlimSegModel:
    """Copy of ``model`` sharing every tensor except the dropped boundary head."""
    stripped = copy.copy(model)
    stripped.boundary_head = None
    return stripped


def _plan(model: SlimSegModel, n: int, H: int, W: int, with_boundary: bool) -> dict[str, int]:
    """Closed-form FLOPs per component at width index ``n`` for one H x W image."""
    parts = {"encoder": 0, "ppm": 0, "decoder": 0}

    def conv(layer: SlimmableConv, h: int, w: int) -> int:
        cin, cout = layer.in_channels_list[n], layer.out_channels_list[n]
        return 2 * cout * cin * layer.kernel_size**2 * h * w

    def unit(u: SlimmableUnit, h: int, w: int) -> int:
        # conv + BN + ReLU, elementwise ops at 2 FLOPs per output element
        return conv(u.conv, h, w) + 4 * u.conv.out_channels_list[n] * h * w

    h, w = H, W
    sizes = []
    for stage in model.stages:
        a, b = stage.units
        parts["encoder"] += unit(a, h, w)
        h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
        parts["encoder"] += unit(b, h, w)
        sizes.append((h, w))
    th, tw = sizes[-1]
    ctop = model.stages[-1].units[1].conv.out_channels_list[n]
    parts["ppm"] += 2 * ctop * th * tw * len(model.config.ppm_bins)
    parts["ppm"] += unit(model.ppm_fuse, th, tw)
    d = model.fuse.conv.out_channels_list[n]
    for lateral, (fh, fw) in zip(reversed(model.laterals), reversed(sizes[:-1])):
        parts["decoder"] += unit(lateral, fh, fw) + 2 * d * fh * fw
    fh, fw = sizes[0]
    parts["decoder"] += unit(model.fuse, fh, fw)
    parts["decoder"] += conv(model.classifier, fh, fw) + 2 * model.config.num_classes * H * W
    if with_boundary:
        bh, bw = sizes[1]
        head = model.boundary_head
        parts["boundary"] = unit(head.unit, bh, bw) + conv(head.conv, bh, bw) + 4 * H * W
    return parts


def flop_breakdown(model: SlimSegModel, width_index: int, input_hw: Sequence[int], with_boundary: bool = False):
    if with_boundary and model.boundary_head is None:
        raise RuntimeError("boundary head has been stripped from this model")
    H, W = input_hw
    return _plan(model, width_index, H, W, with_boundary)


def count_flops(model: SlimSegModel, width_index: int, input_hw: Sequence[int], with_boundary: bool = False) -> int:
    """Multiply-adds count 2 FLOPs; BN, ReLU and resampling count 2 per output element."""
    return sum(flop_breakdown(model, width_index, input_hw, with_boundary).values())


def count_params(model: SlimSegModel, width_index: int) -> int:
    """Parameters the width-``width_index`` subnetwork reads (kernel slices + its BN record)."""
    total = 0
    for stage in model.stages:
        total += sum(u.count_params(width_index) for u in stage.units)
    total += model.ppm_fuse.count_params(width_index)
    total += sum(u.count_params(width_index) for u in model.laterals)
    total += model.fuse.count_params(width_index)
    total += model.classifier.count_params(width_index)
    if model.boundary_head is not None:
        total += model.boundary_head.unit.count_params(width_index)
        total += model.boundary_head.conv.count_params(width_index)
    return total


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


class CheckpointError(ValueError):
    pass


def _meta(model: SlimSegModel) -> list[tuple[str, np.ndarray]]:
    cfg = model.config
    f64 = np.float64
    return [
        ("meta.num_classes", np.array([cfg.num_classes], f64)),
        ("meta.stage_channels", np.array(cfg.stage_channels, f64)),
        ("meta.ppm_bins", np.array(cfg.ppm_bins, f64)),
        ("meta.widths", np.array(cfg.widths, f64)),
        ("meta.input_channels", np.array([cfg.input_channels], f64)),
        ("meta.decoder_channels", np.array([cfg.decoder_channels], f64)),
    ]


def checkpoint_bytes(model: SlimSegModel) -> bytes:
    entries = _meta(model) + [(name, t.data) for name, t in model.named_tensors()]
    head = io.BytesIO()
    head.write(CKPT_MAGIC)
    head.write(struct.pack("<II", CKPT_VERSION, len(entries)))
    payload = io.BytesIO()
    for name, arr in entries:
        arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = name.encode("utf-8")
        head.write(struct.pack("<I", len(raw)))
        head.write(raw)
        head.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        head.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        payload.write(arr.tobytes(order="C"))
    return head.getvalue() + payload.getvalue()


def save_checkpoint(model: SlimSegModel, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    """Raw name -> array mapping in manifest order."""
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not an SLSCKPT1 checkpoint")
    try:
        version, count = struct.unpack_from("<II", buf, 8)
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        pos = 16
        manifest = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            code, rank = struct.unpack_from("<BB", buf, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            manifest.append((name, _CODE_DTYPES[code], dims))
        out = {}
        for name, dt, dims in manifest:
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(buf):
                raise CheckpointError(f"{path}: truncated payload for {name}")
            out[name] = np.frombuffer(buf, dtype=dt, count=int(np.prod(dims, dtype=np.int64)), offset=pos).reshape(dims).copy()
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc
    return out


def load_checkpoint(path: str | Path) -> SlimSegModel:
    arrays = read_checkpoint(path)
    try:
        cfg = SegNetConfig(
            num_classes=int(arrays["meta.num_classes"][0]),
            stage_channels=tuple(int(v) for v in arrays["meta.stage_channels"]),
            ppm_bins=tuple(int(v) for v in arrays["meta.ppm_bins"]),
            widths=WidthList(float(v) for v in arrays["meta.widths"]),
            input_channels=int(arrays["meta.input_channels"][0]),
            decoder_channels=int(arrays["meta.decoder_channels"][0]),
        )
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing model metadata {exc}") from exc
    model = build(cfg)
    if not any(name.startswith("boundary_head.") for name in arrays):
        model.boundary_head = None
    for name, t in model.named_tensors():
        if name not in arrays:
            raise CheckpointError(f"{path}: missing tensor {name}")
        if arrays[name].shape != t.shape:
            raise CheckpointError(f"{path}: tensor {name} has shape {arrays[name].shape}, expected {t.shape}")
        t.data = arrays[name].astype(t.dtype, copy=False)
    return model
