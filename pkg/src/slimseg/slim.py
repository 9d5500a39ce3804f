"""Width-switchable layers sharing one set of nested parameters.

Width indices are 0-based positions in a :class:`WidthList`; index ``N - 1``
is always the full network.
"""

from __future__ import annotations

import math
from typing import Iterator, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, batch_norm2d, conv2d, relu

__all__ = [
    "WidthList",
    "Module",
    "SlimmableConv",
    "BNRecord",
    "SwitchableBatchNorm",
    "SlimmableUnit",
    "active_channels",
]


class WidthList(tuple):
    """Strictly increasing width multipliers in (0, 1] ending at exactly 1.0."""

    def __new__(cls, widths: Sequence[float] = (0.25, 0.5, 0.75, 1.0)):
        ws = tuple(float(w) for w in widths)
        if not ws:
            raise ValueError("width list must not be empty")
        if any(not 0.0 < w <= 1.0 for w in ws):
            raise ValueError(f"widths must lie in (0, 1], got {ws}")
        if any(b <= a for a, b in zip(ws, ws[1:])):
            raise ValueError(f"widths must be strictly increasing, got {ws}")
        if ws[-1] != 1.0:
            raise ValueError(f"the last width must be 1.0, got {ws[-1]}")
        return super().__new__(cls, ws)

    def index(self, width: float) -> int:  # type: ignore[override]
        for i, w in enumerate(self):
            if abs(w - width) < 1e-9:
                return i
        raise ValueError(f"width {width} not in width list {list(self)}")

    def descending(self) -> list[int]:
        return list(range(len(self) - 1, -1, -1))


def active_channels(width: float, full: int, fixed: bool = False) -> int:
    """Channels a layer of ``full`` channels uses at ``width`` (round half up, floor 1)."""
    if not 0.0 < width <= 1.0:
        raise ValueError(f"width must lie in (0, 1], got {width}")
    if full < 1:
        raise ValueError(f"full channel count must be positive, got {full}")
    if fixed:
        return full
    # the epsilon absorbs binary representation error, e.g. 0.35 * 10
    return max(1, math.floor(width * full + 0.5 + 1e-9))


class Module:
    """Attribute-order container of tensors and submodules."""

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_tensors(name + ".")
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, item in enumerate(value):
                    yield from item.named_tensors(f"{name}.{i}.")

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        return ((n, t) for n, t in self.named_tensors(prefix) if t.requires_grad)

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class SlimmableConv(Module):
    """Convolution whose width-``n`` kernel is the leading slice of one full kernel."""

    def __init__(
        self,
        in_channels_list: Sequence[int],
        out_channels_list: Sequence[int],
        kernel_size: int,
        stride: int = 1,
        padding: int | None = None,
        bias: bool = False,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ):
        if len(in_channels_list) != len(out_channels_list):
            raise ValueError("in/out channel lists must have one entry per width")
        self.in_channels_list = list(in_channels_list)
        self.out_channels_list = list(out_channels_list)
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        cin, cout = max(self.in_channels_list), max(self.out_channels_list)
        rng = rng if rng is not None else np.random.default_rng(0)
        std = math.sqrt(2.0 / (cin * kernel_size * kernel_size))
        w = rng.standard_normal((cout, cin, kernel_size, kernel_size)) * std
        self.kernel = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True) if bias else None

    @property
    def kernel_size(self) -> int:
        return self.kernel.shape[-1]

    @property
    def in_fixed(self) -> bool:
        return len(set(self.in_channels_list)) == 1

    @property
    def out_fixed(self) -> bool:
        return len(set(self.out_channels_list)) == 1

    def sliced(self, width_index: int) -> tuple[Tensor, Tensor | None]:
        cin = self.in_channels_list[width_index]
        cout = self.out_channels_list[width_index]
        kernel, bias = self.kernel, self.bias
        if (cout, cin) != kernel.shape[:2]:
            kernel = kernel[:cout, :cin]
        if bias is not None and cout != bias.shape[0]:
            bias = bias[:cout]
        return kernel, bias

    def forward(self, x: Tensor, width_index: int, flops=None) -> Tensor:
        expected = self.in_channels_list[width_index]
        if x.shape[1] != expected:
            raise ShapeError(
                f"slimmable conv at width index {width_index} expects {expected} input channels, got {x.shape[1]}"
            )
        kernel, bias = self.sliced(width_index)
        out = conv2d(x, kernel, bias, stride=self.stride, padding=self.padding)
        if flops is not None:
            k = self.kernel_size
            flops.add(2 * out.shape[1] * expected * k * k * out.shape[2] * out.shape[3] * out.shape[0])
        return out

    def count_params(self, width_index: int) -> int:
        cin = self.in_channels_list[width_index]
        cout = self.out_channels_list[width_index]
        n = cout * cin * self.kernel_size**2
        return n + (cout if self.bias is not None else 0)


class BNRecord(Module):
    """Affine parameters and running statistics owned by one width."""

    def __init__(self, channels: int, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = Tensor(np.zeros(channels, dtype=dtype))
        self.running_var = Tensor(np.ones(channels, dtype=dtype))
        self.num_batches = Tensor(np.zeros(1, dtype=np.float64))

    @property
    def initialized(self) -> bool:
        return bool(self.num_batches.data[0] > 0)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


class SwitchableBatchNorm(Module):
    def __init__(self, channels_list: Sequence[int], momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.records = [BNRecord(c, dtype) for c in channels_list]
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor, width_index: int, mode: str = "train", flops=None) -> Tensor:
        rec = self.records[width_index]
        if x.shape[1] != rec.channels:
            raise ShapeError(
                f"switchable BN record {width_index} holds {rec.channels} channels, input has {x.shape[1]}"
            )
        out = batch_norm2d(
            x,
            rec.gamma,
            rec.beta,
            rec.running_mean,
            rec.running_var,
            mode=mode,
            momentum=self.momentum,
            eps=self.eps,
            initialized=rec.initialized,
        )
        if mode == "train":
            rec.num_batches.data = rec.num_batches.data + 1
        if flops is not None:
            flops.add(2 * out.size)
        return out

    def count_params(self, width_index: int) -> int:
        return 2 * self.records[width_index].channels


class SlimmableUnit(Module):
    """conv -> switchable BN -> ReLU."""

    def __init__(
        self,
        in_channels_list: Sequence[int],
        out_channels_list: Sequence[int],
        kernel_size: int = 3,
        stride: int = 1,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ):
        self.conv = SlimmableConv(in_channels_list, out_channels_list, kernel_size, stride, rng=rng, dtype=dtype)
        self.bn = SwitchableBatchNorm(out_channels_list, dtype=dtype)

    def forward(self, x: Tensor, width_index: int, mode: str = "train", flops=None) -> Tensor:
        y = self.bn.forward(self.conv.forward(x, width_index, flops), width_index, mode, flops)
        out = relu(y)
        if flops is not None:
            flops.add(2 * out.size)
        return out

    def count_params(self, width_index: int) -> int:
        return self.conv.count_params(width_index) + self.bn.count_params(width_index)
