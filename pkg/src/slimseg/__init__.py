"""Slimmable semantic segmentation on a small numpy autodiff core."""

from .segnet import (
    SegNetConfig,
    SlimSegModel,
    build,
    count_flops,
    count_params,
    forward,
    load_checkpoint,
    save_checkpoint,
    strip_boundary_head,
)
from .slim import WidthList
from .tensor import Tensor, backward, grad_check, no_grad

__all__ = [
    "SegNetConfig",
    "SlimSegModel",
    "Tensor",
    "WidthList",
    "backward",
    "build",
    "count_flops",
    "count_params",
    "forward",
    "grad_check",
    "load_checkpoint",
    "no_grad",
    "save_checkpoint",
    "strip_boundary_head",
]

__version__ = "0.1.0"
