"""Flat ``key=value`` run configuration with dotted keys.

Lines are ``section.name=value``; ``#`` starts a comment.  Unknown keys are
rejected.  Lists are comma separated, booleans are ``true``/``false``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .data import SynthConfig
from .losses import LossConfig, OhemConfig
from .segnet import SegNetConfig
from .slim import WidthList
from .training import TrainConfig

__all__ = ["ConfigError", "RunConfig", "parse_config", "load_config", "DEFAULTS"]


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, str] = {
    "train.iterations": "2000",
    "train.batch_size": "8",
    "train.base_lr": "0.01",
    "train.power": "0.9",
    "train.momentum": "0.9",
    "train.weight_decay": "0.0005",
    "train.widths": "0.25,0.5,0.75,1.0",
    "train.teacher_strategy": "prev",
    "train.seed": "0",
    "train.augment": "true",
    "train.val_every": "200",
    "train.checkpoint_every": "500",
    "model.stage_channels": "16,32,64,128",
    "model.ppm_bins": "1,2,4",
    "model.input_channels": "3",
    "model.decoder_channels": "32",
    "data.num_classes": "5",
    "data.height": "64",
    "data.width": "64",
    "data.shapes_min": "2",
    "data.shapes_max": "5",
    "data.noise_std": "0.05",
    "data.seed": "0",
    "data.n_train": "2000",
    "data.n_val": "200",
    "loss.lambda1": "10",
    "loss.lambda2": "1",
    "loss.tau": "0.7",
    "loss.boundary_radius": "3",
    "loss.ignore_index": "255",
    "loss.ohem": "true",
    "loss.ohem_keep_threshold": "0.7",
    "loss.ohem_min_kept_fraction": "0.0625",
    "loss.mask_source": "predicted",
    "run.out": "runs/default",
}


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ints(v: str) -> tuple[int, ...]:
    return tuple(int(p) for p in v.split(",") if p.strip())


def _floats(v: str) -> tuple[float, ...]:
    return tuple(float(p) for p in v.split(",") if p.strip())


@dataclass
class RunConfig:
    train: TrainConfig
    model: SegNetConfig
    data: SynthConfig
    n_train: int = 2000
    n_val: int = 200
    checkpoint_every: int = 500
    out_dir: Path = Path("runs/default")
    values: dict[str, str] = field(default_factory=dict)

    def resolved_text(self) -> str:
        return "".join(f"{k}={self.values[k]}\n" for k in DEFAULTS)

    @property
    def loss(self) -> LossConfig:
        return self.train.loss


def _build(values: dict[str, str]) -> RunConfig:
    v = values
    widths = WidthList(_floats(v["train.widths"]))
    ohem = OhemConfig(float(v["loss.ohem_keep_threshold"]), float(v["loss.ohem_min_kept_fraction"]))
    loss = LossConfig(
        lambda1=float(v["loss.lambda1"]),
        lambda2=float(v["loss.lambda2"]),
        tau=float(v["loss.tau"]),
        boundary_radius=int(v["loss.boundary_radius"]),
        ignore_index=int(v["loss.ignore_index"]),
        ohem=ohem if _bool(v["loss.ohem"]) else None,
        mask_source=v["loss.mask_source"].strip(),
    )
    train = TrainConfig(
        iterations=int(v["train.iterations"]),
        batch_size=int(v["train.batch_size"]),
        base_lr=float(v["train.base_lr"]),
        power=float(v["train.power"]),
        momentum=float(v["train.momentum"]),
        weight_decay=float(v["train.weight_decay"]),
        widths=widths,
        teacher_strategy=v["train.teacher_strategy"].strip(),
        loss=loss,
        seed=int(v["train.seed"]),
        augment=_bool(v["train.augment"]),
        val_every=int(v["train.val_every"]),
    )
    num_classes = int(v["data.num_classes"])
    model = SegNetConfig(
        num_classes=num_classes,
        stage_channels=_ints(v["model.stage_channels"]),
        ppm_bins=_ints(v["model.ppm_bins"]),
        widths=widths,
        input_channels=int(v["model.input_channels"]),
        decoder_channels=int(v["model.decoder_channels"]),
    )
    data = SynthConfig(
        num_classes=num_classes,
        height=int(v["data.height"]),
        width=int(v["data.width"]),
        shapes_min=int(v["data.shapes_min"]),
        shapes_max=int(v["data.shapes_max"]),
        noise_std=float(v["data.noise_std"]),
        seed=int(v["data.seed"]),
        boundary_radius=loss.boundary_radius,
    )
    return RunConfig(
        train=train,
        model=model,
        data=data,
        n_train=int(v["data.n_train"]),
        n_val=int(v["data.n_val"]),
        checkpoint_every=int(v["train.checkpoint_every"]),
        out_dir=Path(v["run.out"]),
        values=dict(v),
    )


def _parse_lines(text: str, source: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key] = value
    return out


def parse_config(text: str = "", overrides: list[str] | None = None, source: str = "<config>") -> RunConfig:
    values = dict(DEFAULTS)
    updates = _parse_lines(text, source)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, value = (p.strip() for p in item.split("=", 1))
        updates[key] = value
    unknown = sorted(set(updates) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    values.update(updates)
    try:
        return _build(values)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    if path is None:
        return parse_config("", overrides)
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(encoding="utf-8"), overrides, str(p))

