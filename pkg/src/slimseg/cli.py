"""Command line: ``slimseg train|eval|infer|profile``.

Exit codes: 0 success, 2 configuration or usage error, 3 runtime or numeric
failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import plots, segnet
from .config import ConfigError, RunConfig, load_config
from .data import IGNORE_INDEX, SampleFormatError, SynthDataset, load_sample, save_labels, split_indices
from .evaluation import DEFAULT_BINS, diff_map, error_distance_histogram
from .segnet import CheckpointError
from .training import NonFiniteLossError, evaluate_widths, predict, train_loop

log = logging.getLogger("slimseg")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
RESOLVED = "config.resolved"


class UsageError(Exception):
    pass


def _config(args, checkpoint: Path | None = None) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed={args.seed}")
    path = args.config
    if path is None and checkpoint is not None and (checkpoint.parent / RESOLVED).is_file():
        path = checkpoint.parent / RESOLVED
    return load_config(path, overrides)


def _width_index(widths, w: float) -> int:
    try:
        return widths.index(w)
    except ValueError:
        raise UsageError(f"width {w:g} not in checkpoint widths {[f'{x:g}' for x in widths]}") from None


def _load_model(path: Path) -> segnet.SlimSegModel:
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return segnet.load_checkpoint(path)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out) if args.out else cfg.out_dir
    cfg.values["run.out"] = str(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / RESOLVED).write_text(cfg.resolved_text(), encoding="utf-8")
    train_idx, val_idx = split_indices(cfg.n_train, cfg.n_val)
    train_ds = SynthDataset(cfg.data, train_idx)
    val_ds = SynthDataset(cfg.data, val_idx) if cfg.n_val else None
    model = segnet.build(cfg.model, seed=cfg.train.seed)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    with open(out / "train_log.tsv", "w", encoding="utf-8") as lf, open(out / "val_log.tsv", "w", encoding="utf-8") as vf:
        result = train_loop(model, train_ds, cfg.train, val_ds, lf, vf, ckpt_dir, cfg.checkpoint_every)
    segnet.save_checkpoint(model, out / "final.slsckpt")
    its = np.array([r.iteration for r in result.losses])
    totals = {f"x{model.widths[n]:g}": np.array([r.per_width[n]["total"] for r in result.losses]) for n in range(len(model.widths))}
    plots.loss_curves(its, totals, out / "loss_curves.png")
    for it, n, score in result.validation[-len(model.widths) :]:
        print(f"iter {it}\twidth {model.widths[n]:g}\tval mIoU {score:.4f}")
    print(f"wrote {out / 'final.slsckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    model = _load_model(ckpt)
    cfg = _config(args, ckpt)
    if cfg.data.num_classes != model.config.num_classes:
        raise UsageError(f"dataset has {cfg.data.num_classes} classes, checkpoint {model.config.num_classes}")
    indices = [_width_index(model.widths, w) for w in args.width] if args.width else list(range(len(model.widths)))
    out = Path(args.out) if args.out else ckpt.parent / "eval"
    out.mkdir(parents=True, exist_ok=True)
    _, val_idx = split_indices(cfg.n_train, cfg.n_val)
    val_ds = SynthDataset(cfg.data, val_idx)
    H, W = cfg.data.height, cfg.data.width
    results = evaluate_widths(model, val_ds, indices, cfg.loss.ignore_index)

    K = model.config.num_classes
    rows = ["\t".join(["width", "mIoU"] + [f"iou_{k}" for k in range(K)] + ["flops", "params"])]
    hists = {}
    for n in indices:
        score, ious, preds = results[n]
        flops = segnet.count_flops(model, n, (H, W))
        params = segnet.count_params(segnet.strip_boundary_head(model), n)
        rows.append("\t".join([f"{model.widths[n]:g}", repr(score)] + [repr(float(v)) for v in ious] + [str(flops), str(params)]))
        counts = np.zeros(len(DEFAULT_BINS) - 1, dtype=np.int64)
        for p, g in zip(preds, val_ds.labels):
            if len(np.unique(g[g != cfg.loss.ignore_index])) < 2:
                continue
            counts += error_distance_histogram(p, g, cfg.loss.ignore_index, DEFAULT_BINS)
        hists[n] = counts
        lines = ["bin_low\tbin_high\tcount"]
        lines += [f"{lo:g}\t{hi:g}\t{c}" for lo, hi, c in zip(DEFAULT_BINS[:-1], DEFAULT_BINS[1:], counts)]
        (out / f"histogram_w{model.widths[n]:g}.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "metrics.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    print("\n".join(rows))

    ws = [model.widths[n] for n in indices]
    plots.width_tradeoff(ws, [results[n][0] for n in indices], [segnet.count_flops(model, n, (H, W)) / 1e6 for n in indices], out / "tradeoff.png")
    plots.error_histograms(DEFAULT_BINS, {f"x{model.widths[n]:g}": hists[n] for n in indices}, out / "error_histogram.png")
    top = len(model.widths) - 1
    if top in results and len(indices) > 1:
        full = results[top][2][0]
        diffs = {f"x{model.widths[n]:g}": diff_map(results[n][2][0], full, val_ds.labels[0]).labels for n in indices if n != top}
        plots.diff_panels(full, diffs, K, out / "diff_maps.png")
    return EXIT_OK


def cmd_infer(args) -> int:
    ckpt = Path(args.checkpoint)
    model = _load_model(ckpt)
    if args.strip_boundary:
        model = segnet.strip_boundary_head(model)
    if not args.input:
        raise UsageError("infer needs --input SAMPLE")
    sample = load_sample(args.input)
    if sample.image is None:
        raise UsageError(f"{args.input} holds labels only, infer needs an image")
    width = args.width[0] if args.width else 1.0
    n = _width_index(model.widths, width)
    out = Path(args.out) if args.out else ckpt.parent / "infer"
    out.mkdir(parents=True, exist_ok=True)
    K = model.config.num_classes
    pred = predict(model, sample.image[None], n)[0]
    pred_path = out / f"pred_w{width:g}.slsd"
    save_labels(pred, K, pred_path)
    print(f"wrote {pred_path}")
    if args.against is not None:
        m = _width_index(model.widths, args.against)
        other = predict(model, sample.image[None], m)[0]
        d = diff_map(pred, other, sample.labels)
        diff_path = out / f"diff_w{width:g}_vs_w{args.against:g}.slsd"
        save_labels(np.where(d.labels < 0, IGNORE_INDEX, d.labels).astype(np.uint8), K, diff_path)
        plots.diff_panels(other, {f"x{width:g} vs x{args.against:g}": d.labels}, K, out / f"diff_w{width:g}_vs_w{args.against:g}.png")
        print(f"disagreement ratio {d.ratio:.6f}")
        print(f"wrote {diff_path}")
    return EXIT_OK


def profile_rows(model: segnet.SlimSegModel, hw) -> list[dict]:
    rows = []
    for n, w in enumerate(model.widths):
        parts = segnet.flop_breakdown(model, n, hw)
        total = sum(parts.values())
        rows.append(
            {
                "width": w,
                "flops": total,
                "params": segnet.count_params(segnet.strip_boundary_head(model), n),
                "encoder_pct": 100.0 * parts["encoder"] / total,
                "decoder_ppm_pct": 100.0 * (parts["decoder"] + parts["ppm"]) / total,
                "encoder": parts["encoder"],
                "decoder_ppm": parts["decoder"] + parts["ppm"],
            }
        )
    return rows


def cmd_profile(args) -> int:
    if args.checkpoint:
        ckpt = Path(args.checkpoint)
        model = _load_model(ckpt)
        cfg = _config(args, ckpt)
    else:
        cfg = _config(args)
        model = segnet.build(cfg.model, seed=cfg.train.seed)
    hw = (cfg.data.height, cfg.data.width)
    if args.size:
        try:
            h, w = (int(v) for v in args.size.lower().split("x"))
        except ValueError:
            raise UsageError(f"--size must look like HxW, got {args.size!r}") from None
        hw = (h, w)
    rows = profile_rows(model, hw)
    lines = ["width\tflops\tparams\tencoder_pct\tdecoder_ppm_pct"]
    lines += [f"{r['width']:g}\t{r['flops']}\t{r['params']}\t{r['encoder_pct']:.2f}\t{r['decoder_ppm_pct']:.2f}" for r in rows]
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "profile.tsv").write_text(text, encoding="utf-8")
        plots.flops_split(
            [r["width"] for r in rows],
            np.array([r["encoder"] for r in rows]) / 1e6,
            np.array([r["decoder_ppm"] for r in rows]) / 1e6,
            out / "flops_split.png",
        )
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slimseg", description="Slimmable semantic segmentation at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("train", "train a slimmable model on synthetic data"),
        ("eval", "per-width metrics, error histograms and figures"),
        ("infer", "predict a label map for one SLSD1 sample"),
        ("profile", "per-width FLOPs and parameter counts"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("--seed", type=int, help="overrides train.seed")
        p.add_argument("--width", type=float, action="append", help="width multiplier (repeatable for eval)")
        p.add_argument("--checkpoint", type=Path, help="SLSCKPT1 checkpoint")
        p.add_argument("--strip-boundary", action="store_true", help="drop the boundary head before inference")
        if name == "infer":
            p.add_argument("--input", type=Path, help="SLSD1 sample file")
            p.add_argument("--against", type=float, help="second width for a difference map")
        if name == "profile":
            p.add_argument("--size", help="input size HxW (defaults to the data canvas)")
    return parser


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "profile": cmd_profile}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command in ("eval", "infer") and args.checkpoint is None:
        print(f"error: {args.command} needs --checkpoint", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError, CheckpointError, SampleFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteLossError, FloatingPointError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
