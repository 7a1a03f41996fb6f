"""Command-line entry point.

Verbs: ``train-stpm``, ``train-disc``, ``eval``, ``export``, and
``synth-preview``. Every verb reads ``--config <file>`` (flat
``key = value`` text) and accepts per-key flag overrides, e.g.
``--category grid --stpm-epochs 5``.

Exit codes: 0 success, 2 config error, 3 data error, 4 device error.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .config import TrainConfig, load_config
from .errors import ConfigError, DataError, DeviceError, DistillADError
from .data import scan_mvtec

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DEVICE = 4


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, default=None, help="flat key = value config file")
    for field in dataclasses.fields(TrainConfig):
        flag = "--" + field.name.replace("_", "-")
        parser.add_argument(flag, type=str, default=None, dest=f"cfg_{field.name}",
                            help=f"override config key {field.name}")


def _config_from_args(args: argparse.Namespace) -> TrainConfig:
    overrides = {}
    for field in dataclasses.fields(TrainConfig):
        value = getattr(args, f"cfg_{field.name}", None)
        if value is not None:
            overrides[field.name] = value
    return load_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="distillad",
        description="Dual student-teacher feature-pyramid distillation for anomaly detection",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    p_train = sub.add_parser("train-stpm", help="stage 1: distillation training on normal images")
    _add_config_flags(p_train)
    p_train.add_argument("--out", type=str, required=True, help="checkpoint output path")
    p_train.add_argument("--log-dir", type=str, default=None, help="directory for loss CSVs")

    p_disc = sub.add_parser("train-disc", help="stage 2: discriminator training on pseudo-anomalies")
    _add_config_flags(p_disc)
    p_disc.add_argument("--checkpoint", type=str, required=True, help="stage-1 checkpoint")
    p_disc.add_argument("--out", type=str, required=True, help="checkpoint output path")
    p_disc.add_argument("--log-dir", type=str, default=None)

    p_eval = sub.add_parser("eval", help="compute pixel/image AUROC and PRO on the test split")
    _add_config_flags(p_eval)
    p_eval.add_argument("--checkpoint", type=str, required=True)
    p_eval.add_argument("--mode", choices=("stpm-only", "discriminator-only", "full"), default="full")
    p_eval.add_argument("--out", type=str, default=None, help="write report JSON (+ .csv) here")

    p_export = sub.add_parser("export", help="write heatmaps, overlays, and raw maps")
    _add_config_flags(p_export)
    p_export.add_argument("--checkpoint", type=str, required=True)
    p_export.add_argument("--out", type=str, required=True, help="output directory")

    p_synth = sub.add_parser("synth-preview", help="dump pseudo-anomaly (image, mask) pairs")
    _add_config_flags(p_synth)
    p_synth.add_argument("--out", type=str, required=True, help="output directory")
    p_synth.add_argument("--count", type=int, default=8)

    return parser


def _require_data_root(cfg: TrainConfig) -> Path:
    if not cfg.data_root:
        raise ConfigError("data_root is not set (config key 'data_root' or flag --data-root)")
    return Path(cfg.data_root)


def _run(args: argparse.Namespace) -> int:
    from . import pipeline

    cfg = _config_from_args(args)

    if args.verb == "train-stpm":
        index = scan_mvtec(_require_data_root(cfg), cfg.category, cfg.image_size)
        ckpt = pipeline.train_stpm(cfg, index, log_dir=args.log_dir, progress=True)
        pipeline.save_checkpoint(ckpt, args.out)
        print(f"wrote stage-1 checkpoint to {args.out}")
        return EXIT_OK

    if args.verb == "train-disc":
        index = scan_mvtec(_require_data_root(cfg), cfg.category, cfg.image_size)
        stpm_ckpt = pipeline.load_checkpoint(args.checkpoint, expected_config=cfg)
        ckpt = pipeline.train_discriminator(cfg, stpm_ckpt, index, log_dir=args.log_dir, progress=True)
        pipeline.save_checkpoint(ckpt, args.out)
        print(f"wrote stage-2 checkpoint to {args.out}")
        return EXIT_OK

    if args.verb == "eval":
        index = scan_mvtec(_require_data_root(cfg), cfg.category, cfg.image_size)
        ckpt = pipeline.load_checkpoint(args.checkpoint, expected_config=cfg)
        report = pipeline.evaluate(ckpt, index, mode=args.mode)
        print(f"category={report.category} mode={args.mode} "
              f"pixel_auroc={report.pixel_auroc:.4f} image_auroc={report.image_auroc:.4f} "
              f"pro={report.pro:.4f}")
        if args.out:
            out = Path(args.out)
            report.to_json(out)
            pipeline.write_report_csv(report, out.with_suffix(".csv"))
            pipeline.write_scores_csv(report, out.with_name(out.stem + "_scores.csv"))
            print(f"wrote report to {out}")
        return EXIT_OK

    if args.verb == "export":
        index = scan_mvtec(_require_data_root(cfg), cfg.category, cfg.image_size)
        ckpt = pipeline.load_checkpoint(args.checkpoint, expected_config=cfg)
        files = pipeline.export_heatmaps(ckpt, index, args.out)
        print(f"wrote {len(files)} files to {args.out}")
        return EXIT_OK

    if args.verb == "synth-preview":
        return _synth_preview(cfg, args)

    raise ConfigError(f"unknown verb {args.verb!r}")


def _synth_preview(cfg: TrainConfig, args: argparse.Namespace) -> int:
    import numpy as np
    from PIL import Image

    from .data import load_images
    from .synthesis import PseudoAnomalyGenerator

    index = scan_mvtec(_require_data_root(cfg), cfg.category, cfg.image_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    generator = PseudoAnomalyGenerator(
        periods=cfg.perlin_periods,
        threshold_scale=cfg.mask_threshold_scale,
        beta_range=(cfg.beta_min, cfg.beta_max),
        texture_dir=cfg.texture_dir or None,
    )
    count = min(args.count, len(index.train_paths))
    for i in range(count):
        source = load_images([index.train_paths[i]], cfg.image_size)[0]
        sample = generator.sample(source, seed=cfg.seed + i)
        image_u8 = (sample.image.permute(1, 2, 0).numpy() * 255.0).round().astype(np.uint8)
        mask_u8 = (sample.mask.numpy() * 255.0).astype(np.uint8)
        Image.fromarray(image_u8).save(out / f"sample_{i:03d}.png")
        Image.fromarray(mask_u8).save(out / f"sample_{i:03d}_mask.png")
    print(f"wrote {count} (image, mask) pairs to {out}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DeviceError as exc:
        print(f"device error: {exc}", file=sys.stderr)
        return EXIT_DEVICE
    except DistillADError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
