from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from distillad.config import TrainConfig
from distillad.data import scan_mvtec
from distillad.pipeline import train_discriminator, train_stpm

FIXTURE_CATEGORY = "wavytile"
FIXTURE_SOURCE_SIZE = 128  # saved PNGs; the config downsizes from here
SMOKE_IMAGE_SIZE = 64


def make_texture(seed: int, size: int = FIXTURE_SOURCE_SIZE) -> np.ndarray:
    """Structured synthetic product texture as H x W x 3 uint8."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    phase = rng.uniform(0, 2 * np.pi, size=2)
    base = (
        np.sin(2 * np.pi * 6 * xx + phase[0])
        + np.sin(2 * np.pi * 4 * (xx + yy) + phase[1])
    ) / 2.0
    base = base + rng.normal(0, 0.05, size=base.shape)
    channels = [
        0.55 + 0.25 * base,
        0.45 + 0.20 * base,
        0.35 + 0.15 * base,
    ]
    img = np.stack(channels, axis=-1)
    return (img.clip(0, 1) * 255).astype(np.uint8)


def paint_defect(image: np.ndarray, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Blotch an elliptical contrast defect into a texture; returns (image, mask)."""
    rng = np.random.default_rng(seed)
    size = image.shape[0]
    cy, cx = rng.integers(size // 4, 3 * size // 4, size=2)
    ry, rx = rng.integers(size // 10, size // 5, size=2)
    yy, xx = np.mgrid[0:size, 0:size]
    mask = (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2) <= 1.0
    out = image.astype(np.float64)
    shift = rng.uniform(60, 120) * rng.choice([-1.0, 1.0])
    out[mask] = np.clip(out[mask][:, ::-1] + shift, 0, 255)
    return out.astype(np.uint8), (mask * 255).astype(np.uint8)


def build_mvtec_fixture(root: Path, n_train: int = 16, n_good: int = 4, n_defect: int = 4) -> Path:
    """Create a miniature MVTec-format tree under ``root``."""
    base = root / FIXTURE_CATEGORY
    train_dir = base / "train" / "good"
    good_dir = base / "test" / "good"
    defect_dir = base / "test" / "crack"
    gt_dir = base / "ground_truth" / "crack"
    for d in (train_dir, good_dir, defect_dir, gt_dir):
        d.mkdir(parents=True)
    for i in range(n_train):
        Image.fromarray(make_texture(seed=i)).save(train_dir / f"{i:03d}.png")
    for i in range(n_good):
        Image.fromarray(make_texture(seed=1000 + i)).save(good_dir / f"{i:03d}.png")
    for i in range(n_defect):
        texture = make_texture(seed=2000 + i)
        defective, mask = paint_defect(texture, seed=3000 + i)
        Image.fromarray(defective).save(defect_dir / f"{i:03d}.png")
        Image.fromarray(mask).save(gt_dir / f"{i:03d}_mask.png")
    return root


@pytest.fixture(scope="session")
def mvtec_root(tmp_path_factory: pytest.TempPathFactory) -> Path:
    return build_mvtec_fixture(tmp_path_factory.mktemp("mvtec"))


@pytest.fixture(scope="session")
def smoke_config(mvtec_root: Path) -> TrainConfig:
    """CPU-sized settings for the 16-image smoke fixture.

    Stage defaults (epoch counts, optimizers) are exercised separately;
    here everything is scaled for minutes-long runs.
    """
    return TrainConfig(
        category=FIXTURE_CATEGORY,
        data_root=str(mvtec_root),
        image_size=SMOKE_IMAGE_SIZE,
        stpm_epochs=5,
        disc_epochs=5,
        batch_size=4,
        beta_min=0.6,  # strong blends so 5 epochs of head training separate
        weights_source="random:7",
        seed=0,
        device="cpu",
    )


@pytest.fixture(scope="session")
def smoke_index(smoke_config: TrainConfig, mvtec_root: Path):
    return scan_mvtec(mvtec_root, FIXTURE_CATEGORY, smoke_config.image_size)


@pytest.fixture(scope="session")
def smoke_run(smoke_config: TrainConfig, smoke_index, tmp_path_factory: pytest.TempPathFactory):
    """Train both stages once per session; many tests share the result."""
    log_dir = tmp_path_factory.mktemp("smoke_logs")
    stpm_ckpt = train_stpm(smoke_config, smoke_index, log_dir=log_dir)
    full_ckpt = train_discriminator(smoke_config, stpm_ckpt, smoke_index, log_dir=log_dir)
    return {
        "config": smoke_config,
        "index": smoke_index,
        "stpm": stpm_ckpt,
        "full": full_ckpt,
        "log_dir": log_dir,
    }
