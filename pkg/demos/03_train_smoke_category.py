"""End-to-end smoke run on a generated MVTec-format category.

Builds a tiny synthetic category on disk, trains stage 1 (distillation)
and stage 2 (discriminative head) for a few epochs on CPU, evaluates all
three scoring modes, and exports heatmaps. Everything lands in
./demo_output/smoke. Takes a minute or two.

The same flow via the CLI:
    distillad train-stpm  --config run.cfg --out stage1.pt
    distillad train-disc  --config run.cfg --checkpoint stage1.pt --out stage2.pt
    distillad eval        --config run.cfg --checkpoint stage2.pt --mode full
    distillad export      --config run.cfg --checkpoint stage2.pt --out maps/
"""

from pathlib import Path

import numpy as np
from PIL import Image

from distillad import TrainConfig, evaluate, export_heatmaps, save_checkpoint, scan_mvtec
from distillad.pipeline import train_discriminator, train_stpm

root = Path("demo_output/smoke/dataset")
category = "wavytile"


def texture(seed: int, size: int = 128) -> np.ndarray:
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    phase = rng.uniform(0, 2 * np.pi, 2)
    base = (np.sin(2 * np.pi * 6 * xx + phase[0]) + np.sin(2 * np.pi * 4 * (xx + yy) + phase[1])) / 2
    base += rng.normal(0, 0.05, base.shape)
    rgb = np.stack([0.55 + 0.25 * base, 0.45 + 0.2 * base, 0.35 + 0.15 * base], axis=-1)
    return (rgb.clip(0, 1) * 255).astype(np.uint8)


def defective(seed: int, size: int = 128) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    img = texture(seed).astype(np.float64)
    cy, cx = rng.integers(size // 4, 3 * size // 4, 2)
    ry, rx = rng.integers(size // 10, size // 5, 2)
    yy, xx = np.mgrid[0:size, 0:size]
    mask = (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2) <= 1.0
    img[mask] = np.clip(img[mask][:, ::-1] + 90, 0, 255)
    return img.astype(np.uint8), (mask * 255).astype(np.uint8)


if not root.exists():
    for i in range(16):
        path = root / category / "train" / "good" / f"{i:03d}.png"
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(texture(i)).save(path)
    for i in range(4):
        path = root / category / "test" / "good" / f"{i:03d}.png"
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(texture(1000 + i)).save(path)
    for i in range(4):
        img, mask = defective(2000 + i)
        ipath = root / category / "test" / "blotch" / f"{i:03d}.png"
        mpath = root / category / "ground_truth" / "blotch" / f"{i:03d}_mask.png"
        ipath.parent.mkdir(parents=True, exist_ok=True)
        mpath.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(img).save(ipath)
        Image.fromarray(mask).save(mpath)
    print(f"wrote synthetic category to {root}")

# Desk-scale settings. For a real MVTec run keep the defaults
# (100/300 epochs, batch 32, image_size 256, weights_source="imagenet").
cfg = TrainConfig(
    category=category,
    data_root=str(root),
    image_size=64,
    stpm_epochs=5,
    disc_epochs=5,
    batch_size=4,
    beta_min=0.6,
    weights_source="random:7",
    seed=0,
    device="cpu",
)
index = scan_mvtec(root, category, cfg.image_size)
print(f"{len(index.train_paths)} train images, {len(index.test_items)} test items")

out = Path("demo_output/smoke")
stage1 = train_stpm(cfg, index, log_dir=out / "logs", progress=True)
save_checkpoint(stage1, out / "stage1.pt")
stage2 = train_discriminator(cfg, stage1, index, log_dir=out / "logs", progress=True)
save_checkpoint(stage2, out / "stage2.pt")

for mode in ("stpm-only", "discriminator-only", "full"):
    report = evaluate(stage2, index, mode=mode)
    print(f"{mode:>20}: pixel AUROC {report.pixel_auroc:.3f}  "
          f"image AUROC {report.image_auroc:.3f}  PRO {report.pro:.3f}")

files = export_heatmaps(stage2, index, out / "heatmaps")
print(f"exported {len(files)} files to {out / 'heatmaps'}")
