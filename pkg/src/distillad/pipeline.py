"""Two-stage training, evaluation, and artifact export.

Stage 1 distills both student-teacher pairs on normal images only. Stage 2
freezes everything from stage 1, feeds pseudo-anomalies through it, and
trains the discriminative head on the resulting pair-sum maps. Evaluation
runs in three modes: the distillation composite alone (``stpm-only``), the
head's probability map alone (``discriminator-only``), or their product
(``full``).
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from scipy.ndimage import gaussian_filter
from torch import Tensor, nn

from .config import TrainConfig, config_fingerprint
from .data import DatasetIndex, load_batch, load_images, load_mask, normalize_images
from .discriminator import (
    FocalLossConfig,
    UNetDiscriminator,
    discriminator_forward,
    focal_loss,
    init_discriminator,
    stack_inputs,
)
from .errors import DeviceError, StageError, WeightsError
from .losses import LossBreakdown, total_loss
from .maps import AnomalyMap, compose_final, compose_stpm, image_score, pair_sums, site_anomaly_map
from .metrics import EvalReport, pixel_auroc, pro_curve, pro_score, roc_auc
from .students import Student1Network, Student2Network, init_student1, init_student2
from .synthesis import PseudoAnomalyGenerator
from .teachers import TeacherNetwork, extract_pyramid, load_teacher, parameter_checksum

CHECKPOINT_VERSION = 1
SITE_STRIDES = (4, 8, 16, 16, 8, 4)
EVAL_MODES = ("stpm-only", "discriminator-only", "full")


@dataclass
class StpmModels:
    """The two frozen teachers plus both trainable students."""

    teacher1: TeacherNetwork
    teacher2: TeacherNetwork
    student1: Student1Network
    student2: Student2Network

    def trainable_parameters(self) -> Iterator[nn.Parameter]:
        yield from self.student1.parameters()
        yield from self.student2.parameters()

    def to(self, device: torch.device) -> "StpmModels":
        for module in (self.teacher1, self.teacher2, self.student1, self.student2):
            module.to(device)
        return self


@dataclass
class Checkpoint:
    """Serialized training state: weight groups plus a metadata block."""

    stage: str  # "stpm" or "full"
    config: TrainConfig
    teacher_info: dict
    weights: dict[str, dict[str, Tensor]]
    version: int = CHECKPOINT_VERSION

    @property
    def fingerprint(self) -> str:
        return config_fingerprint(self.config)


def resolve_device(selector: str) -> torch.device:
    """Map a device selector to a torch device, erroring when unavailable."""
    if selector == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    if selector.startswith("cuda") and not torch.cuda.is_available():
        raise DeviceError(f"device {selector!r} requested but CUDA is unavailable")
    try:
        return torch.device(selector)
    except RuntimeError as exc:
        raise DeviceError(f"invalid device {selector!r}: {exc}") from exc


def build_models(cfg: TrainConfig, device: torch.device | None = None) -> StpmModels:
    """Fresh teachers and students per the config, moved to the device."""
    device = device or resolve_device(cfg.device)
    models = StpmModels(
        teacher1=load_teacher(cfg.teacher1, cfg.weights_source),
        teacher2=load_teacher(cfg.teacher2, cfg.weights_source),
        student1=init_student1(cfg.seed),
        student2=init_student2(cfg.seed),
    )
    return models.to(device)


def distillation_pairs(models: StpmModels, batch: Tensor) -> list[tuple[Tensor, Tensor]]:
    """The six (teacher, student) feature pairs in site order.

    Sites 1-3: pair one at strides 4/8/16. Sites 4-6: the reconstruction
    pair at strides 16/8/4 (site 4 is the coarsest).
    """
    t1 = extract_pyramid(models.teacher1, batch)
    t2 = extract_pyramid(models.teacher2, batch)
    s1 = models.student1(batch)
    attentions = models.student2.compute_attentions(t2.levels)
    s2 = models.student2(t1.levels[3], attentions)
    return [
        (t1.levels[0], s1.levels[0]),
        (t1.levels[1], s1.levels[1]),
        (t1.levels[2], s1.levels[2]),
        (t2.levels[2], s2.levels[2]),
        (t2.levels[1], s2.levels[1]),
        (t2.levels[0], s2.levels[0]),
    ]


def site_maps(models: StpmModels, batch: Tensor) -> list[AnomalyMap]:
    """Per-site anomaly maps for a normalized batch (batched values)."""
    pairs = distillation_pairs(models, batch)
    return [
        site_anomaly_map(ft, fs, stride=stride, site=site)
        for (ft, fs), stride, site in zip(pairs, SITE_STRIDES, range(1, 7))
    ]


def pair_sum_maps(models: StpmModels, batch: Tensor) -> list[AnomalyMap]:
    """The three same-resolution pair sums (strides 4, 8, 16)."""
    return pair_sums(site_maps(models, batch))


def _batch_paths(paths: Sequence, batch_size: int, rng: np.random.Generator | None) -> Iterator[list]:
    order = np.arange(len(paths))
    if rng is not None:
        rng.shuffle(order)
    for start in range(0, len(order), batch_size):
        yield [paths[i] for i in order[start:start + batch_size]]


def _append_csv(path: Path | None, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    if path is None:
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    new_file = not path.exists()
    with path.open("a", newline="") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(header)
        writer.writerows(rows)


def stpm_state_groups(models: StpmModels) -> dict[str, dict[str, Tensor]]:
    return {
        "student1": models.student1.state_dict(),
        "student2_decoder": models.student2.blocks.state_dict(),
        "adapters": models.student2.adapters.state_dict(),
        "attention": models.student2.gates.state_dict(),
    }


def stpm_checksums(models: StpmModels) -> dict[str, str]:
    return {
        "student1": parameter_checksum(models.student1),
        "student2": parameter_checksum(models.student2),
    }


def train_stpm(
    cfg: TrainConfig,
    index: DatasetIndex,
    log_dir: str | Path | None = None,
    progress: bool = False,
) -> Checkpoint:
    """Stage 1: distill both student-teacher pairs on normal images.

    Logs per-site epoch losses to ``stpm_losses.csv`` under ``log_dir``
    and warns (without aborting) if the loss trend over the first ten
    epochs is non-decreasing.
    """
    if not index.train_paths:
        raise StageError("training requires at least one normal image")
    device = resolve_device(cfg.device)
    torch.manual_seed(cfg.seed)
    models = build_models(cfg, device)
    teacher_checksums = {
        "teacher1": parameter_checksum(models.teacher1),
        "teacher2": parameter_checksum(models.teacher2),
    }

    params = list(models.trainable_parameters())
    optimizer = torch.optim.SGD(
        params, lr=cfg.stpm_lr, momentum=cfg.stpm_momentum, weight_decay=cfg.stpm_weight_decay
    )
    scheduler = None
    if cfg.lr_schedule == "cosine":
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=cfg.stpm_epochs)

    log_path = Path(log_dir) / "stpm_losses.csv" if log_dir else None
    epoch_means: list[float] = []
    models.student1.train()
    models.student2.train()
    for epoch in range(cfg.stpm_epochs):
        rng = np.random.default_rng(cfg.seed * 100003 + epoch)
        site_sums = np.zeros(6)
        n_batches = 0
        for paths in _batch_paths(index.train_paths, cfg.batch_size, rng):
            batch = load_batch(index, paths, cfg.image_size).pixels.to(device)
            breakdown: LossBreakdown = total_loss(distillation_pairs(models, batch))
            optimizer.zero_grad()
            breakdown.total.backward()
            optimizer.step()
            site_sums += breakdown.per_site.cpu().numpy()
            n_batches += 1
        if scheduler is not None:
            scheduler.step()
        site_means = site_sums / max(n_batches, 1)
        epoch_means.append(float(site_means.sum()))
        _append_csv(
            log_path,
            ("epoch", "site", "value"),
            [(epoch, site + 1, f"{site_means[site]:.6f}") for site in range(6)],
        )
        if progress:
            print(f"[stpm] epoch {epoch + 1}/{cfg.stpm_epochs} loss {epoch_means[-1]:.4f}")
        if epoch == 9 and epoch_means[9] >= epoch_means[0]:
            warnings.warn(
                f"distillation loss has not decreased over the first 10 epochs "
                f"({epoch_means[0]:.4f} -> {epoch_means[9]:.4f})",
                RuntimeWarning,
            )

    # teachers must be untouched by training
    after = {
        "teacher1": parameter_checksum(models.teacher1),
        "teacher2": parameter_checksum(models.teacher2),
    }
    if after != teacher_checksums:
        raise WeightsError("teacher parameters changed during distillation training")

    teacher_info = {
        "teacher1": {"variant": cfg.teacher1, "weights_source": cfg.weights_source,
                     "checksum": teacher_checksums["teacher1"]},
        "teacher2": {"variant": cfg.teacher2, "weights_source": cfg.weights_source,
                     "checksum": teacher_checksums["teacher2"]},
    }
    return Checkpoint(stage="stpm", config=cfg, teacher_info=teacher_info,
                      weights=stpm_state_groups(models))


def rebuild_models(
    ckpt: Checkpoint, device: torch.device | None = None
) -> tuple[StpmModels, UNetDiscriminator | None]:
    """Reconstruct all networks from a checkpoint, verified and frozen.

    Teachers are rebuilt from their recorded source and checked against
    the stored checksums; a mismatch raises :class:`WeightsError`.
    """
    cfg = ckpt.config
    device = device or resolve_device(cfg.device)
    models = StpmModels(
        teacher1=load_teacher(ckpt.teacher_info["teacher1"]["variant"],
                              ckpt.teacher_info["teacher1"]["weights_source"]),
        teacher2=load_teacher(ckpt.teacher_info["teacher2"]["variant"],
                              ckpt.teacher_info["teacher2"]["weights_source"]),
        student1=init_student1(cfg.seed),
        student2=init_student2(cfg.seed),
    )
    for name in ("teacher1", "teacher2"):
        rebuilt = parameter_checksum(getattr(models, name))
        if rebuilt != ckpt.teacher_info[name]["checksum"]:
            raise WeightsError(
                f"{name} checksum mismatch: checkpoint has "
                f"{ckpt.teacher_info[name]['checksum'][:12]}, rebuilt {rebuilt[:12]}"
            )
    models.student1.load_state_dict(ckpt.weights["student1"])
    models.student2.blocks.load_state_dict(ckpt.weights["student2_decoder"])
    models.student2.adapters.load_state_dict(ckpt.weights["adapters"])
    models.student2.gates.load_state_dict(ckpt.weights["attention"])
    models.to(device)
    models.student1.eval()
    models.student2.eval()

    disc = None
    if ckpt.stage == "full":
        disc = init_discriminator(cfg.seed)
        disc.load_state_dict(ckpt.weights["discriminator"])
        disc.to(device)
        disc.eval()
    return models, disc


def _freeze(module: nn.Module) -> None:
    for param in module.parameters():
        param.requires_grad_(False)
    module.eval()


def train_discriminator(
    cfg: TrainConfig,
    stpm_ckpt: Checkpoint,
    index: DatasetIndex,
    log_dir: str | Path | None = None,
    progress: bool = False,
) -> Checkpoint:
    """Stage 2: train the U-Net head on pseudo-anomalies through frozen STPM.

    Each batch mixes synthesized anomalous samples with unmodified normals
    (share set by ``cfg.anomaly_ratio``), scores them with the frozen
    distillation stage, and optimizes the focal loss of the head against
    the synthesis masks. Stage-1 weights are checksum-verified unchanged.
    """
    if stpm_ckpt.stage not in ("stpm", "full"):
        raise StageError(f"unknown checkpoint stage {stpm_ckpt.stage!r}")
    device = resolve_device(cfg.device)
    torch.manual_seed(cfg.seed + 1)
    models, _ = rebuild_models(stpm_ckpt, device)
    for module in (models.student1, models.student2):
        _freeze(module)
    before = stpm_checksums(models)

    generator = PseudoAnomalyGenerator(
        periods=cfg.perlin_periods,
        threshold_scale=cfg.mask_threshold_scale,
        beta_range=(cfg.beta_min, cfg.beta_max),
        texture_dir=cfg.texture_dir or None,
    )
    disc = init_discriminator(cfg.seed).to(device)
    disc.train()
    optimizer = torch.optim.Adam(disc.parameters(), lr=cfg.disc_lr)
    loss_cfg = FocalLossConfig(
        gamma=cfg.focal_gamma, normal_weight=cfg.focal_normal_weight, symmetric=cfg.focal_symmetric
    )

    log_path = Path(log_dir) / "disc_losses.csv" if log_dir else None
    for epoch in range(cfg.disc_epochs):
        rng = np.random.default_rng(cfg.seed * 90001 + epoch)
        epoch_loss = 0.0
        n_batches = 0
        for batch_idx, paths in enumerate(_batch_paths(index.train_paths, cfg.batch_size, rng)):
            sources = load_images(paths, cfg.image_size)
            batch_seed = cfg.seed + 1_000_003 * epoch + 101 * batch_idx
            samples = generator.sample_batch(sources, batch_seed, cfg.anomaly_ratio)
            images = torch.stack([s.image for s in samples])
            masks = torch.stack([s.mask for s in samples]).to(device)
            batch = normalize_images(images).to(device)
            with torch.no_grad():
                sums = pair_sum_maps(models, batch)
                stacked = stack_inputs(sums, cfg.image_size)
            prob = disc(stacked)[:, 0]
            loss = focal_loss(prob, masks, loss_cfg)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach())
            n_batches += 1
        mean_loss = epoch_loss / max(n_batches, 1)
        _append_csv(log_path, ("epoch", "focal_loss"), [(epoch, f"{mean_loss:.6f}")])
        if progress:
            print(f"[disc] epoch {epoch + 1}/{cfg.disc_epochs} focal loss {mean_loss:.6f}")

    if stpm_checksums(models) != before:
        raise WeightsError("stage-1 weights changed during discriminator training")

    weights = stpm_state_groups(models)
    weights["discriminator"] = disc.state_dict()
    return Checkpoint(stage="full", config=cfg, teacher_info=stpm_ckpt.teacher_info, weights=weights)


def _composite_for_mode(
    models: StpmModels,
    disc: UNetDiscriminator | None,
    batch: Tensor,
    mode: str,
    image_size: int,
) -> AnomalyMap:
    maps = site_maps(models, batch)
    if mode == "stpm-only":
        return compose_stpm(maps, image_size)
    sums = pair_sums(maps)
    stacked = stack_inputs(sums, image_size)
    with torch.no_grad():
        omega7 = discriminator_forward(disc, stacked)
    if mode == "discriminator-only":
        return AnomalyMap(values=omega7.values, resolution="full", site="composite")
    return compose_final(maps, omega7, image_size)


def evaluate(ckpt: Checkpoint, index: DatasetIndex, mode: str = "full") -> EvalReport:
    """Score the test split and compute pixel AUROC, image AUROC, and PRO."""
    if mode not in EVAL_MODES:
        raise StageError(f"unknown evaluation mode {mode!r}")
    if mode in ("full", "discriminator-only") and ckpt.stage != "full":
        raise StageError(f"mode {mode!r} needs a stage-'full' checkpoint, got {ckpt.stage!r}")
    cfg = ckpt.config
    device = resolve_device(cfg.device)
    models, disc = rebuild_models(ckpt, device)

    composites: list[np.ndarray] = []
    masks: list[np.ndarray] = []
    labels: list[int] = []
    scores: list[float] = []
    paths: list[str] = []
    items = list(index.test_items)
    for start in range(0, len(items), cfg.batch_size):
        chunk = items[start:start + cfg.batch_size]
        batch = load_batch(index, [i.image_path for i in chunk], cfg.image_size).pixels.to(device)
        with torch.no_grad():
            composite = _composite_for_mode(models, disc, batch, mode, cfg.image_size)
        values = composite.values.cpu().numpy().astype(np.float32)
        if cfg.smooth_sigma > 0:
            values = np.stack([gaussian_filter(v, cfg.smooth_sigma) for v in values])
        for item, vmap in zip(chunk, values):
            amap = AnomalyMap(values=torch.from_numpy(vmap), resolution="full", site="composite")
            composites.append(vmap)
            scores.append(float(image_score(amap, cfg.image_score_reducer, cfg.image_score_topk)))
            labels.append(0 if item.defect_type == "good" else 1)
            paths.append(str(item.image_path))
            if item.mask_path is None:
                masks.append(np.zeros((cfg.image_size, cfg.image_size), dtype=np.float32))
            else:
                masks.append(load_mask(item.mask_path, cfg.image_size).numpy())

    curve = pro_curve(composites, masks)
    return EvalReport(
        category=index.category,
        pixel_auroc=pixel_auroc(composites, masks),
        image_auroc=roc_auc(scores, labels),
        pro=pro_score(composites, masks, cfg.pro_fpr_limit, curve=curve),
        per_image_scores=list(zip(paths, scores, labels)),
        threshold_curve=curve,
    )


def write_report_csv(report: EvalReport, path: str | Path) -> None:
    """One-row summary CSV mirroring the published table layout."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("category", "pixel_auroc", "pro", "image_auroc"))
        writer.writerow((report.category, f"{report.pixel_auroc:.4f}",
                         f"{report.pro:.4f}", f"{report.image_auroc:.4f}"))


def write_scores_csv(report: EvalReport, path: str | Path) -> None:
    """Per-image score CSV: one row per test image."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("path", "score", "label"))
        for image_path, score, label in report.per_image_scores:
            writer.writerow((image_path, f"{score:.6g}", label))


def export_heatmaps(ckpt: Checkpoint, index: DatasetIndex, out_dir: str | Path) -> list[Path]:
    """Write per-image artifacts: raw map, heatmap PNG, overlay PNG.

    Plus one ``summary.json`` holding per-image scores and the min/max
    scales used for the 8-bit normalization. Returns all written paths.
    """
    from PIL import Image

    from .maps import colorize, overlay, to_heatmap_uint8

    cfg = ckpt.config
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise IOError(f"cannot write to {out}: {exc}") from exc

    device = resolve_device(cfg.device)
    models, disc = rebuild_models(ckpt, device)
    mode = "full" if ckpt.stage == "full" else "stpm-only"

    written: list[Path] = []
    summary = {"category": index.category, "mode": mode, "images": []}
    for item in index.test_items:
        batch = load_batch(index, [item.image_path], cfg.image_size)
        with torch.no_grad():
            composite = _composite_for_mode(models, disc, batch.pixels.to(device), mode, cfg.image_size)
        values = composite.values.cpu().numpy().astype(np.float32)[0]
        amap = AnomalyMap(values=torch.from_numpy(values), resolution="full", site="composite")
        score = float(image_score(amap, cfg.image_score_reducer, cfg.image_score_topk))

        stem = f"{item.defect_type}_{item.image_path.stem}"
        raw_path = out / f"{stem}_map.npy"
        np.save(raw_path, values)
        heat_u8, vmin, vmax = to_heatmap_uint8(values)
        heat_rgb = colorize(heat_u8)
        heat_path = out / f"{stem}_heatmap.png"
        Image.fromarray(heat_rgb).save(heat_path)
        source = load_images([item.image_path], cfg.image_size)[0]
        image_rgb = (source.permute(1, 2, 0).numpy() * 255.0).round().astype(np.uint8)
        overlay_path = out / f"{stem}_overlay.png"
        Image.fromarray(overlay(image_rgb, heat_rgb)).save(overlay_path)

        written.extend((raw_path, heat_path, overlay_path))
        summary["images"].append({
            "image": str(item.image_path),
            "defect_type": item.defect_type,
            "score": score,
            "heatmap_min": vmin,
            "heatmap_max": vmax,
        })

    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2))
    written.append(summary_path)
    return written


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Single-file container: JSON metadata block plus named weight groups."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "version": ckpt.version,
        "stage": ckpt.stage,
        "config": ckpt.config.to_dict(),
        "fingerprint": ckpt.fingerprint,
        "teacher_info": ckpt.teacher_info,
    }
    torch.save({"meta_json": json.dumps(meta, sort_keys=True), "weights": ckpt.weights}, path)


def load_checkpoint(path: str | Path, expected_config: TrainConfig | None = None) -> Checkpoint:
    """Load a checkpoint; warn when its fingerprint differs from the given config."""
    path = Path(path)
    if not path.is_file():
        raise WeightsError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    meta = json.loads(payload["meta_json"])
    cfg_dict = dict(meta["config"])
    cfg_dict["perlin_periods"] = tuple(cfg_dict["perlin_periods"])
    cfg = TrainConfig(**cfg_dict)
    ckpt = Checkpoint(
        stage=meta["stage"],
        config=cfg,
        teacher_info=meta["teacher_info"],
        weights=payload["weights"],
        version=meta["version"],
    )
    if meta["fingerprint"] != ckpt.fingerprint:
        warnings.warn("checkpoint metadata fingerprint does not match its config", RuntimeWarning)
    if expected_config is not None and config_fingerprint(expected_config) != ckpt.fingerprint:
        warnings.warn(
            "checkpoint was trained with a different configuration than the one supplied",
            RuntimeWarning,
        )
    if ckpt.stage == "full":
        missing = {"student1", "student2_decoder", "adapters", "attention", "discriminator"} - set(ckpt.weights)
        if missing:
            raise WeightsError(f"stage-'full' checkpoint missing weight groups: {sorted(missing)}")
    return ckpt
