"""Acceptance suite: one test per release criterion, each printing a
pass/fail line. Criteria 1-7 are mandatory and self-contained; criterion 8
is the optional full-scale reproduction, gated on a real dataset root and
pretrained weights.
"""

from __future__ import annotations

import csv
import os
import time

import numpy as np
import pytest
import torch

from distillad.config import TrainConfig
from distillad.data import load_images, normalize_images, scan_mvtec
from distillad.discriminator import FocalLossConfig, focal_loss, stack_inputs
from distillad.losses import normalize_features, pixel_loss, total_loss
from distillad.maps import AnomalyMap, compose_final, compose_stpm
from distillad.metrics import pro_score, roc_auc
from distillad.pipeline import pair_sum_maps, rebuild_models
from distillad.synthesis import PseudoAnomalyGenerator
from distillad.teachers import load_teacher, parameter_checksum

from conftest import make_texture
from test_losses import scalar_loop_pixel_loss
from test_maps import SITE_STRIDES, make_site_maps, reference_composition
from test_metrics import exhaustive_pro_oracle, pairwise_auc_oracle


def _line(number: int, description: str, ok: bool) -> None:
    print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {description}")


def test_criterion_1_loss_identity_suite():
    ok = False
    started = time.time()
    try:
        rng = np.random.default_rng(10)
        # perfect distillation
        pairs = [(torch.tensor(rng.normal(size=(8, 4, 4))),) * 2 for _ in range(6)]
        pairs = [(t, t.clone()) for t, _ in pairs]
        assert float(total_loss(pairs).total) == 0.0

        # per-site bound on random inputs
        for _ in range(20):
            rand_pairs = [
                (torch.tensor(rng.normal(size=(8, 4, 4))), torch.tensor(rng.normal(size=(8, 4, 4))))
                for _ in range(6)
            ]
            breakdown = total_loss(rand_pairs)
            assert (breakdown.per_site >= 0.0).all()
            assert (breakdown.per_site <= 2.0 + 1e-9).all()

        # pixel loss vs scalar-loop oracle, 100 random small tensors
        for _ in range(100):
            c = int(rng.integers(2, 9))
            h = int(rng.integers(2, 5))
            w = int(rng.integers(2, 5))
            ft = rng.normal(size=(c, h, w))
            fs = rng.normal(size=(c, h, w))
            got = pixel_loss(torch.tensor(ft), torch.tensor(fs)).numpy()
            assert np.abs(got - scalar_loop_pixel_loss(ft, fs)).max() < 1e-6

        assert time.time() - started < 60.0
        ok = True
    finally:
        _line(1, "loss identities, per-site bounds, scalar-loop oracle (1e-6)", ok)


def _fd_gradient(func, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    fd = torch.zeros_like(x)
    with torch.no_grad():
        flat = x.view(-1)
        for idx in range(flat.numel()):
            orig = float(flat[idx])
            flat[idx] = orig + h
            up = float(func())
            flat[idx] = orig - h
            down = float(func())
            flat[idx] = orig
            fd.view(-1)[idx] = (up - down) / (2 * h)
    return fd


def test_criterion_2_gradient_checks():
    ok = False
    started = time.time()
    try:
        rng = np.random.default_rng(20)
        # distillation loss wrt one student feature, instances <= 4x4x8
        for trial in range(3):
            pairs = [
                (torch.tensor(rng.normal(size=(8, 4, 4))), torch.tensor(rng.normal(size=(8, 4, 4))))
                for _ in range(6)
            ]
            student = pairs[trial][1].clone().requires_grad_(True)
            probe = [(t, student if i == trial else s) for i, (t, s) in enumerate(pairs)]
            total_loss(probe).total.backward()
            analytic = student.grad.clone()
            fd = _fd_gradient(lambda: total_loss(probe).total, student)
            rel = float((analytic - fd).abs().max()) / max(float(analytic.abs().max()), 1e-12)
            assert rel < 1e-3, f"distillation-loss gradient off by {rel}"

        # focal loss wrt the probability map
        for gamma in (0.0, 2.0):
            p = torch.tensor(rng.uniform(0.2, 0.8, size=(4, 4, 8)), requires_grad=True)
            t = torch.tensor(rng.integers(0, 2, size=(4, 4, 8)).astype(np.float64))
            cfg = FocalLossConfig(gamma=gamma)
            focal_loss(p, t, cfg).backward()
            analytic = p.grad.clone()
            fd = _fd_gradient(lambda: focal_loss(p, t, cfg), p)
            rel = float((analytic - fd).abs().max()) / max(float(analytic.abs().max()), 1e-12)
            assert rel < 1e-3, f"focal-loss gradient off by {rel}"

        assert time.time() - started < 60.0
        ok = True
    finally:
        _line(2, "finite-difference gradient checks, rel. error < 1e-3", ok)


def test_criterion_3_composition_oracle():
    ok = False
    try:
        rng = np.random.default_rng(30)
        sizes = {4: 8, 8: 4, 16: 2}
        for trial in range(50):
            arrays = {
                site: rng.random((sizes[stride], sizes[stride]))
                for site, stride in SITE_STRIDES.items()
            }
            maps = make_site_maps(arrays)
            got = compose_stpm(maps, 8).values.numpy()
            ref = reference_composition(arrays, 8)
            assert np.abs(got - ref).max() < 1e-6

            disc_values = rng.random((8, 8))
            disc = AnomalyMap(values=torch.tensor(disc_values, dtype=torch.float32),
                              resolution="full", site=7)
            got_final = compose_final(maps, disc, 8).values.numpy()
            ref_final = reference_composition(arrays, 8, disc=disc_values)
            assert np.abs(got_final - ref_final).max() < 1e-6

            # annihilation: zeroing any one resolution pair zeroes everything
            pair = ((1, 6), (2, 5), (3, 4))[trial % 3]
            for site in pair:
                arrays[site] = np.zeros_like(arrays[site])
            dead = compose_stpm(make_site_maps(arrays), 8).values
            assert dead.abs().max() == 0.0
        ok = True
    finally:
        _line(3, "composition matches per-pixel brute force (1e-6); annihilation exact", ok)


def test_criterion_4_metric_oracles():
    ok = False
    try:
        rng = np.random.default_rng(40)
        # 200 random ROC instances vs the O(n^2) Mann-Whitney oracle
        for trial in range(200):
            n = int(rng.integers(10, 60))
            scores = rng.normal(size=n)
            if trial % 4 == 0:
                scores = np.round(scores, 1)  # tie-heavy instances
            labels = rng.integers(0, 2, size=n)
            if labels.sum() in (0, n):
                labels[0] = 1 - labels[0]
            got = roc_auc(scores, labels)
            assert abs(got - pairwise_auc_oracle(scores, labels)) < 1e-9
            # monotone-rescaling invariance
            assert abs(roc_auc(np.exp(scores), labels) - got) < 1e-9

        # PRO vs the exhaustive-threshold oracle on 16x16 multi-region instances
        for _ in range(10):
            maps, masks = [], []
            for _ in range(2):
                mask = np.zeros((16, 16))
                for _ in range(int(rng.integers(2, 4))):
                    ci, cj = rng.integers(2, 14, size=2)
                    mask[max(0, ci - 1):ci + 2, max(0, cj - 1):cj + 2] = 1
                amap = rng.random((16, 16)) + rng.uniform(0.3, 1.2) * mask
                masks.append(mask)
                maps.append(amap)
            got = pro_score(maps, masks)
            assert abs(got - exhaustive_pro_oracle(maps, masks)) < 1e-6
            rescaled = [np.exp(1.5 * m) for m in maps]
            assert abs(pro_score(rescaled, masks) - got) < 1e-9
        ok = True
    finally:
        _line(4, "ROC vs pairwise oracle (1e-9); PRO vs exhaustive oracle (1e-6); invariances", ok)


def test_criterion_5_pseudo_anomaly_contract():
    ok = False
    started = time.time()
    try:
        generator = PseudoAnomalyGenerator()
        sources = [
            torch.from_numpy(make_texture(seed=s, size=256)).permute(2, 0, 1).float() / 255.0
            for s in range(8)
        ]
        for seed in range(1000):
            source = sources[seed % len(sources)]
            sample = generator.sample(source, seed=seed)
            fraction = float(sample.mask.mean())
            assert 0.0 < fraction < 0.5, f"seed {seed}: mask fraction {fraction}"
            outside = ~sample.mask.bool()
            assert torch.equal(sample.image[:, outside], source[:, outside]), \
                f"seed {seed}: outside-mask pixels differ"
            again = generator.sample(source, seed=seed)
            assert torch.equal(sample.image, again.image) and torch.equal(sample.mask, again.mask), \
                f"seed {seed}: not deterministic"
        elapsed = time.time() - started
        assert elapsed < 120.0, f"took {elapsed:.0f}s"
        ok = True
    finally:
        _line(5, "1000 seeded samples: bit-fidelity, fraction in (0, 0.5), determinism", ok)


def test_criterion_6_frozen_weight_suite(smoke_run):
    ok = False
    try:
        cfg = smoke_run["config"]
        # teacher checksums recorded before training equal fresh rebuilds after it
        for name, variant in (("teacher1", cfg.teacher1), ("teacher2", cfg.teacher2)):
            fresh = parameter_checksum(load_teacher(variant, cfg.weights_source))
            assert fresh == smoke_run["stpm"].teacher_info[name]["checksum"], \
                f"{name} changed during distillation training"
        # every stage-1 weight group is bitwise unchanged by discriminator training
        for group in ("student1", "student2_decoder", "adapters", "attention"):
            for pname, tensor in smoke_run["stpm"].weights[group].items():
                assert torch.equal(tensor, smoke_run["full"].weights[group][pname]), \
                    f"{group}.{pname} changed during discriminator training"
        ok = True
    finally:
        _line(6, "teachers frozen through stage 1; stage-1 weights frozen through stage 2", ok)


def test_criterion_7_smoke_training(smoke_run):
    ok = False
    try:
        cfg = smoke_run["config"]
        index = smoke_run["index"]
        log_dir = smoke_run["log_dir"]

        rows = list(csv.DictReader((log_dir / "stpm_losses.csv").open()))
        epoch_totals: dict[int, float] = {}
        for row in rows:
            epoch_totals[int(row["epoch"])] = epoch_totals.get(int(row["epoch"]), 0.0) + float(row["value"])
        stpm_losses = [epoch_totals[e] for e in sorted(epoch_totals)]
        assert len(stpm_losses) == 5
        assert all(b < a for a, b in zip(stpm_losses, stpm_losses[1:])), \
            f"distillation epoch losses not strictly decreasing: {stpm_losses}"

        disc_losses = [float(r["focal_loss"]) for r in csv.DictReader((log_dir / "disc_losses.csv").open())]
        assert len(disc_losses) == 5
        assert all(b < a for a, b in zip(disc_losses, disc_losses[1:])), \
            f"focal epoch losses not strictly decreasing: {disc_losses}"

        # the trained head scores pseudo-anomalous pixels above normal ones
        models, disc = rebuild_models(smoke_run["full"])
        generator = PseudoAnomalyGenerator(
            periods=cfg.perlin_periods,
            threshold_scale=cfg.mask_threshold_scale,
            beta_range=(cfg.beta_min, cfg.beta_max),
        )
        sources = load_images(index.train_paths[:8], cfg.image_size)
        samples = [generator.sample(sources[i], seed=424_242 + i) for i in range(len(sources))]
        images = torch.stack([s.image for s in samples])
        masks = torch.stack([s.mask for s in samples])
        with torch.no_grad():
            sums = pair_sum_maps(models, normalize_images(images))
            prob = disc(stack_inputs(sums, cfg.image_size))[:, 0]
        anomalous_mean = float(prob[masks.bool()].mean())
        normal_mean = float(prob[~masks.bool()].mean())
        assert anomalous_mean > normal_mean, \
            f"no separation: anomalous {anomalous_mean:.4f} vs normal {normal_mean:.4f}"
        ok = True
    finally:
        _line(7, "smoke training: losses strictly decrease; head separates pseudo-anomalies", ok)


FULL_RUN_ENV = "MVTEC_ROOT"


@pytest.mark.skipif(
    not os.environ.get(FULL_RUN_ENV),
    reason=f"optional full-scale reproduction; set {FULL_RUN_ENV} to an MVTec root "
           f"(needs pretrained weights and hours of compute)",
)
def test_criterion_8_scaled_reproduction():
    ok = False
    try:
        from distillad.pipeline import evaluate, train_discriminator, train_stpm

        root = os.environ[FULL_RUN_ENV]
        results = {}
        for category in ("grid", "bottle"):
            cfg = TrainConfig(category=category, data_root=root,
                              device=os.environ.get("DISTILLAD_DEVICE", "auto"))
            index = scan_mvtec(root, category, cfg.image_size)
            stpm = train_stpm(cfg, index)
            full = train_discriminator(cfg, stpm, index)
            report = evaluate(full, index, mode="full")
            results[category] = report
            assert report.pixel_auroc >= 0.97, f"{category}: pixel AUROC {report.pixel_auroc:.4f}"
            assert report.image_auroc >= 0.97, f"{category}: image AUROC {report.image_auroc:.4f}"
        ok = True
        for category, report in results.items():
            print(f"  {category}: pixel {report.pixel_auroc:.4f} image {report.image_auroc:.4f} "
                  f"pro {report.pro:.4f}")
    finally:
        _line(8, "scaled-down reproduction on grid + bottle (pixel/image AUROC >= 0.97)", ok)
