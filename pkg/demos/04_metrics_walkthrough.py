"""ROC and per-region-overlap metrics on hand-built score maps.

Shows how pixel AUROC and PRO react differently to the same maps: AUROC
counts pixels, PRO averages coverage per connected defect region, so small
regions weigh as much as large ones.
"""

import numpy as np

from distillad import connected_components, pixel_auroc, pro_curve, pro_score, roc_auc

rng = np.random.default_rng(0)

# Image-level ROC from scores: the estimator is the Mann-Whitney statistic,
# so only the ordering of scores matters.
scores = [0.9, 0.8, 0.75, 0.4, 0.3, 0.2]
labels = [1, 1, 0, 1, 0, 0]
print("image AUROC:", roc_auc(scores, labels))
print("after monotone rescale (x^3):", roc_auc([s ** 3 for s in scores], labels))

# One 32x32 test image with two defect regions: a large blob and a tiny one.
mask = np.zeros((32, 32))
mask[4:12, 4:12] = 1          # 64 pixels
mask[24:26, 24:26] = 1        # 4 pixels
labels_map, count = connected_components(mask)
print(f"\nground truth has {count} regions of sizes",
      [int((labels_map == k).sum()) for k in range(1, count + 1)])

# A detector that nails the big region but misses the small one.
amap = rng.uniform(0, 0.2, size=(32, 32))
amap[4:12, 4:12] += 1.0
print("pixel AUROC (pixel-weighted):", round(pixel_auroc([amap], [mask]), 4))
print("PRO (region-weighted):       ", round(pro_score([amap], [mask]), 4))

# The same detector with the small region found too.
amap2 = amap.copy()
amap2[24:26, 24:26] += 1.0
print("after also finding the small region:")
print("  pixel AUROC:", round(pixel_auroc([amap2], [mask]), 4))
print("  PRO:        ", round(pro_score([amap2], [mask]), 4))

# The raw sweep behind PRO: (threshold, false-positive rate, mean overlap).
curve = pro_curve([amap2], [mask])
print("\nfirst rows of the threshold sweep:")
for threshold, fpr, overlap in curve[:5]:
    print(f"  t={threshold:.3f}  fpr={fpr:.3f}  mean overlap={overlap:.3f}")
print(f"({len(curve)} thresholds swept; integration stops at fpr = 0.3)")
