"""Feature pyramids, the six distillation sites, and the matching loss.

Walks through the model zoo offline (seeded-random teacher weights): both
teacher pyramids, both students, the one-channel attention bridge, and the
per-site loss breakdown that training minimizes.
"""

import torch

from distillad import (
    extract_pyramid,
    init_student1,
    init_student2,
    load_teacher,
    total_loss,
)

# Two frozen teachers. Use weights_source="imagenet" for real detection
# quality; "random:<seed>" keeps this demo self-contained and offline.
teacher1 = load_teacher("resnet18", "random:0")
teacher2 = load_teacher("resnet50", "random:1")

x = torch.randn(2, 3, 256, 256)
p1 = extract_pyramid(teacher1, x)
p2 = extract_pyramid(teacher2, x)

print("teacher1 (18-layer) pyramid, strides 4/8/16 plus the stride-32 bottleneck:")
for level, stride in zip(p1.levels, (4, 8, 16, 32)):
    print(f"  stride {stride:>2}: {tuple(level.shape)}")

print("teacher2 (50-layer) pyramid, strides 4/8/16:")
for level, stride in zip(p2.levels, (4, 8, 16)):
    print(f"  stride {stride:>2}: {tuple(level.shape)}")

# Student 1 mirrors teacher1's topology and is trained from scratch.
student1 = init_student1(seed=0)
s1 = student1(x)
print("student1 pyramid:", [tuple(l.shape) for l in s1.levels])

# Student 2 decodes the teacher-1 bottleneck back up to stride 4. Each
# decoder level is gated by a one-channel attention map computed from the
# matching (detached) teacher-2 feature, then projected to teacher-2 widths.
student2 = init_student2(seed=0)
attentions = student2.compute_attentions(p2.levels)
print("attention maps (decode order 16/8/4):",
      [(a.level, tuple(a.values.shape)) for a in attentions])
s2 = student2(p1.levels[3], attentions)
print("student2 adapted pyramid:", [tuple(l.shape) for l in s2.levels])

# The six (teacher, student) pairs in site order: 1-3 from pair one at
# strides 4/8/16, 4-6 from the reconstruction pair at strides 16/8/4.
pairs = [
    (p1.levels[0], s1.levels[0]),
    (p1.levels[1], s1.levels[1]),
    (p1.levels[2], s1.levels[2]),
    (p2.levels[2], s2.levels[2]),
    (p2.levels[1], s2.levels[1]),
    (p2.levels[0], s2.levels[0]),
]
breakdown = total_loss(pairs)
print("\nper-site losses (each bounded by 2 on unit-normalized features):")
for site, value in enumerate(breakdown.per_site.tolist(), start=1):
    print(f"  site {site}: {value:.4f}")
print(f"total: {float(breakdown.total):.4f} (bounded by 12)")

# With students equal to their teachers the loss vanishes identically.
perfect = [(t, t.clone()) for t, _ in pairs]
print("perfect-distillation total:", float(total_loss(perfect).total))
