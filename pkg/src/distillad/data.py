"""MVTec-format dataset discovery and image/mask loading.

Directory convention::

    <root>/<category>/train/good/*.png
    <root>/<category>/test/<defect_type>/*.png
    <root>/<category>/ground_truth/<defect_type>/*_mask.png

Loading is deterministic and stateless: the same paths always produce
bit-identical tensors, and everything after index construction is safe
for concurrent read-only use.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .config import IMAGENET_MEAN, IMAGENET_STD
from .errors import DecodeError, LayoutError, MaskMissingError

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


@dataclass(frozen=True)
class TestItem:
    image_path: Path
    defect_type: str
    mask_path: Path | None


@dataclass
class DatasetIndex:
    """Resolved view of one MVTec category.

    ``train_paths`` contains only normal images; every test item with a
    defect type other than ``good`` carries a mask path.
    """

    category: str
    train_paths: list[Path]
    test_items: list[TestItem] = field(default_factory=list)
    image_size: int = 256

    @property
    def mask_count(self) -> int:
        return sum(1 for item in self.test_items if item.mask_path is not None)


def _list_images(directory: Path) -> list[Path]:
    return sorted(
        p for p in directory.iterdir()
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    )


def _verify_decodable(path: Path) -> None:
    try:
        with Image.open(path) as img:
            img.verify()
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"cannot decode image {path}: {exc}") from exc


def scan_mvtec(root: str | Path, category: str, image_size: int = 256) -> DatasetIndex:
    """Walk one category of an MVTec-format tree into a :class:`DatasetIndex`.

    Raises :class:`LayoutError` when a required directory is missing or the
    training split is empty, and :class:`MaskMissingError` when a defective
    test image has no ground-truth mask. Test items are ordered
    lexicographically by defect type then filename.
    """
    base = Path(root) / category
    train_dir = base / "train" / "good"
    test_dir = base / "test"
    gt_dir = base / "ground_truth"
    for required in (train_dir, test_dir, gt_dir):
        if not required.is_dir():
            raise LayoutError(f"missing directory: {required}")

    train_paths = _list_images(train_dir)
    if not train_paths:
        raise LayoutError(f"no training images under {train_dir}")
    for path in train_paths:
        _verify_decodable(path)

    test_items: list[TestItem] = []
    for defect_dir in sorted(p for p in test_dir.iterdir() if p.is_dir()):
        defect_type = defect_dir.name
        for image_path in _list_images(defect_dir):
            if defect_type == "good":
                test_items.append(TestItem(image_path, defect_type, None))
                continue
            mask_path = _find_mask(gt_dir / defect_type, image_path.stem)
            if mask_path is None:
                raise MaskMissingError(
                    f"no ground-truth mask for {image_path} "
                    f"(looked under {gt_dir / defect_type})"
                )
            test_items.append(TestItem(image_path, defect_type, mask_path))

    train_set = {p.resolve() for p in train_paths}
    overlap = [i.image_path for i in test_items if i.image_path.resolve() in train_set]
    if overlap:
        raise LayoutError(f"paths present in both train and test: {overlap[:3]}")

    return DatasetIndex(
        category=category,
        train_paths=train_paths,
        test_items=test_items,
        image_size=image_size,
    )


def _find_mask(mask_dir: Path, stem: str) -> Path | None:
    if not mask_dir.is_dir():
        return None
    for candidate in (mask_dir / f"{stem}_mask.png", mask_dir / f"{stem}.png"):
        if candidate.is_file():
            return candidate
    return None


@dataclass
class ImageBatch:
    """Channel-normalized image tensor ready for the backbones.

    ``pixels`` is ``B x 3 x H x W`` with H = W = the configured size.
    """

    pixels: torch.Tensor
    source_paths: list[Path]


def _decode_rgb(path: Path) -> torch.Tensor:
    """Decode to a 3 x H x W float tensor in [0, 1]."""
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            data = torch.frombuffer(bytearray(rgb.tobytes()), dtype=torch.uint8)
            tensor = data.view(rgb.height, rgb.width, 3).permute(2, 0, 1)
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"cannot decode image {path}: {exc}") from exc
    return tensor.float() / 255.0


def resize_bilinear(image: torch.Tensor, size: int) -> torch.Tensor:
    """Plain bilinear resampling with half-pixel centers, no antialiasing."""
    squeeze = image.dim() == 3
    if squeeze:
        image = image.unsqueeze(0)
    out = F.interpolate(image, size=(size, size), mode="bilinear", align_corners=False, antialias=False)
    return out.squeeze(0) if squeeze else out


def load_images(paths: Sequence[str | Path], size: int) -> torch.Tensor:
    """Load, resize and stack images as ``B x 3 x size x size`` in [0, 1]."""
    if size <= 0:
        raise ValueError(f"size must be positive, got {size}")
    return torch.stack([resize_bilinear(_decode_rgb(Path(p)), size) for p in paths])


def normalize_images(pixels: torch.Tensor) -> torch.Tensor:
    """Apply the backbone channel statistics to a [0, 1] image tensor."""
    mean = torch.tensor(IMAGENET_MEAN, dtype=pixels.dtype).view(1, 3, 1, 1)
    std = torch.tensor(IMAGENET_STD, dtype=pixels.dtype).view(1, 3, 1, 1)
    if pixels.dim() == 3:
        return (pixels - mean[0]) / std[0]
    return (pixels - mean) / std


def load_batch(index: DatasetIndex, paths: Sequence[str | Path], size: int | None = None) -> ImageBatch:
    """Load a batch of images referenced by the index.

    Resizes bilinearly to ``size`` (defaults to the index size), scales to
    [0, 1], then channel-normalizes with the backbone statistics.
    """
    size = index.image_size if size is None else size
    known = {Path(p) for p in index.train_paths}
    known.update(item.image_path for item in index.test_items)
    resolved = [Path(p) for p in paths]
    for p in resolved:
        if p not in known:
            raise ValueError(f"path not in index: {p}")
    pixels = normalize_images(load_images(resolved, size))
    return ImageBatch(pixels=pixels, source_paths=resolved)


def load_mask(path: str | Path, size: int) -> torch.Tensor:
    """Load a ground-truth mask as ``size x size`` float tensor in {0, 1}.

    Nearest-neighbor resize keeps the mask binary; 8-bit values above 127
    count as anomalous.
    """
    path = Path(path)
    try:
        with Image.open(path) as img:
            gray = img.convert("L")
            data = torch.frombuffer(bytearray(gray.tobytes()), dtype=torch.uint8)
            tensor = data.view(gray.height, gray.width).float()
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"cannot decode mask {path}: {exc}") from exc
    resized = F.interpolate(tensor[None, None], size=(size, size), mode="nearest-exact")[0, 0]
    return (resized > 127).float()
