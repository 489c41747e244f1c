"""Image/mask datasets on disk, resizing, normalization, splitting, synthesis.

On-disk layout::

    root/manifest.csv        id,label,split   (header mandatory)
    root/images/<id>.png     8-bit RGB
    root/masks/<id>.png      8-bit grayscale, 0 = background, 255 = tumor
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from PIL import Image

from .rng import Xoshiro256
from .tensor import Tensor, resize_array

SPLITS = ("train", "test")
MANIFEST_COLUMNS = ["id", "label", "split"]


class DatasetError(ValueError):
    pass


class MissingFileError(DatasetError, FileNotFoundError):
    pass


class DimensionMismatchError(DatasetError):
    pass


class NonBinaryMaskError(DatasetError):
    pass


class DuplicateIdError(DatasetError):
    pass


class LabelMismatchError(DatasetError):
    pass


class ManifestError(DatasetError):
    pass


@dataclass
class ImageRecord:
    id: str
    image: np.ndarray
    mask: np.ndarray
    label: Optional[int] = None
    split: Optional[str] = None

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3 or self.image.dtype != np.uint8:
            raise DatasetError(f"{self.id}: image must be an (H, W, 3) uint8 array")
        if self.mask.shape != self.image.shape[:2]:
            raise DimensionMismatchError(f"{self.id}: image is {self.image.shape[:2]} but mask is {self.mask.shape}")
        if not np.isin(self.mask, (0, 255)).all():
            raise NonBinaryMaskError(f"{self.id}: mask has values other than 0 and 255")
        derived = int(bool((self.mask == 255).any()))
        if self.label is None:
            self.label = derived
        elif int(self.label) != derived:
            raise LabelMismatchError(f"{self.id}: label {self.label} disagrees with mask content ({derived})")
        if self.split is not None and self.split not in SPLITS:
            raise DatasetError(f"{self.id}: unknown split {self.split!r}")

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def target(self) -> np.ndarray:
        """Mask as a {0, 1} label map."""
        return (self.mask == 255).astype(np.int64)


@dataclass
class Dataset:
    records: list
    root: Optional[Path] = None
    manifest: Optional[Path] = None

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.id in seen:
                raise DuplicateIdError(f"duplicate record id {r.id!r}")
            seen.add(r.id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ImageRecord]:
        return iter(self.records)

    def split(self, name: str) -> list:
        return [r for r in self.records if r.split == name]

    def counts(self) -> dict:
        out = {}
        for r in self.records:
            key = (r.split, r.label)
            out[key] = out.get(key, 0) + 1
        return out


# ---------------------------------------------------------------------------
# disk I/O
# ---------------------------------------------------------------------------


def read_image(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"missing image file {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def read_mask(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"missing mask file {path}")
    with Image.open(path) as im:
        if im.mode not in ("L", "1"):
            raise NonBinaryMaskError(f"non-binary mask {path}: expected 8-bit grayscale, got mode {im.mode}")
        arr = np.asarray(im.convert("L"), dtype=np.uint8).copy()
    if not np.isin(arr, (0, 255)).all():
        bad = sorted(set(np.unique(arr).tolist()) - {0, 255})
        raise NonBinaryMaskError(f"non-binary mask {path}: values {bad[:5]}")
    return arr


def write_png(path, arr: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(arr)).save(path, format="PNG")


def load_dataset(root_dir) -> Dataset:
    """Read and validate ``manifest.csv`` plus the image and mask files it lists."""
    root = Path(root_dir)
    manifest = root / "manifest.csv"
    if not manifest.is_file():
        raise MissingFileError(f"missing manifest {manifest}")
    with open(manifest, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != MANIFEST_COLUMNS:
            raise ManifestError(f"{manifest}: header must be {','.join(MANIFEST_COLUMNS)}")
        rows = list(reader)
    ids = set()
    records = []
    for n, row in enumerate(rows, start=2):
        rid = (row.get("id") or "").strip()
        if not rid:
            raise ManifestError(f"{manifest}:{n}: empty id")
        if rid in ids:
            raise DuplicateIdError(f"{manifest}:{n}: duplicate id {rid!r}")
        ids.add(rid)
        label = (row.get("label") or "").strip()
        if label not in ("0", "1"):
            raise ManifestError(f"{manifest}:{n}: label must be 0 or 1, got {label!r}")
        split = (row.get("split") or "").strip()
        if split not in SPLITS:
            raise ManifestError(f"{manifest}:{n}: split must be train or test, got {split!r}")
        image = read_image(root / "images" / f"{rid}.png")
        mask = read_mask(root / "masks" / f"{rid}.png")
        if image.shape[:2] != mask.shape:
            raise DimensionMismatchError(f"{rid}: image is {image.shape[:2]} but mask is {mask.shape}")
        records.append(ImageRecord(rid, image, mask, int(label), split))
    records.sort(key=lambda r: r.id)
    return Dataset(records, root, manifest)


def save_dataset(dataset: Dataset, root_dir) -> Dataset:
    """Write records as PNGs plus the manifest (written last)."""
    root = Path(root_dir)
    for r in dataset.records:
        if r.split is None:
            raise DatasetError(f"{r.id}: record has no split assigned")
        write_png(root / "images" / f"{r.id}.png", r.image)
        write_png(root / "masks" / f"{r.id}.png", r.mask)
    with open(root / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in sorted(dataset.records, key=lambda r: r.id):
            writer.writerow([r.id, r.label, r.split])
    return Dataset(sorted(dataset.records, key=lambda r: r.id), root, root / "manifest.csv")


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------


def resize_image(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear (half-pixel centers) resize of an 8-bit RGB image, rounded back to 8 bits."""
    chw = image.transpose(2, 0, 1).astype(np.float32)
    out = resize_array(chw, out_h, out_w)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8).transpose(1, 2, 0).copy()


def nearest_indices(in_size: int, out_size: int) -> np.ndarray:
    idx = np.floor((np.arange(out_size) + 0.5) * (in_size / out_size)).astype(np.int64)
    return np.minimum(idx, in_size - 1)


def resize_mask(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize; output stays binary."""
    return mask[np.ix_(nearest_indices(mask.shape[0], out_h), nearest_indices(mask.shape[1], out_w))]


def resize_record(record: ImageRecord, out_h: int, out_w: int) -> ImageRecord:
    if out_h < 1 or out_w < 1:
        raise ValueError(f"resize target must be at least 1x1, got {out_h}x{out_w}")
    image = resize_image(record.image, out_h, out_w)
    mask = resize_mask(record.mask, out_h, out_w)
    return ImageRecord(record.id, image, mask, None, record.split)


def normalize(image: np.ndarray) -> Tensor:
    """Map an (H, W, 3) 8-bit image to a (1, 3, H, W) float tensor in [-1, 1]."""
    x = image.astype(np.float32).transpose(2, 0, 1)[None] / 127.5 - 1.0
    return Tensor(np.ascontiguousarray(x, dtype=np.float32))


def stack_batch(records) -> tuple:
    """``(inputs, targets)`` for a list of equally sized records."""
    x = np.concatenate([normalize(r.image).data for r in records], axis=0)
    y = np.stack([r.target for r in records], axis=0)
    return x, y


def stratified_split(dataset: Dataset, train_fraction: float, seed: int) -> Dataset:
    """Assign train/test so each class keeps roughly ``train_fraction`` in train.

    The total train count is ``round(train_fraction * N)``; per-class counts are
    floors of the ideal share with the leftovers handed out by largest remainder.
    """
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    by_class = {0: [], 1: []}
    for r in dataset.records:
        by_class[r.label].append(r)
    for label, recs in by_class.items():
        if not recs:
            raise DatasetError(f"class {label} has no records")
    return Dataset(_assign_splits(dataset.records, train_fraction, seed), dataset.root, dataset.manifest)


def _assign_splits(records, train_fraction, seed) -> list:
    classes = sorted({r.label for r in records})
    members = {c: sorted((r for r in records if r.label == c), key=lambda r: r.id) for c in classes}
    ideal = {c: train_fraction * len(members[c]) for c in classes}
    take = {c: math.floor(ideal[c]) for c in classes}
    total = round(train_fraction * len(records))
    for c in sorted(classes, key=lambda c: (-(ideal[c] - take[c]), c)):
        if sum(take.values()) >= total:
            break
        if take[c] < len(members[c]):
            take[c] += 1
    rng = Xoshiro256(seed)
    assigned = {}
    for c in classes:
        order = rng.permutation(len(members[c]))
        for rank, i in enumerate(order):
            assigned[members[c][i].id] = "train" if rank < take[c] else "test"
    return [replace(r, split=assigned[r.id]) for r in records]


# ---------------------------------------------------------------------------
# synthetic histology-like images
# ---------------------------------------------------------------------------

# eosin-stained stroma: light pink; basophilic tumor nests: blue-violet
STROMA_RGB = np.array([232.0, 176.0, 204.0])
NEST_RGB = np.array([104.0, 72.0, 158.0])


@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    a: float
    b: float
    angle: float

    def contains(self, x, y):
        """Membership of points (pixel-center coordinates)."""
        dx, dy = x - self.cx, y - self.cy
        c, s = math.cos(self.angle), math.sin(self.angle)
        u = (dx * c + dy * s) / self.a
        v = (-dx * s + dy * c) / self.b
        return u * u + v * v <= 1.0


def ellipse_union_mask(ellipses, height: int, width: int) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width]
    inside = np.zeros((height, width), dtype=bool)
    for e in ellipses:
        inside |= e.contains(xs + 0.5, ys + 0.5)
    return np.where(inside, 255, 0).astype(np.uint8)


def _value_noise(rng, height, width, cell) -> np.ndarray:
    gh, gw = max(2, height // cell + 1), max(2, width // cell + 1)
    grid = rng.uniform(-1.0, 1.0, size=(gh, gw))
    return resize_array(grid, height, width)


def synth_sample(rng: np.random.Generator, height: int, width: int, positive: bool) -> tuple:
    """One synthetic ``(image, mask, ellipses)`` triple."""
    texture = 0.65 * _value_noise(rng, height, width, 24) + 0.35 * _value_noise(rng, height, width, 8)
    img = STROMA_RGB[:, None, None] + np.array([14.0, 22.0, 16.0])[:, None, None] * texture[None]
    img = img + rng.normal(0.0, 7.0, size=(3, height, width))
    ellipses = []
    if positive:
        short = min(height, width)
        for _ in range(int(rng.integers(1, 5))):
            ellipses.append(
                Ellipse(
                    cx=float(rng.uniform(0, width)),
                    cy=float(rng.uniform(0, height)),
                    a=float(rng.uniform(0.08, 0.25) * short),
                    b=float(rng.uniform(0.08, 0.25) * short),
                    angle=float(rng.uniform(0, math.pi)),
                )
            )
    mask = ellipse_union_mask(ellipses, height, width)
    if ellipses:
        inside = mask == 255
        nest_texture = _value_noise(rng, height, width, 6)
        nest = NEST_RGB[:, None, None] + np.array([18.0, 14.0, 20.0])[:, None, None] * nest_texture[None]
        nest = nest + rng.normal(0.0, 18.0, size=(3, height, width))
        img = np.where(inside[None], nest, img)
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8).transpose(1, 2, 0).copy()
    return image, mask, ellipses


def synth_records(count: int, positive_fraction: float = 0.48, width: int = 192, height: int = 144, seed: int = 42, train_fraction: float = 0.8) -> list:
    if count < 1:
        raise ValueError("count must be >= 1")
    if not 0 <= positive_fraction <= 1:
        raise ValueError(f"positive_fraction must be in [0, 1], got {positive_fraction}")
    if width < 16 or height < 16 or width % 16 or height % 16:
        raise ValueError(f"width and height must be positive multiples of 16, got {width}x{height}")
    n_pos = round(count * positive_fraction)
    order = Xoshiro256(seed).permutation(count)
    positive = set(order[:n_pos])
    records = []
    for i in range(count):
        rng = np.random.Generator(np.random.PCG64([seed, i]))
        image, mask, _ = synth_sample(rng, height, width, i in positive)
        records.append(ImageRecord(f"synth_{i:05d}", image, mask))
    return _assign_splits(records, train_fraction, seed)


def synth_generate(out_dir, count: int, positive_fraction: float = 0.48, width: int = 192, height: int = 144, seed: int = 42, train_fraction: float = 0.8) -> Dataset:
    """Write a deterministic synthetic dataset to ``out_dir`` and return it.

    Exactly ``round(count * positive_fraction)`` images contain 1 to 4 tumor
    ellipses with semi-axes between 8% and 25% of the shorter side. The same
    seed always produces the same PNG bytes.
    """
    records = synth_records(count, positive_fraction, width, height, seed, train_fraction)
    return save_dataset(Dataset(records), out_dir)
