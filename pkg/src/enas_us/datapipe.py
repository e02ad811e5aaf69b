"""ROI image ingestion, augmentation, resizing and leakage-safe splits."""

from __future__ import annotations

import csv
import enum
import hashlib
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError


class Label(enum.IntEnum):
    BENIGN = 0
    MALIGNANT = 1


POSITIVE_LABEL = Label.MALIGNANT


class Provenance(enum.Enum):
    ORIGINAL = "original"
    MIRROR = "mirror"
    ROT90 = "rot90"
    ROT180 = "rot180"
    ROT270 = "rot270"
    SVD45 = "svd45"
    SVD35 = "svd35"
    SVD25 = "svd25"


SVD_RATIOS = {0.45: Provenance.SVD45, 0.35: Provenance.SVD35, 0.25: Provenance.SVD25}
AUGMENTATIONS = (Provenance.MIRROR, Provenance.ROT90, Provenance.ROT180, Provenance.ROT270,
                 Provenance.SVD45, Provenance.SVD35, Provenance.SVD25)
IMAGE_SUFFIXES = (".png", ".pgm")


class DatasetError(Exception):
    pass


class UnreadableImageError(DatasetError):
    pass


class NonGrayscaleError(DatasetError):
    pass


class EmptyClassError(DatasetError):
    pass


@dataclass(frozen=True, eq=False)
class RoiImage:
    pixels: np.ndarray
    label: Label
    source_id: str
    provenance: Provenance = Provenance.ORIGINAL

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2 or min(px.shape) < 2:
            raise ValueError(f"{self.source_id}: expected an HxW grid with H, W >= 2, got shape {px.shape}")
        if px.dtype != np.uint8:
            raise ValueError(f"{self.source_id}: pixels must be uint8, got {px.dtype}")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)


# -- loading -----------------------------------------------------------------

def load_dataset(root: str | Path, convert: bool = False) -> list[RoiImage]:
    """Read ``root/benign`` and ``root/malignant``, ordered by relative path."""
    root = Path(root)
    images = []
    for label in Label:
        class_dir = root / label.name.lower()
        files = sorted(p for p in class_dir.glob("*") if p.suffix.lower() in IMAGE_SUFFIXES) \
            if class_dir.is_dir() else []
        if not files:
            raise EmptyClassError(f"class {label.name.lower()} has no images")
        for path in files:
            images.append(RoiImage(read_grayscale(path, convert), label, path.relative_to(root).as_posix()))
    images.sort(key=lambda im: im.source_id)
    return images


def read_grayscale(path: Path, convert: bool = False) -> np.ndarray:
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode != "L":
                if not convert:
                    raise NonGrayscaleError(f"{path}: mode {img.mode} is not 8-bit grayscale")
                # ITU-R 601 luma weights
                img = img.convert("L")
            return np.array(img, dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise UnreadableImageError(f"{path}: {exc}") from None


def write_dataset(images: Iterable[RoiImage], root: str | Path) -> None:
    """Write originals as ``root/<label>/<name>.png`` using each source_id's file name."""
    root = Path(root)
    for im in images:
        path = root / im.label.name.lower() / Path(im.source_id).name
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.asarray(im.pixels)).save(path.with_suffix(".png"))


def fingerprint(images: Sequence[RoiImage]) -> dict:
    digest = hashlib.sha256()
    for im in sorted(images, key=lambda i: (i.source_id, i.provenance.value)):
        digest.update(im.source_id.encode())
        digest.update(im.provenance.value.encode())
        digest.update(np.ascontiguousarray(im.pixels).tobytes())
    counts = {label.name.lower(): sum(im.label is label for im in images) for label in Label}
    return {"count": len(images), "per_class": counts, "sha256": digest.hexdigest()}


# -- augmentation ------------------------------------------------------------

def mirror(img: RoiImage) -> RoiImage:
    return replace(img, pixels=np.ascontiguousarray(img.pixels[:, ::-1]), provenance=Provenance.MIRROR)


_ROTATIONS = {90: Provenance.ROT90, 180: Provenance.ROT180, 270: Provenance.ROT270}


def rotate(img: RoiImage, degrees: int) -> RoiImage:
    """Counter-clockwise lattice rotation."""
    if degrees not in _ROTATIONS:
        raise ValueError(f"rotation must be one of 90, 180, 270 degrees, got {degrees}")
    return replace(img, pixels=np.ascontiguousarray(np.rot90(img.pixels, degrees // 90)),
                   provenance=_ROTATIONS[degrees])


def svd_rank(shape: tuple[int, int], ratio: float) -> int:
    if not 0 < ratio <= 1:
        raise ValueError(f"SVD ratio must lie in (0, 1], got {ratio}")
    # the small epsilon keeps e.g. 0.35 * 20 from rounding up to 8
    return max(1, math.ceil(ratio * min(shape) - 1e-9))


def low_rank(pixels: np.ndarray, rank: int) -> np.ndarray:
    """Float reconstruction from the top ``rank`` singular values."""
    u, s, vt = np.linalg.svd(np.asarray(pixels, dtype=np.float64), full_matrices=False)
    return (u[:, :rank] * s[:rank]) @ vt[:rank]


def svd_truncate(img: RoiImage, ratio: float) -> RoiImage:
    rank = svd_rank(img.pixels.shape, ratio)
    approx = low_rank(img.pixels, rank)
    pixels = np.clip(np.rint(approx), 0, 255).astype(np.uint8)
    provenance = next((p for r, p in SVD_RATIOS.items() if math.isclose(r, ratio)), img.provenance)
    return replace(img, pixels=pixels, provenance=provenance)


def augment_all(img: RoiImage) -> list[RoiImage]:
    if img.provenance is not Provenance.ORIGINAL:
        raise ValueError(f"{img.source_id}: only ORIGINAL images are augmented, got {img.provenance.name}")
    out = [mirror(img), rotate(img, 90), rotate(img, 180), rotate(img, 270)]
    out += [svd_truncate(img, r) for r in SVD_RATIOS]
    return out


def expand(images: Iterable[RoiImage], augment: bool = True) -> list[RoiImage]:
    """Originals followed by their seven variants (when ``augment``)."""
    out = []
    for im in images:
        out.append(im)
        if augment:
            out.extend(augment_all(im))
    return out


# -- resizing ----------------------------------------------------------------

def _cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    return np.where(
        x <= 1, (a + 2) * x ** 3 - (a + 3) * x ** 2 + 1,
        np.where(x < 2, a * x ** 3 - 5 * a * x ** 2 + 8 * a * x - 4 * a, 0.0),
    )


def _bicubic_matrix(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centres: src = (dst + 0.5) * n_in / n_out - 0.5
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    base = np.floor(src).astype(int)
    weights = np.zeros((n_out, n_in))
    for offset in range(-1, 3):
        idx = base + offset
        w = _cubic(src - idx)
        np.add.at(weights, (np.arange(n_out), np.clip(idx, 0, n_in - 1)), w)
    return weights


def resize_bicubic(img: RoiImage, side: int = 100) -> RoiImage:
    """Separable Catmull-Rom (a = -0.5) resampling with clamped edges."""
    px = np.asarray(img.pixels, dtype=np.float64)
    rows = _bicubic_matrix(px.shape[0], side)
    cols = _bicubic_matrix(px.shape[1], side)
    out = rows @ px @ cols.T
    return replace(img, pixels=np.clip(np.rint(out), 0, 255).astype(np.uint8))


# -- splits ------------------------------------------------------------------

def _by_class(items: Iterable[tuple[str, Label]]) -> dict[Label, list[str]]:
    groups: dict[Label, list[str]] = {label: [] for label in Label}
    for source_id, label in items:
        groups[Label(label)].append(source_id)
    return {label: sorted(ids) for label, ids in groups.items()}


def stratified_folds(dataset: Sequence[RoiImage], k: int = 5, seed: int = 0) -> dict[str, int]:
    """Per-class shuffle, then one round-robin over the classes in turn.

    The deal continues across classes, so per-class fold sizes differ by at
    most one and total fold sizes do too.
    """
    if any(im.provenance is not Provenance.ORIGINAL for im in dataset):
        raise ValueError("folds are assigned to ORIGINAL sources only")
    groups = _by_class((im.source_id, im.label) for im in dataset)
    rng = np.random.default_rng(seed)
    assignment = {}
    cursor = 0
    for label in Label:
        ids = groups[label]
        if len(ids) < k:
            raise ValueError(f"class {label.name.lower()} has {len(ids)} sources, fewer than k={k}")
        for pos in rng.permutation(len(ids)):
            assignment[ids[pos]] = cursor % k
            cursor += 1
    return dict(sorted(assignment.items()))


def split_validation(training: Sequence[tuple[str, Label]], fraction: float = 0.10,
                     seed: int = 0) -> tuple[list[str], list[str]]:
    """Stratified hold-out of ``ceil(fraction * n_class)`` sources per class."""
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    groups = _by_class(training)
    rng = np.random.default_rng(seed)
    train, val = [], []
    for label in Label:
        ids = groups[label]
        if len(ids) < 2:
            raise ValueError(f"class {label.name.lower()} has {len(ids)} training sources; need at least 2")
        n_val = math.ceil(fraction * len(ids) - 1e-9)
        order = rng.permutation(len(ids))
        val += [ids[i] for i in order[:n_val]]
        train += [ids[i] for i in order[n_val:]]
    return sorted(train), sorted(val)


# -- synthetic data and the augmented-set manifest ---------------------------

def synthetic_stripes(n: int, side: int = 16, seed: int = 0, noise: float = 20.0) -> list[RoiImage]:
    """Two-class texture set: horizontal stripes are BENIGN, vertical are MALIGNANT."""
    rng = np.random.default_rng(seed)
    images = []
    for i in range(n):
        label = Label(i % 2)
        period = int(rng.integers(2, 5))
        phase = int(rng.integers(0, period))
        lo, hi = rng.uniform(30, 90), rng.uniform(160, 230)
        wave = np.where((np.arange(side) + phase) % period < period / 2, hi, lo)
        grid = np.tile(wave[:, None], (1, side)) if label is Label.BENIGN else np.tile(wave[None, :], (side, 1))
        grid = grid + rng.normal(0, noise, size=grid.shape)
        pixels = np.clip(np.rint(grid), 0, 255).astype(np.uint8)
        images.append(RoiImage(pixels, label, f"{label.name.lower()}/img{i:04d}.png"))
    return images


MANIFEST_COLUMNS = ("source_id", "provenance", "label", "fold", "file_path")


def write_augmented_set(originals: Sequence[RoiImage], folds: dict[str, int], out_dir: str | Path,
                        side: int | None = 100) -> Path:
    """Augment every original, resize, write PNGs and ``manifest.csv``."""
    out_dir = Path(out_dir)
    rows = []
    for im in expand(originals):
        if side is not None:
            im = resize_bicubic(im, side)
        stem = Path(im.source_id).with_suffix("").as_posix()
        rel = Path("images") / f"{stem}__{im.provenance.value}.png"
        (out_dir / rel).parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.asarray(im.pixels)).save(out_dir / rel)
        rows.append((im.source_id, im.provenance.value, im.label.name.lower(), folds[im.source_id], rel.as_posix()))
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        writer.writerows(rows)
    return manifest


def read_augmented_set(out_dir: str | Path) -> tuple[list[RoiImage], dict[str, int]]:
    out_dir = Path(out_dir)
    manifest = out_dir / "manifest.csv"
    if not manifest.is_file():
        raise DatasetError(f"{manifest}: augmented-set manifest not found")
    images, folds = [], {}
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            pixels = read_grayscale(out_dir / row["file_path"])
            images.append(RoiImage(pixels, Label[row["label"].upper()], row["source_id"],
                                   Provenance(row["provenance"])))
            folds[row["source_id"]] = int(row["fold"])
    return images, folds


def fold_of(img: RoiImage, folds: dict[str, int]) -> int:
    return folds[img.source_id]
