"""Synthetic two-circles-and-a-line segmentation data.

Each image is a 32 x (k*32) strip split into k square subimages. Two
subimages are drawn without replacement; each receives a filled white disc
of radius 4 that lies entirely inside it. The mask marks the discs (class 1)
and a one-pixel Bresenham segment between the two centers (class 2); disc
pixels take precedence over the segment.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io

BACKGROUND, CIRCLE, LINE = 0, 1, 2
SPLITS = ("train", "val", "test")
_SPLIT_KEY = {"train": 0, "val": 1, "test": 2}


@dataclass(frozen=True)
class DatasetSpec:
    k: int
    seed: int = 42
    train: int = 4000
    val: int = 1000
    test: int = 1000
    sub_size: int = 32
    radius: int = 4

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("need at least two subimages to place two circles")
        if 2 * self.radius + 1 > self.sub_size:
            raise ValueError("disc does not fit in a subimage")

    @property
    def height(self) -> int:
        return self.sub_size

    @property
    def width(self) -> int:
        return self.k * self.sub_size

    def count(self, split: str) -> int:
        return {"train": self.train, "val": self.val, "test": self.test}[split]


def raster_line(p0: tuple[int, int], p1: tuple[int, int]) -> list[tuple[int, int]]:
    """8-connected Bresenham line from ``p0`` to ``p1`` (both included), as (x, y) pixels."""
    x0, y0 = p0
    x1, y1 = p1
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    points = []
    while True:
        points.append((x0, y0))
        if x0 == x1 and y0 == y1:
            return points
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def disc_offsets(radius: int) -> list[tuple[int, int]]:
    r = radius
    return [(dx, dy) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if dx * dx + dy * dy <= r * r]


def generate_sample(spec: DatasetSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, list[tuple[int, int]]]:
    """One (image, mask, centers) triple; image is uint8 0/255, mask uint8 class ids."""
    s, r = spec.sub_size, spec.radius
    image = np.zeros((spec.height, spec.width), np.uint8)
    mask = np.zeros_like(image)
    cells = rng.choice(spec.k, size=2, replace=False)
    centers = []
    for cell in cells:
        origin = int(cell) * s
        cx = int(rng.integers(origin + r, origin + s - r))
        cy = int(rng.integers(r, s - r))
        centers.append((cx, cy))
    for x, y in raster_line(centers[0], centers[1]):
        mask[y, x] = LINE
    for cx, cy in centers:
        for dx, dy in disc_offsets(r):
            image[cy + dy, cx + dx] = 255
            mask[cy + dy, cx + dx] = CIRCLE
    return image, mask, centers


def sample_rng(spec: DatasetSpec, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, _SPLIT_KEY[split], index])


def generate_split(spec: DatasetSpec, split: str, count: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """In-memory split as (images uint8 (n, H, W), masks uint8 (n, H, W))."""
    n = spec.count(split) if count is None else count
    images = np.zeros((n, spec.height, spec.width), np.uint8)
    masks = np.zeros_like(images)
    for i in range(n):
        images[i], masks[i], _ = generate_sample(spec, sample_rng(spec, split, i))
    return images, masks


def generate_dataset(spec: DatasetSpec, out_dir: str | Path) -> dict:
    """Write all splits as PGM pairs plus ``meta.txt``; returns the manifest."""
    out = Path(out_dir)
    manifest = {"k": spec.k, "seed": spec.seed, "height": spec.height, "width": spec.width}
    for split in SPLITS:
        (out / split / "images").mkdir(parents=True, exist_ok=True)
        (out / split / "masks").mkdir(parents=True, exist_ok=True)
        n = spec.count(split)
        for i in range(n):
            image, mask, _ = generate_sample(spec, sample_rng(spec, split, i))
            io.write_pgm(out / split / "images" / f"{i:05}.pgm", image)
            io.write_pgm(out / split / "masks" / f"{i:05}.pgm", mask)
        manifest[split] = n
    io.write_meta(out / "meta.txt", manifest)
    return manifest


@dataclass
class Split:
    """Loaded split: float images in [0, 1] and integer masks."""

    images: np.ndarray  # (n, 1, H, W) float32
    masks: np.ndarray  # (n, H, W) int64

    def __len__(self) -> int:
        return len(self.images)


def as_split(images_u8: np.ndarray, masks_u8: np.ndarray) -> Split:
    return Split(images_u8[:, None].astype(np.float32) / np.float32(255), masks_u8.astype(np.int64))


def load_split(data_dir: str | Path, split: str) -> Split:
    base = Path(data_dir) / split
    names = sorted(p.name for p in (base / "images").glob("*.pgm"))
    if not names:
        raise FileNotFoundError(f"no images under {base / 'images'}")
    images = np.stack([io.read_pgm(base / "images" / n) for n in names])
    masks = np.stack([io.read_pgm(base / "masks" / n) for n in names])
    return as_split(images, masks)


def directory_checksum(path: str | Path) -> str:
    """SHA-256 over every file's relative path and bytes, in sorted order."""
    root = Path(path)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()
