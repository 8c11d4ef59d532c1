"""Dataset ingestion: IDX pairs, CSV tables and synthetic Gaussian blobs."""

from __future__ import annotations

import csv
import enum
import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ParseError
from .mathutils import SeedStreams

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)

    @property
    def n_classes(self):
        return int(self.y.max()) + 1

    def subset(self, idx):
        return Dataset(self.X[idx], self.y[idx])


class DataSource(str, enum.Enum):
    IDX_PAIR = "idx"
    CSV = "csv"
    SYNTH_BLOBS = "blobs"


@dataclass
class DatasetSpec:
    source: DataSource
    images: Optional[str] = None
    labels: Optional[str] = None
    path: Optional[str] = None
    centers: Optional[list] = None
    spread: float = 0.08
    per_class: int = 100
    normalize: bool = True
    clip: Optional[tuple] = None  # optional box applied to synthetic samples
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.source = DataSource(self.source)


def _read_bytes(path):
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw, expected_magic, what):
    if len(raw) < 8:
        raise ParseError(f"{what}: truncated header", len(raw))
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise ParseError(f"{what}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0)
    ndim = raw[3]
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise ParseError(f"{what}: truncated dimension header", len(raw))
    dims = struct.unpack(">" + "I" * ndim, raw[4:head])
    size = int(np.prod(dims))
    if len(raw) - head < size:
        raise ParseError(f"{what}: payload holds {len(raw) - head} bytes, header promises {size}", len(raw))
    if len(raw) - head > size:
        raise ParseError(f"{what}: {len(raw) - head - size} trailing bytes", head + size)
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=head).reshape(dims)


def load_idx(images_path, labels_path, normalize=True) -> Dataset:
    """Parse an IDX image/label pair (optionally gzipped); images are flattened row-major."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, "images")
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, "labels")
    if images.shape[0] != labels.shape[0]:
        raise ParseError(
            f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels", 4
        )
    X = images.reshape(images.shape[0], -1).astype(np.float64)
    if normalize:
        X /= 255.0
    return Dataset(X, labels.astype(np.int64))


def write_idx(images, labels, images_path, labels_path):
    """Write uint8 images (n, h, w) and labels (n,) as raw IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    for arr, path, magic in ((images, images_path, IDX_IMAGES_MAGIC), (labels, labels_path, IDX_LABELS_MAGIC)):
        head = struct.pack(">I", magic) + struct.pack(">" + "I" * arr.ndim, *arr.shape)
        Path(path).write_bytes(head + arr.tobytes())


def load_csv(path, normalize=False) -> Dataset:
    """One sample per row, label in the last column, header row required."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty CSV file", 0) from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ParseError(f"line {lineno}: expected {len(header)} fields, found {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise ParseError(f"line {lineno}: non-numeric field") from None
    if not rows:
        raise ParseError("CSV file has no samples")
    table = np.asarray(rows)
    X = table[:, :-1]
    if normalize:
        X = X / 255.0
    return Dataset(X, table[:, -1].astype(np.int64))


def save_csv(ds: Dataset, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(ds.X.shape[1])] + ["label"])
        for x, y in zip(ds.X, ds.y):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


def triangle_centers(side=0.85, origin=(0.075, 0.1)):
    """Vertices of an equilateral triangle with the given side length."""
    ox, oy = origin
    return np.array([[ox, oy], [ox + side, oy], [ox + side / 2, oy + side * np.sqrt(3) / 2]])


def synth_blobs(centers, spread, per_class, seed, clip=None) -> Dataset:
    """Isotropic Gaussian clusters, ``per_class`` samples around each centre."""
    centers = np.asarray(centers, dtype=np.float64)
    if len(centers) < 2:
        raise ValueError("need at least two classes")
    if spread <= 0:
        raise ValueError("spread must be positive")
    rng = SeedStreams(seed).get("blobs")
    X = np.vstack([c + spread * rng.standard_normal((per_class, centers.shape[1])) for c in centers])
    if clip is not None:
        X = np.clip(X, *clip)
    y = np.repeat(np.arange(len(centers)), per_class)
    return Dataset(X, y)


def load_dataset(spec: DatasetSpec, seed=0, base_dir=None) -> Dataset:
    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() or base_dir is None else Path(base_dir) / p

    if spec.source is DataSource.IDX_PAIR:
        return load_idx(resolve(spec.images), resolve(spec.labels), spec.normalize)
    if spec.source is DataSource.CSV:
        return load_csv(resolve(spec.path), spec.normalize)
    centers = spec.centers if spec.centers is not None else triangle_centers()
    return synth_blobs(centers, spec.spread, spec.per_class, seed, spec.clip)


def stratified_order(y, rng):
    """Permutation of ``range(len(y))`` interleaving classes, so any prefix is roughly balanced."""
    y = np.asarray(y)
    classes = np.unique(y)
    per_class = {c: list(rng.permutation(np.flatnonzero(y == c))) for c in classes}
    order = []
    while any(per_class.values()):
        for c in classes:
            if per_class[c]:
                order.append(per_class[c].pop())
    return np.asarray(order, dtype=np.int64)


def stratified_split(y, sizes, rng):
    """Disjoint index sets of the requested sizes, each roughly class-balanced."""
    if sum(sizes) > len(y):
        raise ValueError(f"requested {sum(sizes)} samples, only {len(y)} available")
    order = stratified_order(y, rng)
    out, start = [], 0
    for s in sizes:
        out.append(np.sort(order[start:start + s]))
        start += s
    return out
