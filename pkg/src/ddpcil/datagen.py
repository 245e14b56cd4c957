"""Seeded synthetic multi-label datasets and their binary file format.

Each class owns a fixed spatial prototype over the feature grid: a Gaussian
patch pattern repeated across the grid with a Gaussian per-cell perturbation. An
image's label set is drawn from a co-occurrence matrix whose diagonal holds
per-class base rates and whose off-diagonal entries are pairwise boosts: a
class already present pulls each partner in with that probability. Empty
label sets are redrawn. Features are the sum of the positive prototypes plus
Gaussian noise, rounded to float32 so files round-trip exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, UsageError, VersionError
from .numerics import Rng

DEFAULT_CONFUSABLE = ((0, 5), (3, 8), (6, 11), (9, 14), (12, 17))


def default_cooccurrence(num_classes: int = 20, base_rate: float = 0.08, boost: float = 0.3, pairs=DEFAULT_CONFUSABLE):
    m = np.zeros((num_classes, num_classes))
    np.fill_diagonal(m, base_rate)
    for a, b in pairs:
        if a < num_classes and b < num_classes:
            m[a, b] = m[b, a] = boost
    return m


@dataclass
class SyntheticSpec:
    num_classes: int = 20
    grid: tuple[int, int, int] = (8, 8, 4)
    prototype_strength: float = 1.0
    spatial_jitter: float = 0.5
    noise_std: float = 1.0
    cooccurrence: np.ndarray | None = None
    train_per_class: int = 40
    test_per_class: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.cooccurrence is None and self.num_classes > 0:
            self.cooccurrence = default_cooccurrence(self.num_classes)
        self.grid = tuple(int(g) for g in self.grid)

    def validate(self):
        if self.num_classes < 1:
            raise ConfigError("need at least one class")
        if len(self.grid) != 3 or min(self.grid) < 1:
            raise ConfigError(f"invalid feature grid {self.grid}")
        if self.noise_std < 0 or self.train_per_class < 1 or self.test_per_class < 1:
            raise ConfigError("noise_std must be >= 0 and per-class counts >= 1")
        m = np.asarray(self.cooccurrence, dtype=np.float64)
        if m.shape != (self.num_classes, self.num_classes):
            raise ConfigError("co-occurrence matrix must be num_classes x num_classes")
        if not np.allclose(m, m.T) or m.min() < 0 or m.max() > 1:
            raise ConfigError("co-occurrence matrix must be symmetric with entries in [0, 1]")
        if np.all(np.diag(m) == 0):
            raise ConfigError("at least one base rate must be positive")

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "grid": list(self.grid),
            "prototype_strength": self.prototype_strength,
            "spatial_jitter": self.spatial_jitter,
            "noise_std": self.noise_std,
            "cooccurrence": np.asarray(self.cooccurrence).tolist(),
            "train_per_class": self.train_per_class,
            "test_per_class": self.test_per_class,
            "seed": self.seed,
        }


class Dataset:
    """Feature grids with a full multi-hot label matrix.

    The protocol reads labels only through :meth:`task_labels`, which lets
    tests audit which columns were touched.
    """

    def __init__(self, split: str, features, labels, class_names):
        self.split = split
        self.features = np.asarray(features, dtype=np.float32)
        self.labels = np.asarray(labels, dtype=np.uint8)
        self.class_names = list(class_names)
        if self.features.ndim != 4 or self.labels.shape != (self.features.shape[0], len(self.class_names)):
            raise UsageError("features must be (N, rows, cols, ch) and labels (N, num_classes)")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def grid(self) -> tuple[int, int, int]:
        return tuple(self.features.shape[1:])

    def task_labels(self, classes) -> np.ndarray:
        return self.labels[:, list(classes)]

    def grids(self, indices=None) -> np.ndarray:
        f = self.features if indices is None else self.features[indices]
        return f.astype(np.float64)

    def __eq__(self, other):
        return (
            isinstance(other, Dataset)
            and self.split == other.split
            and self.class_names == other.class_names
            and np.array_equal(self.labels, other.labels)
            and self.features.tobytes() == other.features.tobytes()
        )


def _sample_labels(rng: Rng, cooc: np.ndarray) -> np.ndarray:
    base = np.diag(cooc)
    K = len(base)
    while True:
        present = rng.uniform(K) < base
        if not present.any():
            continue
        labels = present.copy()
        for a in np.flatnonzero(present):
            pull = rng.uniform(K) < cooc[a]
            pull[a] = False
            labels |= pull
        return labels


def class_prototypes(spec: SyntheticSpec, rng: Rng, patch: int = 2) -> np.ndarray:
    """One Gaussian patch pattern per class, tiled over the grid, plus a Gaussian
    spatial perturbation of relative size ``spatial_jitter``."""
    rows, cols, ch = spec.grid
    K = spec.num_classes
    if rows % patch or cols % patch:
        patch = 1
    pattern = rng.child("pattern").normal((K, patch, patch, ch))
    tiled = np.tile(pattern, (1, rows // patch, cols // patch, 1))
    field = rng.child("field").normal((K, rows, cols, ch), spec.spatial_jitter)
    return spec.prototype_strength * (tiled + field)


def spec_prototypes(spec: SyntheticSpec) -> np.ndarray:
    """The prototypes :func:`generate` uses for ``spec``."""
    return class_prototypes(spec, Rng(spec.seed).child("datagen").child("prototypes"))


def generate(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    spec.validate()
    rng = Rng(spec.seed).child("datagen")
    K = spec.num_classes
    cooc = np.asarray(spec.cooccurrence, dtype=np.float64)
    protos = spec_prototypes(spec)
    names = [f"class_{c:03d}" for c in range(K)]
    out = []
    for split, per_class in (("train", spec.train_per_class), ("test", spec.test_per_class)):
        srng = rng.child("split", split)
        n = per_class * K
        labels = np.zeros((n, K), dtype=np.uint8)
        feats = np.empty((n,) + spec.grid, dtype=np.float32)
        lrng, nrng = srng.child("labels"), srng.child("noise")
        for i in range(n):
            y = _sample_labels(lrng, cooc)
            labels[i] = y
            x = protos[y].sum(axis=0) + nrng.normal(spec.grid, spec.noise_std)
            feats[i] = x.astype(np.float32)
        out.append(Dataset(split, feats, labels, names))
    return out[0], out[1]


# --- binary dataset file ------------------------------------------------------
#
# Layout (little-endian):
#   0   8 bytes  magic b"DDPDATA\x00"
#   8   u16      version (1)
#   10  u16      reserved (0)
#   12  u32 x5   n_images, n_classes, rows, cols, channels
#   32  u32      split-name length S, then S bytes UTF-8
#   ..  f32      features, n_images * rows * cols * channels, row-major
#   ..  u8       label bitmaps, ceil(n_classes / 8) bytes per image, LSB first
#   ..  class table: per class u16 length + UTF-8 name

DATA_MAGIC = b"DDPDATA\x00"
DATA_VERSION = 1


def save_dataset(ds: Dataset, path) -> None:
    n, (r, c, ch), K = len(ds), ds.grid, ds.num_classes
    split = ds.split.encode("utf-8")
    parts = [
        DATA_MAGIC,
        struct.pack("<HH5I", DATA_VERSION, 0, n, K, r, c, ch),
        struct.pack("<I", len(split)),
        split,
        ds.features.astype("<f4").tobytes(),
        np.packbits(ds.labels.astype(bool), axis=1, bitorder="little").tobytes(),
    ]
    for name in ds.class_names:
        b = name.encode("utf-8")
        parts += [struct.pack("<H", len(b)), b]
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, section: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"truncated dataset file: missing {section}", offset=self.pos)
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out


def load_dataset(path) -> Dataset:
    rd = _Reader(Path(path).read_bytes())
    if rd.take(8, "magic") != DATA_MAGIC:
        raise FormatError("bad dataset magic", offset=0)
    version, _reserved, n, K, r, c, ch = struct.unpack("<HH5I", rd.take(24, "header"))
    if version != DATA_VERSION:
        raise VersionError(f"dataset version {version}, expected {DATA_VERSION}", offset=8)
    (slen,) = struct.unpack("<I", rd.take(4, "split name length"))
    split = rd.take(slen, "split name").decode("utf-8")
    feats = np.frombuffer(rd.take(4 * n * r * c * ch, "features"), dtype="<f4").reshape(n, r, c, ch)
    nbytes = (K + 7) // 8
    packed = np.frombuffer(rd.take(n * nbytes, "label bitmaps"), dtype=np.uint8).reshape(n, nbytes)
    labels = np.unpackbits(packed, axis=1, count=K, bitorder="little")
    names = []
    for _ in range(K):
        (ln,) = struct.unpack("<H", rd.take(2, "class table"))
        names.append(rd.take(ln, "class table").decode("utf-8"))
    if rd.pos != len(rd.raw):
        raise FormatError("trailing bytes after class table", offset=rd.pos)
    return Dataset(split, feats.astype(np.float32), labels, names)


def load_external_manifest(path) -> Dataset:
    """Ingest pre-extracted features described by a JSON index.

    The index holds ``split``, ``grid`` [rows, cols, channels], ``classes``
    (names) and ``images``: a list of ``{"file": ..., "labels": [class indices]}``
    where each file is raw little-endian float32 of the grid's size, resolved
    relative to the index.
    """
    path = Path(path)
    idx = json.loads(path.read_text())
    grid = tuple(idx["grid"])
    classes = idx["classes"]
    size = int(np.prod(grid))
    feats, labels = [], []
    for item in idx["images"]:
        raw = (path.parent / item["file"]).read_bytes()
        if len(raw) != 4 * size:
            raise FormatError(f"{item['file']}: expected {4 * size} bytes, found {len(raw)}", offset=len(raw))
        feats.append(np.frombuffer(raw, dtype="<f4").reshape(grid))
        y = np.zeros(len(classes), dtype=np.uint8)
        y[list(item["labels"])] = 1
        if not y.any():
            raise FormatError(f"{item['file']}: image without labels")
        labels.append(y)
    return Dataset(idx.get("split", "external"), np.stack(feats), np.stack(labels), classes)
