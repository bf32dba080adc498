"""Datasets: IDX and CSV loaders, synthetic generators, augmentation."""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attacks import IMAGE_RANGE, UNBOUNDED
from .errors import ConfigError, FormatError, InputError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Inputs ``N x ...`` with integer labels.

    Image data is stored as ``N x C x H x W`` with values in [0, 1]; tabular
    data as ``N x D`` and is unbounded.
    """

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    provenance: str = ""

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise InputError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InputError(f"labels must lie in [0, {self.num_classes})")
        if self.is_image and self.inputs.size and (self.inputs.min() < 0 or self.inputs.max() > 1):
            raise InputError("image values must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    @property
    def is_image(self) -> bool:
        return self.inputs.ndim == 4

    @property
    def value_range(self) -> tuple:
        return IMAGE_RANGE if self.is_image else UNBOUNDED

    @property
    def input_shape(self) -> tuple:
        return tuple(self.inputs.shape[1:])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices)
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes, f"{self.provenance}[subset]")

    def astype(self, dtype) -> "Dataset":
        return Dataset(self.inputs.astype(dtype), self.labels, self.num_classes, self.provenance)


def iterate_batches(n: int, batch_size: int, rng=None, drop_last: bool = True):
    """Yield index arrays; shuffled when ``rng`` is given."""
    order = np.arange(n) if rng is None else np.random.default_rng(rng).permutation(n)
    stop = n - n % batch_size if drop_last else n
    for start in range(0, stop, batch_size):
        yield order[start:start + batch_size]


# ---------------------------------------------------------------------------
# IDX


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, ndims: int, what: str):
    header = 4 + 4 * ndims
    if len(raw) < header:
        raise FormatError(f"{what}: truncated header, need {header} bytes, got {len(raw)}", offset=len(raw))
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{what}: bad magic 0x{found:08x}, expected 0x{magic:08x}", offset=0)
    dims = struct.unpack(f">{ndims}I", raw[4:header])
    expected = header + int(np.prod(dims))
    if len(raw) < expected:
        raise FormatError(f"{what}: truncated payload, expected {expected} bytes, got {len(raw)}", offset=len(raw))
    if len(raw) > expected:
        raise FormatError(f"{what}: {len(raw) - expected} trailing bytes", offset=expected)
    data = np.frombuffer(raw, dtype=np.uint8, count=expected - header, offset=header)
    return data.reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Parse an IDX image file (N x H x W bytes) and its IDX label file.

    Pixels are scaled by 1/255 and stored as ``N x 1 x H x W``.
    """
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, "images")
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, "labels")
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    k = num_classes if num_classes is not None else max(int(labels.max()) + 1 if labels.size else 2, 2)
    inputs = (images.astype(np.float64) / 255.0)[:, None, :, :]
    return Dataset(inputs, labels.astype(np.int64), k, f"idx:{images_path}")


def write_idx(images, labels, images_path, labels_path) -> None:
    """Write uint8 ``N x H x W`` images and labels in IDX layout (test fixtures, demos)."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


# ---------------------------------------------------------------------------
# CSV


def load_csv(path, num_classes: int | None = None) -> Dataset:
    """Tabular data: header row, a ``label`` column, every other column a float feature."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty CSV file") from None
        header = [h.strip() for h in header]
        if "label" not in header:
            raise FormatError(f"{path}: no 'label' column in header {header}")
        li = header.index("label")
        feats, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                labels.append(int(row[li]))
                feats.append([float(v) for i, v in enumerate(row) if i != li])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    if not labels:
        raise FormatError(f"{path}: no data rows")
    labels = np.asarray(labels, dtype=np.int64)
    k = num_classes if num_classes is not None else max(int(labels.max()) + 1, 2)
    return Dataset(np.asarray(feats, dtype=np.float64), labels, k, f"csv:{path}")


def save_csv(dataset: Dataset, path) -> None:
    x = dataset.inputs.reshape(len(dataset), -1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(x.shape[1])] + ["label"])
        for row, label in zip(x, dataset.labels):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


# ---------------------------------------------------------------------------
# synthetic data


def class_means(k: int, dim: int, separation: float) -> np.ndarray:
    """Class centres with nearest-neighbour distance ``separation``.

    Uses scaled simplex vertices when ``dim >= k`` and points on a circle in
    the first two coordinates otherwise.
    """
    if dim >= k:
        return np.eye(k, dim) * (separation / np.sqrt(2.0))
    if dim < 2:
        raise ConfigError("need dim >= 2 (or dim >= k) to place class means")
    radius = separation / (2.0 * np.sin(np.pi / k))
    angles = 2 * np.pi * np.arange(k) / k
    means = np.zeros((k, dim))
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)
    return means


def synthetic_gaussians(k: int, n_per_class: int, dim: int, separation: float, seed: int) -> Dataset:
    """Unit-variance Gaussian clusters, shuffled, not range-clamped."""
    if k < 2:
        raise ConfigError("need at least 2 classes")
    if not separation > 0:
        raise ConfigError("separation must be positive")
    rng = np.random.default_rng(seed)
    means = class_means(k, dim, separation)
    labels = np.repeat(np.arange(k), n_per_class)
    inputs = means[labels] + rng.standard_normal((k * n_per_class, dim))
    order = rng.permutation(len(labels))
    return Dataset(inputs[order], labels[order], k, f"gaussians(k={k},n={n_per_class},dim={dim},sep={separation},seed={seed})")


def _blob_field(rng, bumps: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((size, size))
    for _ in range(bumps):
        cy, cx = rng.uniform(0, size, 2)
        width = rng.uniform(size / 8, size / 4)
        img += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
    return img / img.max()


def class_prototypes(k: int, size: int = 16, channels: int = 1, contrast: float = 0.5, bumps: int = 3,
                     prototype_seed: int = 0) -> np.ndarray:
    """``k x C x H x W`` class mean images in [0.15, 0.85].

    Every prototype is a shared blob field plus ``contrast`` times a
    class-specific one, so classes overlap and differ in a few regions.
    """
    rng = np.random.default_rng(prototype_seed)
    shared = np.stack([_blob_field(rng, bumps, size) for _ in range(channels)])
    protos = np.stack([shared + contrast * np.stack([_blob_field(rng, bumps, size) for _ in range(channels)])
                       for _ in range(k)])
    lo, hi = protos.min(), protos.max()
    return 0.15 + 0.7 * (protos - lo) / (hi - lo)


def synthetic_images(k: int, n_per_class: int, size: int = 16, channels: int = 1, noise: float = 0.3,
                     contrast: float = 0.5, bumps: int = 3, seed: int = 0, prototype_seed: int = 0) -> Dataset:
    """Gaussian images around fixed class prototypes, clipped to [0, 1].

    A sample is ``0.5 + g * (proto - 0.5) + noise * N(0, I)`` with a
    per-image gain ``g ~ U(0.7, 1.3)``.  Train and test splits should share
    ``prototype_seed`` and differ in ``seed``.
    """
    if k < 2:
        raise ConfigError("need at least 2 classes")
    if noise < 0:
        raise ConfigError("noise must be non-negative")
    protos = class_prototypes(k, size, channels, contrast, bumps, prototype_seed)
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(k), n_per_class)
    n = len(labels)
    gain = rng.uniform(0.7, 1.3, size=(n, 1, 1, 1))
    images = 0.5 + gain * (protos[labels] - 0.5) + noise * rng.standard_normal((n, channels, size, size))
    images = np.clip(images, 0.0, 1.0)
    order = rng.permutation(n)
    return Dataset(images[order], labels[order], k,
                   f"gaussian-images(k={k},n={n_per_class},size={size},noise={noise},contrast={contrast},"
                   f"seed={seed},prototype_seed={prototype_seed})")


# ---------------------------------------------------------------------------
# augmentation


def augment(x, rng, pad: int = 4, flip_prob: float = 0.5, offsets=None, flips=None) -> np.ndarray:
    """Reflect-pad random crop plus random horizontal flip, per image.

    ``offsets`` (``N x 2`` crop corners in the padded image) and ``flips``
    (booleans) override the random draws.
    """
    x = np.asarray(x)
    if x.ndim != 4:
        raise ConfigError(f"augmentation needs N x C x H x W images, got shape {x.shape}")
    rng = np.random.default_rng(rng)
    n, _, h, w = x.shape
    if offsets is None:
        offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    if flips is None:
        flips = rng.random(n) < flip_prob
    offsets = np.broadcast_to(np.asarray(offsets), (n, 2))
    flips = np.broadcast_to(np.asarray(flips, dtype=bool), (n,))
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect") if pad else x
    out = np.empty_like(x)
    for i in range(n):
        oy, ox = int(offsets[i, 0]), int(offsets[i, 1])
        crop = padded[i, :, oy:oy + h, ox:ox + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out
