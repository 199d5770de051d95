"""Datasets: IDX ingestion, synthetic Gaussian blobs, label noise, splits.

A :class:`Dataset` keeps its features and labels as arrays; the per-example
view (:class:`Example`) is available through iteration.  Every generator
here is a pure function of its arguments and seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ContractViolation

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Base class for malformed IDX input."""


class BadMagicError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


@dataclass(frozen=True)
class Example:
    x: np.ndarray
    y: int


@dataclass(frozen=True, eq=False)
class Dataset:
    """Labelled examples stored column-wise.

    ``x`` has shape (n, input_dim), ``y`` holds integer labels in
    ``[0, num_classes)``.  ``noise_mask[i]`` is True when label ``i`` was
    corrupted by :func:`inject_label_noise`.
    """

    x: np.ndarray
    y: np.ndarray
    num_classes: int
    provenance: str = "synthetic"
    noise_mask: Optional[np.ndarray] = None
    input_dim: int = field(init=False)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim != 2:
            raise ContractViolation(f"features must be 2-D, got shape {x.shape}")
        y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if y.shape[0] != x.shape[0]:
            raise ContractViolation(f"{x.shape[0]} feature rows but {y.shape[0]} labels")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ContractViolation(f"labels must lie in [0, {self.num_classes})")
        if not np.isfinite(x).all():
            raise ContractViolation("features must be finite")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "input_dim", x.shape[1])
        if self.noise_mask is not None:
            mask = np.asarray(self.noise_mask, dtype=bool)
            if mask.shape != y.shape:
                raise ContractViolation("noise_mask length must equal the number of examples")
            object.__setattr__(self, "noise_mask", mask)

    def __len__(self):
        return self.y.shape[0]

    def __iter__(self):
        for xi, yi in zip(self.x, self.y):
            yield Example(xi, int(yi))

    @property
    def examples(self):
        return list(self)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        mask = None if self.noise_mask is None else self.noise_mask[idx]
        return replace(self, x=self.x[idx], y=self.y[idx], noise_mask=mask)


# ---------------------------------------------------------------------- IDX


def _read_idx(path, magic, what):
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes is too short for an IDX {what} header")
    found, count = struct.unpack(">II", raw[:8])
    if found != magic:
        raise BadMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = int(np.prod(dims))
    body = raw[header:]
    if len(body) < need:
        raise TruncatedFileError(f"{path}: expected {need} data bytes, found {len(body)}")
    data = np.frombuffer(body, dtype=np.uint8, count=need).reshape(dims)
    return count, data


def load_idx(images_path, labels_path, num_classes=None):
    """Load an IDX image/label file pair (MNIST layout).

    Pixels are scaled to [0, 1] by dividing by 255 and flattened per image.
    """
    n_img, images = _read_idx(images_path, IDX_IMAGES_MAGIC, "image")
    n_lab, labels = _read_idx(labels_path, IDX_LABELS_MAGIC, "label")
    if n_img != n_lab:
        raise CountMismatchError(f"{n_img} images but {n_lab} labels")
    x = images.reshape(n_img, int(np.prod(images.shape[1:]))).astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(y.max()) + 1 if y.size else 1
    return Dataset(x, y, num_classes, provenance=str(images_path))


def write_idx(images, labels, images_path, labels_path):
    """Write uint8 images (n, rows, cols) and labels (n,) as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(
        struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes()
    )
    Path(labels_path).write_bytes(
        struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]) + labels.tobytes()
    )


# ---------------------------------------------------------------- synthetic


def synth_blobs(num_classes, input_dim, per_class, class_sep, seed):
    """Isotropic unit-variance Gaussian classes around random centres.

    Class ``k`` is centred at ``class_sep * u_k`` with ``u_k`` a random unit
    vector.  Examples are returned grouped by class.
    """
    if num_classes < 1 or input_dim < 1 or per_class < 0:
        raise ContractViolation("num_classes and input_dim must be >= 1, per_class >= 0")
    if class_sep <= 0:
        raise ContractViolation("class_sep must be positive")
    rng = np.random.default_rng(seed)
    centres = rng.standard_normal((num_classes, input_dim))
    centres /= np.linalg.norm(centres, axis=1, keepdims=True)
    centres *= class_sep
    x = np.repeat(centres, per_class, axis=0) + rng.standard_normal(
        (num_classes * per_class, input_dim)
    )
    y = np.repeat(np.arange(num_classes), per_class)
    return Dataset(x, y, num_classes, provenance="synthetic")


def inject_label_noise(dataset, p, seed):
    """Flip each label with probability ``p`` to a uniformly chosen wrong class."""
    if not 0.0 <= p <= 1.0:
        raise ContractViolation(f"noise probability must be in [0, 1], got {p}")
    k = dataset.num_classes
    if k < 2 and p > 0:
        raise ContractViolation("label noise needs at least two classes")
    rng = np.random.default_rng(seed)
    n = len(dataset)
    flip = rng.random(n) < p
    # offset in [1, k-1] never maps a label onto itself
    offset = rng.integers(1, max(k, 2), size=n)
    y = np.where(flip, (dataset.y + offset) % k, dataset.y)
    return replace(dataset, y=y, noise_mask=flip)


@dataclass(frozen=True)
class SplitSpec:
    n_train: int
    n_val: int
    n_test: int
    seed: int = 0


def split(dataset, spec):
    """Seeded permutation followed by prefix slicing into train/val/test."""
    sizes = (spec.n_train, spec.n_val, spec.n_test)
    if min(sizes) < 0:
        raise ContractViolation(f"split sizes must be nonnegative, got {sizes}")
    if sum(sizes) > len(dataset):
        raise ContractViolation(f"split {sizes} needs {sum(sizes)} examples, have {len(dataset)}")
    perm = np.random.default_rng(spec.seed).permutation(len(dataset))
    a, b = spec.n_train, spec.n_train + spec.n_val
    return (
        dataset.subset(perm[:a]),
        dataset.subset(perm[a:b]),
        dataset.subset(perm[b : b + spec.n_test]),
    )
