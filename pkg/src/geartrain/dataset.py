"""Training data: CIFAR-100 binary records, the top/bottom image split and a
seeded synthetic generator.

A sample references its dense-side input by ``image_id``; the dense blobs
live in the slowgears' key-value stores, not in the sample itself.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import rng

CIFAR_RECORD = 3074
CIFAR_CLASSES = 100
IMAGE_SHAPE = (32, 32, 3)


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class SampleRecord:
    sample_id: int
    image_id: int
    sparse_input: np.ndarray
    label: int


class CifarRecord(NamedTuple):
    label: int  # fine label
    image: np.ndarray  # 32x32x3 float32 in [0, 1], rows x cols x RGB
    coarse_label: int


def parse_cifar100(data: bytes) -> list:
    if len(data) % CIFAR_RECORD:
        raise FormatError(f"{len(data)} bytes is not a whole number of {CIFAR_RECORD}-byte records")
    raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    fine = raw[:, 1]
    if raw.shape[0] and fine.max() >= CIFAR_CLASSES:
        bad = int(np.argmax(fine >= CIFAR_CLASSES))
        raise FormatError(f"record {bad}: fine label {fine[bad]} >= {CIFAR_CLASSES}")
    # channel-major planes -> rows x cols x channels
    pix = raw[:, 2:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1).astype(np.float32) / 255.0
    return [CifarRecord(int(f), np.ascontiguousarray(p), int(c)) for c, f, p in zip(raw[:, 0], fine, pix)]


def load_cifar100(path) -> list:
    with open(path, "rb") as f:
        return parse_cifar100(f.read())


def dump_cifar100(records, path=None) -> bytes:
    """Inverse of ``parse_cifar100``; writes to ``path`` when given."""
    out = bytearray()
    for rec in records:
        img = np.asarray(rec.image)
        if img.shape != IMAGE_SHAPE:
            raise FormatError(f"image shape {img.shape} != {IMAGE_SHAPE}")
        planes = np.rint(img * 255.0).astype(np.uint8).transpose(2, 0, 1)
        out += bytes([rec.coarse_label, rec.label]) + planes.tobytes()
    if path is not None:
        with open(path, "wb") as f:
            f.write(out)
    return bytes(out)


def split_top_bottom(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rows 0-15 and rows 16-31, each flattened row-major to 1536 values."""
    image = np.asarray(image)
    if image.shape != IMAGE_SHAPE:
        raise ValueError(f"expected a {IMAGE_SHAPE} image, got {image.shape}")
    return image[:16].reshape(-1).copy(), image[16:].reshape(-1).copy()


def join_top_bottom(top: np.ndarray, bottom: np.ndarray) -> np.ndarray:
    return np.concatenate([top.reshape(16, 32, 3), bottom.reshape(16, 32, 3)], axis=0)


def cifar_samples(records, limit: int | None = None):
    """Top halves become sparse inputs, bottom halves the dense blobs keyed
    by the record's ordinal."""
    samples, blobs = [], {}
    for i, rec in enumerate(records[:limit]):
        top, bottom = split_top_bottom(rec.image)
        samples.append(SampleRecord(i, i, top, rec.label))
        blobs[i] = bottom
    return samples, blobs


def synth_generate(seed: int, n: int, sparse_dim: int, dense_dim: int, num_classes: int,
                   num_images: int | None = None, class_sep: float = 0.35, noise: float = 1.0):
    """Class-conditional Gaussian samples whose class signal is split across
    both halves.

    Each class has a mean vector over ``sparse_dim + dense_dim`` features. The
    pool of ``num_images`` dense blobs (default: one per sample) cycles
    through the classes; every sample picks a blob uniformly at random, takes
    its class as the label and draws its own sparse features around that
    class's sparse-half mean. Returns (samples, {image_id: blob}).
    """
    for name, v in dict(n=n, sparse_dim=sparse_dim, dense_dim=dense_dim, num_classes=num_classes).items():
        if v < 1:
            raise ValueError(f"{name} must be >= 1")
    num_images = n if num_images is None else num_images
    if num_images < 1:
        raise ValueError("num_images must be >= 1")
    dim = sparse_dim + dense_dim
    means = rng.normal(rng.derive(seed, 1), num_classes * dim, class_sep).reshape(num_classes, dim)

    image_class = np.arange(num_images) % num_classes
    dense_noise = rng.normal(rng.derive(seed, 2), num_images * dense_dim, noise).reshape(num_images, dense_dim)
    blob_arr = (means[image_class, sparse_dim:] + dense_noise).astype(np.float32)
    blobs = {i: blob_arr[i] for i in range(num_images)}

    pick = np.floor(rng.uniform(rng.derive(seed, 3), n) * num_images).astype(np.int64)
    labels = image_class[pick]
    sparse_noise = rng.normal(rng.derive(seed, 4), n * sparse_dim, noise).reshape(n, sparse_dim)
    sparse = (means[labels, :sparse_dim] + sparse_noise).astype(np.float32)
    samples = [SampleRecord(i, int(pick[i]), sparse[i], int(labels[i])) for i in range(n)]
    return samples, blobs


def stack(samples, blobs=None):
    """Batch arrays (sparse_input, dense_input or None, labels)."""
    xs = np.stack([s.sparse_input for s in samples])
    labels = np.array([s.label for s in samples], dtype=np.int64)
    dense = None if blobs is None else np.stack([blobs[s.image_id] for s in samples])
    return xs, dense, labels


def shard(samples, index: int, count: int) -> list:
    """Strided shard ``index`` of ``count``; shards are disjoint."""
    return samples[index::count]
