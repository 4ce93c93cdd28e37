"""Datasets: IDX/CSV ingestion, synthetic generators, stratified splits."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .io import load_container, save_container

IDX_LABEL_MAGIC = 0x00000801
IDX_IMAGE_MAGIC = 0x00000803


class IdxFormatError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class Dataset:
    """Samples ``X`` of shape ``(n, *sample_shape)`` with integer labels ``y``."""

    X: np.ndarray
    y: np.ndarray
    class_count: int
    provenance: str = "clean"

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=int)
        if len(self.X) != len(self.y):
            raise ValueError("X and y lengths differ")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.class_count):
            raise ValueError("labels out of range")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("non-finite sample values")

    def __len__(self):
        return len(self.y)

    @property
    def sample_shape(self):
        return self.X.shape[1:]

    def of_class(self, c):
        return self.X[self.y == c]

    def subset(self, idx, provenance=None):
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.X[idx], self.y[idx], self.class_count,
                       provenance or self.provenance)

    def without(self, idx):
        keep = np.setdiff1d(np.arange(len(self)), np.asarray(idx, dtype=int))
        return self.subset(keep)

    def counts(self):
        return np.bincount(self.y, minlength=self.class_count)


def _read_idx_bytes(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:2] == b"\x1f\x8b":
        blob = gzip.decompress(blob)
    return blob


def _parse_idx(blob, expected_magic):
    if len(blob) < 8:
        raise IdxFormatError("truncated header", len(blob))
    (magic,) = struct.unpack(">I", blob[:4])
    if magic != expected_magic:
        raise IdxFormatError(f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0)
    ndim = magic & 0xFF
    hdr = 4 + 4 * ndim
    if len(blob) < hdr:
        raise IdxFormatError("truncated dimension list", len(blob))
    dims = struct.unpack(f">{ndim}I", blob[4:hdr])
    count = int(np.prod(dims))
    if len(blob) < hdr + count:
        raise IdxFormatError(f"truncated data: need {count} bytes", len(blob))
    data = np.frombuffer(blob, dtype=np.uint8, count=count, offset=hdr)
    return data.reshape(dims)


def load_idx(image_path, label_path, class_count=10):
    """Read an MNIST-style image/label pair; pixels are divided by 255."""
    images = _parse_idx(_read_idx_bytes(image_path), IDX_IMAGE_MAGIC)
    labels = _parse_idx(_read_idx_bytes(label_path), IDX_LABEL_MAGIC)
    if len(images) != len(labels):
        raise IdxFormatError(f"{len(images)} images but {len(labels)} labels", 4)
    X = images.astype(np.float64) / 255.0
    y = labels.astype(int)
    class_count = max(class_count, int(y.max()) + 1 if len(y) else class_count)
    return Dataset(X, y, class_count)


def write_idx(image_path, label_path, images_u8, labels_u8):
    """Write uint8 arrays in IDX format (used for fixtures and exports)."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels_u8 = np.asarray(labels_u8, dtype=np.uint8)
    with open(image_path, "wb") as f:
        f.write(struct.pack(">I", IDX_IMAGE_MAGIC))
        f.write(struct.pack(">3I", *images_u8.shape))
        f.write(images_u8.tobytes())
    with open(label_path, "wb") as f:
        f.write(struct.pack(">I", IDX_LABEL_MAGIC))
        f.write(struct.pack(">I", len(labels_u8)))
        f.write(labels_u8.tobytes())


def load_csv(path, sample_shape=None, class_count=None):
    """One row per sample, features first, integer label in the last column."""
    rows = np.loadtxt(path, delimiter=",", ndmin=2)
    X, y = rows[:, :-1], rows[:, -1].astype(int)
    if sample_shape is not None:
        X = X.reshape((len(X), *sample_shape))
    if class_count is None:
        class_count = int(y.max()) + 1
    return Dataset(X, y, class_count)


def save_csv(path, dataset):
    flat = dataset.X.reshape(len(dataset), -1)
    with open(path, "w") as f:
        for row, label in zip(flat, dataset.y):
            f.write(",".join(repr(float(v)) for v in row) + f",{int(label)}\n")


def save_dataset(path, dataset):
    save_container(path, "dataset",
                   {"class_count": dataset.class_count, "provenance": dataset.provenance},
                   [("X", dataset.X), ("y", dataset.y.astype(np.float64))])


def load_dataset(path):
    _, meta, arrays = load_container(path, "dataset")
    return Dataset(arrays["X"], arrays["y"].astype(int), meta["class_count"], meta["provenance"])


def minmax_normalize(train, *others):
    """Affinely map features into [0, 1] using per-feature train ranges.

    Other datasets use the same map and are clipped. Applying it twice is a
    no-op because a normalized train set already spans exactly [0, 1].
    """
    flat = train.X.reshape(len(train), -1)
    lo, hi = flat.min(axis=0), flat.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)

    def apply(d):
        f = (d.X.reshape(len(d), -1) - lo) / span
        return replace(d, X=np.clip(f, 0.0, 1.0).reshape(d.X.shape))

    out = [apply(train)] + [apply(d) for d in others]
    return out[0] if not others else tuple(out)


def _class_means(rng, K, dim, separation):
    if K <= dim:
        q, _ = np.linalg.qr(rng.standard_normal((dim, K)))
        dirs = q.T
    else:
        dirs = rng.standard_normal((K, dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    # orthonormal directions scaled by s/sqrt(2) put every pair exactly s apart
    return dirs * (separation / np.sqrt(2.0))


def synth_gaussians(K, dim, n_per_class, mean_separation, seed, sigma=1.0):
    """Isotropic unit-variance classes around seeded random means."""
    rng = np.random.default_rng(seed)
    means = _class_means(rng, K, dim, mean_separation * sigma)
    X = np.concatenate([m + sigma * rng.standard_normal((n_per_class, dim)) for m in means])
    y = np.repeat(np.arange(K), n_per_class)
    return Dataset(X, y, K)


def _smooth_field(rng, side, coarse, channels, n):
    grid = rng.standard_normal((n, channels, coarse, coarse))
    zoom = (1, 1, side / coarse, side / coarse)
    return ndimage.zoom(grid, zoom, order=1, mode="nearest")[:, :, :side, :side]


def synth_images(K, side, n_per_class, seed, channels=1, coarse=3,
                 variation=0.08, noise=0.02, modes=1):
    """Smooth class-prototype images in [0, 1] with shape (channels, side, side).

    Each class has ``modes`` low-frequency prototypes; a sample picks one at
    random and adds a smooth random deformation and a little per-pixel noise.
    """
    rng = np.random.default_rng(seed)
    protos = 0.5 + 0.22 * _smooth_field(rng, side, coarse, channels, K * modes)
    X, y = [], []
    for c in range(K):
        if modes > 1:
            base = protos[c * modes + rng.integers(modes, size=n_per_class)]
        else:
            base = protos[c]
        deform = variation * _smooth_field(rng, side, coarse + 1, channels, n_per_class)
        pix = noise * rng.standard_normal((n_per_class, channels, side, side))
        X.append(np.clip(base + deform + pix, 0.0, 1.0))
        y.append(np.full(n_per_class, c))
    return Dataset(np.concatenate(X), np.concatenate(y), K)


def split(dataset, fraction, seed):
    """Stratified split; the first part takes ``round(fraction * n_c)`` of each class."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    first = []
    for c in range(dataset.class_count):
        idx = np.flatnonzero(dataset.y == c)
        idx = idx[rng.permutation(len(idx))]
        first.append(idx[:int(round(fraction * len(idx)))])
    first = np.sort(np.concatenate(first)) if first else np.array([], dtype=int)
    second = np.setdiff1d(np.arange(len(dataset)), first)
    return dataset.subset(first), dataset.subset(second)
