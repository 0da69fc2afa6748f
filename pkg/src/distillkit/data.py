"""Datasets, whitening, distilled-set initialization and differentiable augmentation.

Raw dataset file format (little-endian): magic ``TDS1``, u32 N, u32 C, u32 H,
u32 W, u32 classes, N*C*H*W float32 images, N u16 labels.  Distilled-set saves
append a trailing manifest block: magic ``MANI``, u32 length, UTF-8 JSON.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn_ops
from .autodiff import Tensor
from .errors import ConfigError, DataError, FileFormatError

MAGIC = b"TDS1"
MANIFEST_MAGIC = b"MANI"

AUGMENT_POLICIES = ("none", "flip", "crop_with_pad", "cutout", "scale", "rotate")


@dataclass
class LabeledDataset:
    """Immutable image dataset: (N, C, H, W) images plus integer labels."""

    images: np.ndarray
    labels: np.ndarray
    classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.labels) != len(self.images) or len(self.images) < 1:
            raise DataError("need N >= 1 images with one label each")
        if self.labels.min() < 0 or self.labels.max() >= self.classes:
            raise DataError(f"labels must lie in [0, {self.classes})")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self):
        return len(self.images)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def class_indices(self, c: int) -> np.ndarray:
        return np.nonzero(self.labels == c)[0]


def dataset_hash(ds: LabeledDataset) -> str:
    h = hashlib.sha256()
    h.update(struct.pack("<5I", len(ds), *ds.image_shape, ds.classes))
    h.update(np.ascontiguousarray(ds.images, dtype="<f4").tobytes())
    h.update(np.ascontiguousarray(ds.labels, dtype="<u2").tobytes())
    return h.hexdigest()


def one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
    out = np.zeros((len(labels), classes), dtype=ad.default_dtype())
    out[np.arange(len(labels)), labels] = 1.0
    return out


# ---------------------------------------------------------------------------
# synthetic data


def _blob_block(classes, per_class, size, channels, cluster_std, structure_seed, sample_seed):
    struct_rng = np.random.default_rng(structure_seed)
    rng = np.random.default_rng(sample_seed)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    centers = struct_rng.uniform(1.0, size - 2.0, size=(classes, 2))
    widths = struct_rng.uniform(0.12 * size, 0.22 * size, size=classes)
    images = np.empty((classes * per_class, channels, size, size), dtype=ad.default_dtype())
    labels = np.empty(classes * per_class, dtype=np.int64)
    for c in range(classes):
        bump = np.exp(
            -((yy - centers[c, 0]) ** 2 + (xx - centers[c, 1]) ** 2) / (2.0 * widths[c] ** 2)
        )
        block = bump[None, None, :, :] + rng.normal(
            0.0, cluster_std, size=(per_class, channels, size, size)
        )
        images[c * per_class : (c + 1) * per_class] = np.clip(block, 0.0, 1.0)
        labels[c * per_class : (c + 1) * per_class] = c
    return LabeledDataset(images, labels, classes)


def synthetic_blobs(classes, per_class, image_size, channels, cluster_std, seed) -> LabeledDataset:
    """Gaussian-bump images: one bump location/width per class plus pixel noise.

    The bump geometry is drawn from a structure stream separate from the pixel
    noise, so splits built from the same seed share class identity.
    """
    structure_seed, sample_seed = np.random.SeedSequence(seed).spawn(2)
    return _blob_block(classes, per_class, int(image_size), channels, cluster_std,
                       structure_seed, sample_seed)


def synthetic_split(classes, train_per_class, test_per_class, image_size, channels,
                    cluster_std, seed):
    """Train/test pair with shared class structure and disjoint noise draws."""
    structure_seed, train_seed, test_seed = np.random.SeedSequence(seed).spawn(3)
    size = int(image_size)
    train = _blob_block(classes, train_per_class, size, channels, cluster_std,
                        structure_seed, train_seed)
    test = _blob_block(classes, test_per_class, size, channels, cluster_std,
                       structure_seed, test_seed)
    return train, test


# ---------------------------------------------------------------------------
# binary file format


def save_dataset(path, ds: LabeledDataset, manifest: dict | None = None) -> None:
    n = len(ds)
    c, h, w = ds.image_shape
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<5I", n, c, h, w, ds.classes))
        f.write(np.ascontiguousarray(ds.images, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(ds.labels, dtype="<u2").tobytes())
        if manifest is not None:
            blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
            f.write(MANIFEST_MAGIC)
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise FileFormatError(
            f"truncated {what}: expected {n} bytes at offset {f.tell() - len(buf)}, got {len(buf)}"
        )
    return buf


def load_dataset(path, format: str = "tds1"):
    """Load a dataset file; returns (LabeledDataset, manifest-or-None)."""
    if format != "tds1":
        raise FileFormatError(f"unsupported dataset format {format!r}")
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != MAGIC:
            raise FileFormatError(f"bad magic {magic!r} at offset 0, expected {MAGIC!r}")
        n, c, h, w, classes = struct.unpack("<5I", _read_exact(f, 20, "header"))
        images = np.frombuffer(
            _read_exact(f, n * c * h * w * 4, "image block"), dtype="<f4"
        ).reshape(n, c, h, w)
        labels = np.frombuffer(_read_exact(f, n * 2, "label block"), dtype="<u2")
        manifest = None
        trailer = f.read(4)
        if trailer:
            if trailer != MANIFEST_MAGIC:
                raise FileFormatError(
                    f"bad trailing block magic {trailer!r} at offset {f.tell() - 4}"
                )
            (length,) = struct.unpack("<I", _read_exact(f, 4, "manifest length"))
            manifest = json.loads(_read_exact(f, length, "manifest").decode("utf-8"))
    ds = LabeledDataset(
        images.astype(ad.default_dtype()), labels.astype(np.int64), classes
    )
    return ds, manifest


# ---------------------------------------------------------------------------
# ZCA whitening


@dataclass
class ZcaTransform:
    mean: np.ndarray
    matrix: np.ndarray  # (D, D), symmetric
    lam: float


def zca_fit(train: LabeledDataset, lam: float | None = None) -> ZcaTransform:
    """Fit E diag(1/sqrt(s + lam)) E^T on the sample covariance of the images.

    ``lam=None`` picks the scale-aware default 0.1 * trace(cov) / D.
    """
    n = len(train)
    if n < 2:
        raise DataError("zca_fit needs at least 2 samples")
    x = np.asarray(train.images, dtype=np.float64).reshape(n, -1)
    mean = x.mean(axis=0)
    xc = x - mean
    cov = (xc.T @ xc) / (n - 1)
    if not np.all(np.isfinite(cov)):
        raise DataError("non-finite covariance")
    if lam is None:
        lam = 0.1 * float(np.trace(cov)) / cov.shape[0]
    s, e = np.linalg.eigh(cov)
    s = np.clip(s, 0.0, None)
    scaled = s + lam
    if np.any(scaled <= 1e-12):
        raise DataError("covariance is rank deficient; increase the ZCA regularizer")
    matrix = (e * (1.0 / np.sqrt(scaled))) @ e.T
    return ZcaTransform(mean=mean, matrix=matrix, lam=float(lam))


def zca_apply(t: ZcaTransform, images: np.ndarray) -> np.ndarray:
    shape = images.shape
    x = np.asarray(images, dtype=np.float64).reshape(shape[0], -1)
    out = (x - t.mean) @ t.matrix
    return out.reshape(shape).astype(ad.default_dtype())


def whiten_dataset(t: ZcaTransform, ds: LabeledDataset) -> LabeledDataset:
    return LabeledDataset(zca_apply(t, ds.images), ds.labels, ds.classes)


# ---------------------------------------------------------------------------
# distilled dataset


@dataclass
class DistilledDataset:
    """Learnable images with fixed one-hot labels, exactly IPC per class."""

    images: np.ndarray
    labels_onehot: np.ndarray
    ipc: int
    classes: int
    labels: np.ndarray = field(init=False)

    def __post_init__(self):
        self.images = np.array(self.images, dtype=ad.default_dtype())
        self.labels_onehot = np.asarray(self.labels_onehot)
        if len(self.images) != self.classes * self.ipc:
            raise DataError(
                f"expected {self.classes * self.ipc} images, got {len(self.images)}"
            )
        self.labels = np.argmax(self.labels_onehot, axis=1).astype(np.int64)
        counts = np.bincount(self.labels, minlength=self.classes)
        if not np.all(counts == self.ipc):
            raise DataError(f"class balance violated: {counts.tolist()}")
        self.labels_onehot.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self):
        return len(self.images)

    def as_labeled(self) -> LabeledDataset:
        return LabeledDataset(self.images.copy(), self.labels, self.classes)


def init_distilled(original: LabeledDataset, ipc: int, seed: int) -> DistilledDataset:
    """Copy ipc random real samples per class as the initial learnable images."""
    rng = np.random.default_rng(seed)
    picks = []
    for c in range(original.classes):
        idx = original.class_indices(c)
        if len(idx) < ipc:
            raise DataError(f"class {c} has {len(idx)} samples, needs >= {ipc}")
        picks.append(rng.choice(idx, size=ipc, replace=False))
    picks = np.concatenate(picks)
    labels = np.repeat(np.arange(original.classes), ipc)
    return DistilledDataset(
        images=np.array(original.images[picks], dtype=ad.default_dtype()),
        labels_onehot=one_hot(labels, original.classes),
        ipc=ipc,
        classes=original.classes,
    )


def save_distilled(path, d: DistilledDataset, manifest: dict | None = None) -> None:
    save_dataset(path, d.as_labeled(), manifest)


def load_distilled(path, ipc: int):
    ds, manifest = load_dataset(path)
    d = DistilledDataset(
        images=ds.images.copy(),
        labels_onehot=one_hot(ds.labels, ds.classes),
        ipc=ipc,
        classes=ds.classes,
    )
    return d, manifest


# ---------------------------------------------------------------------------
# differentiable augmentation

_FLIP_IDX_CACHE: dict = {}


def normalize_policy(policy) -> tuple[str, ...]:
    if policy is None:
        return ()
    if isinstance(policy, str):
        tokens = tuple(t.strip() for t in policy.split(",") if t.strip())
    else:
        tokens = tuple(policy)
    for t in tokens:
        if t not in AUGMENT_POLICIES:
            raise ConfigError(
                f"unknown augmentation {t!r}; allowed: {', '.join(AUGMENT_POLICIES)}"
            )
    return tokens


def _flip_w(x: Tensor) -> Tensor:
    idx = _FLIP_IDX_CACHE.get(x.shape)
    if idx is None:
        idx = np.arange(x.size, dtype=np.int64).reshape(x.shape)[..., ::-1].ravel()
        _FLIP_IDX_CACHE[x.shape] = idx
    return ad.take_flat(x, idx, x.shape)


def _shift(x: Tensor, pad: int, dy: int, dx: int) -> Tensor:
    n, c, h, w = x.shape
    padded = nn_ops.pad2d(x, pad)
    hp, wp = h + 2 * pad, w + 2 * pad
    ni = np.arange(n, dtype=np.int64)[:, None, None, None]
    ci = np.arange(c, dtype=np.int64)[None, :, None, None]
    yi = (np.arange(h, dtype=np.int64) + pad + dy)[None, None, :, None]
    xi = (np.arange(w, dtype=np.int64) + pad + dx)[None, None, None, :]
    idx = (((ni * c + ci) * hp + yi) * wp + xi).ravel()
    return ad.take_flat(padded, idx, (n, c, h, w))


def _cutout(x: Tensor, cy: int, cx: int, hole: int) -> Tensor:
    n, c, h, w = x.shape
    mask = np.ones((1, 1, h, w), dtype=x.data.dtype)
    y0, y1 = max(0, cy - hole // 2), min(h, cy + (hole + 1) // 2)
    x0, x1 = max(0, cx - hole // 2), min(w, cx + (hole + 1) // 2)
    mask[:, :, y0:y1, x0:x1] = 0.0
    return ad.mul(x, Tensor(mask))


def _scale_grid(h, w, factor):
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return cy + (yy - cy) / factor, cx + (xx - cx) / factor


def _rotate_grid(h, w, degrees):
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = np.deg2rad(degrees)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dy, dx = yy - cy, xx - cx
    # Inverse rotation maps output pixels back onto the source image.
    src_y = cy + np.cos(theta) * dy + np.sin(theta) * dx
    src_x = cx - np.sin(theta) * dy + np.cos(theta) * dx
    return src_y, src_x


def augment(batch, policy, rng) -> Tensor:
    """Apply the enabled transforms, one parameter draw shared by the batch.

    Output stays differentiable w.r.t. the input pixels; draws come from
    ``rng`` in policy order, so a fixed generator state fixes the transform.
    """
    x = ad.as_tensor(batch)
    if x.ndim != 4:
        raise DataError(f"augment expects NCHW batches, got shape {x.shape}")
    _, _, h, w = x.shape
    for token in normalize_policy(policy):
        if token == "none":
            continue
        if token == "flip":
            if rng.random() < 0.5:
                x = _flip_w(x)
        elif token == "crop_with_pad":
            pad = max(1, h // 8)
            dy = int(rng.integers(-pad, pad + 1))
            dx = int(rng.integers(-pad, pad + 1))
            x = _shift(x, pad, dy, dx)
        elif token == "cutout":
            hole = max(1, h // 4)
            cy = int(rng.integers(0, h))
            cx = int(rng.integers(0, w))
            x = _cutout(x, cy, cx, hole)
        elif token == "scale":
            factor = float(rng.uniform(0.8, 1.2))
            x = nn_ops.grid_sample_bilinear(x, *_scale_grid(h, w, factor))
        elif token == "rotate":
            degrees = float(rng.uniform(-15.0, 15.0))
            x = nn_ops.grid_sample_bilinear(x, *_rotate_grid(h, w, degrees))
    return x
