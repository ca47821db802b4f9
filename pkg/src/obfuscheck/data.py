"""Dataset provisioning: a seeded synthetic image generator and an IDX
(big-endian MNIST-style) reader/writer."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError
from .rng import derive_rng

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801


@dataclass
class Dataset:
    """Inputs in [0,1] shaped [n, c, h, w] plus integer class labels."""
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    class_count: int
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        for x in (self.train_x, self.test_x):
            if x.size and (x.min() < 0.0 or x.max() > 1.0):
                raise ValueError("dataset inputs must lie in [0,1]")
        for y in (self.train_y, self.test_y):
            if y.size and (y.min() < 0 or y.max() >= self.class_count):
                raise ValueError("label out of range")

    @property
    def input_shape(self):
        return tuple(self.train_x.shape[1:])


def generate_synthetic(classes=10, per_class=200, shape=(1, 16, 16),
                       difficulty=0.4, seed=0, contrast=1.0) -> Dataset:
    """Prototype-plus-noise images: one prototype per class drawn uniformly in
    [0.2, 0.8], samples are the prototype plus Gaussian pixel noise with std
    difficulty*0.25, clamped to [0,1].  Split 80/20 stratified, deterministic
    per seed.

    ``contrast`` shrinks the prototypes toward 0.5 (prototype range becomes
    0.5 +/- 0.3*contrast) without changing which prototypes are drawn.  At the
    default 1.0 the per-pixel class margins are so wide that bounded attacks
    cannot flip any prediction; small values (~0.25) make robustness under an
    8/255 budget genuinely contested.
    """
    if classes < 2 or per_class < 1:
        raise ValueError("need classes >= 2 and per_class >= 1")
    if not 0.0 < difficulty <= 1.0:
        raise ValueError(f"difficulty must be in (0,1], got {difficulty}")
    if not 0.0 < contrast <= 1.0:
        raise ValueError(f"contrast must be in (0,1], got {contrast}")
    rng = derive_rng(seed, "synthetic")
    protos = rng.uniform(0.2, 0.8, (classes,) + tuple(shape))
    if contrast != 1.0:
        protos = np.float32(0.5) + np.float32(contrast) * (protos - np.float32(0.5))
    std = np.float32(difficulty * 0.25)
    train_x, train_y, test_x, test_y = [], [], [], []
    n_test = int(np.ceil(0.2 * per_class))
    for k in range(classes):
        crng = derive_rng(seed, "synthetic", k)
        noise = crng.normal((per_class,) + tuple(shape)) * std
        samples = np.clip(protos[k][None] + noise, 0.0, 1.0)
        test_x.append(samples[:n_test])
        train_x.append(samples[n_test:])
        test_y.append(np.full(n_test, k, dtype=np.int64))
        train_y.append(np.full(per_class - n_test, k, dtype=np.int64))
    ds = Dataset(np.concatenate(train_x), np.concatenate(train_y),
                 np.concatenate(test_x), np.concatenate(test_y),
                 class_count=classes,
                 source={"kind": "synthetic", "classes": classes,
                         "per_class": per_class, "shape": list(shape),
                         "difficulty": difficulty, "seed": seed,
                         "contrast": contrast})
    ds.prototypes = protos
    return ds


def nearest_prototype_accuracy(ds: Dataset) -> float:
    """Oracle accuracy of the 1-nearest-prototype classifier on the test split."""
    protos = ds.prototypes.reshape(ds.class_count, -1)
    flat = ds.test_x.reshape(len(ds.test_x), -1)
    d = ((flat[:, None, :] - protos[None]) ** 2).sum(axis=2)
    return float(np.mean(np.argmin(d, axis=1) == ds.test_y))


# ---------------------------------------------------------------------------
# IDX file format (big-endian)

def _read_exact(f, n, offset):
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(buf)}",
                          offset=offset)
    return buf


def _load_idx_array(path, expect_magic, expect_ndim):
    with open(path, "rb") as f:
        offset = 0
        magic = struct.unpack(">I", _read_exact(f, 4, offset))[0]
        if magic != expect_magic:
            raise FormatError(
                f"bad IDX magic 0x{magic:08X}, expected 0x{expect_magic:08X}",
                offset=0)
        offset += 4
        ndim = magic & 0xFF
        if ndim != expect_ndim:
            raise FormatError(f"unexpected IDX rank {ndim}", offset=3)
        dims = []
        for _ in range(ndim):
            d = struct.unpack(">I", _read_exact(f, 4, offset))[0]
            if d > 10 ** 8:
                raise FormatError(f"IDX dimension {d} implausibly large", offset=offset)
            dims.append(d)
            offset += 4
        count = int(np.prod(dims)) if dims else 0
        payload = _read_exact(f, count, offset)
        # never read past the declared payload
        return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    """Parse an IDX image/label pair into a test-only Dataset (pixels/255)."""
    images = _load_idx_array(images_path, IDX_MAGIC_IMAGES, 3)
    labels = _load_idx_array(labels_path, IDX_MAGIC_LABELS, 1)
    if len(images) != len(labels):
        raise FormatError(
            f"image count {len(images)} != label count {len(labels)}")
    x = (images.astype(np.float32) / 255.0)[:, None, :, :]
    y = labels.astype(np.int64)
    classes = int(y.max()) + 1 if len(y) else 0
    return Dataset(x, y, x.copy(), y.copy(), class_count=max(classes, 2),
                   source={"kind": "idx", "images": str(images_path),
                           "labels": str(labels_path)})


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path):
    """Write [n, h, w] uint8 images and [n] uint8 labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 3 or len(images) != len(labels):
        raise ValueError("write_idx expects [n,h,w] images and matching labels")
    with open(images_path, "wb") as f:
        f.write(struct.pack(">I", IDX_MAGIC_IMAGES))
        f.write(struct.pack(">III", *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">I", IDX_MAGIC_LABELS))
        f.write(struct.pack(">I", len(labels)))
        f.write(labels.tobytes())
