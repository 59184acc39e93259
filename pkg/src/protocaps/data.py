"""Dataset ingestion, augmentation and batching.

Three on-disk formats are supported bit-exactly:

* IDX (MNIST/FashionMNIST): big-endian magic + dims header, u8 pixels.
* CIFAR-10 binary: 3073-byte records, 1 label byte + 3072 row-major
  R,G,B plane bytes.
* raw tensor directory: ``manifest.json`` with {count, c, h, w, dtype}
  plus little-endian ``images.bin`` (float32/float64, already in [0,1])
  and ``labels.bin`` (int64) — the bring-your-own-preprocessing escape
  hatch for datasets whose native formats are out of scope.

Pixels always land in [0, 1] as float32.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073


@dataclass
class Dataset:
    images: np.ndarray        # [count, c, h, w] float32 in [0, 1]
    labels: np.ndarray        # [count] int64
    class_names: list = None
    split: str = ""

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be [count, c, h, w], got "
                             f"{self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ValueError(f"count mismatch: {len(self.images)} images vs "
                             f"{len(self.labels)} labels")

    def __len__(self):
        return len(self.images)

    @property
    def num_classes(self):
        if self.class_names:
            return len(self.class_names)
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def subset(self, indices, split=None):
        return Dataset(self.images[indices], self.labels[indices],
                       self.class_names,
                       self.split if split is None else split)


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

def _read_header(f, path, magic_expected, n_dims):
    head = f.read(4 * (1 + n_dims))
    if len(head) < 4 * (1 + n_dims):
        raise ValueError(f"{path}: truncated IDX header")
    values = struct.unpack(f">{1 + n_dims}i", head)
    if values[0] != magic_expected:
        raise ValueError(f"{path}: bad IDX magic {values[0]:#010x}, expected "
                         f"{magic_expected:#010x}")
    return values[1:]


def load_idx(images_path, labels_path, split="", class_names=None) -> Dataset:
    """Load an IDX image/label file pair (the MNIST on-disk format)."""
    with open(images_path, "rb") as f:
        count, rows, cols = _read_header(f, images_path, IDX_IMAGES_MAGIC, 3)
        payload = f.read()
    expected = count * rows * cols
    if len(payload) != expected:
        raise ValueError(f"{images_path}: expected {expected} pixel bytes, "
                         f"found {len(payload)}")
    images = np.frombuffer(payload, dtype=np.uint8).reshape(
        count, 1, rows, cols).astype(np.float32) / 255.0

    with open(labels_path, "rb") as f:
        (label_count,) = _read_header(f, labels_path, IDX_LABELS_MAGIC, 1)
        label_payload = f.read()
    if len(label_payload) != label_count:
        raise ValueError(f"{labels_path}: expected {label_count} label "
                         f"bytes, found {len(label_payload)}")
    if label_count != count:
        raise ValueError(f"image count {count} != label count {label_count}")
    labels = np.frombuffer(label_payload, dtype=np.uint8).astype(np.int64)
    return Dataset(images, labels, class_names, split)


def write_idx(images_path, labels_path, images_u8, labels):
    """Write an IDX pair; images_u8 is [count, rows, cols] uint8."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    count, rows, cols = images_u8.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">4i", IDX_IMAGES_MAGIC, count, rows, cols))
        f.write(images_u8.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">2i", IDX_LABELS_MAGIC, count))
        f.write(labels.tobytes())


# ---------------------------------------------------------------------------
# CIFAR-10 binary
# ---------------------------------------------------------------------------

def load_cifar10_binary(paths, split="", class_names=None) -> Dataset:
    """Load one or more CIFAR-10 binary batch files."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    chunks, labels = [], []
    for path in paths:
        raw = Path(path).read_bytes()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD != 0:
            raise ValueError(f"{path}: length {len(raw)} is not a multiple "
                             f"of the {CIFAR_RECORD}-byte record size")
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(records[:, 0].astype(np.int64))
        chunks.append(records[:, 1:].reshape(-1, 3, 32, 32))
    images = np.concatenate(chunks).astype(np.float32) / 255.0
    return Dataset(images, np.concatenate(labels), class_names, split)


# ---------------------------------------------------------------------------
# Raw tensor directory
# ---------------------------------------------------------------------------

def load_raw_dir(path, split="", class_names=None) -> Dataset:
    """Load a raw tensor directory (manifest.json + images.bin + labels.bin)."""
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    for key in ("count", "c", "h", "w", "dtype"):
        if key not in manifest:
            raise ValueError(f"{root}/manifest.json missing key {key!r}")
    count, c, h, w = (int(manifest[k]) for k in ("count", "c", "h", "w"))
    dtype = np.dtype(manifest["dtype"])
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"raw dtype must be float32/float64, got "
                         f"{manifest['dtype']}")
    images = np.fromfile(root / "images.bin", dtype=dtype.newbyteorder("<"))
    if images.size != count * c * h * w:
        raise ValueError(f"{root}/images.bin: expected {count * c * h * w} "
                         f"values, found {images.size}")
    labels = np.fromfile(root / "labels.bin", dtype="<i8")
    if labels.size != count:
        raise ValueError(f"{root}/labels.bin: expected {count} labels, "
                         f"found {labels.size}")
    images = images.reshape(count, c, h, w).astype(np.float32)
    return Dataset(images, labels.astype(np.int64), class_names, split)


def write_raw_dir(path, images, labels):
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    count, c, h, w = images.shape
    (root / "manifest.json").write_text(json.dumps(
        {"count": count, "c": c, "h": h, "w": w, "dtype": "float32"},
        indent=2))
    images.astype("<f4").tofile(root / "images.bin")
    labels.astype("<i8").tofile(root / "labels.bin")


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

@dataclass
class AugmentSpec:
    """Random resized crop plus optional brightness/contrast jitter."""

    scale_min: float = 0.8
    scale_max: float = 1.0
    out_size: int = None            # None -> source size
    brightness_delta: float = 0.0
    contrast_delta: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.scale_min <= self.scale_max <= 1.0:
            raise ValueError(f"need 0 < scale_min <= scale_max <= 1, got "
                             f"[{self.scale_min}, {self.scale_max}]")

    @property
    def jitter(self):
        return self.brightness_delta > 0 or self.contrast_delta > 0


def bilinear_resize(img, out_h, out_w):
    """Resize [c, h, w] with half-pixel-center bilinear sampling."""
    c, h, w = img.shape
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    ty = (ys - y0).astype(img.dtype)[None, :, None]
    tx = (xs - x0).astype(img.dtype)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - tx) + img[:, y0][:, :, x1] * tx
    bot = img[:, y1][:, :, x0] * (1 - tx) + img[:, y1][:, :, x1] * tx
    return top * (1 - ty) + bot * ty


def augment(batch, spec: AugmentSpec, rng) -> np.ndarray:
    """Random resized crop (area fraction in [scale_min, scale_max]) and
    jitter, per image. Deterministic given the generator state."""
    batch = np.asarray(batch)
    b, c, h, w = batch.shape
    out_size = spec.out_size or h
    if out_size < 1:
        raise ValueError(f"out_size must be >= 1, got {out_size}")
    out = np.empty((b, c, out_size, out_size), dtype=batch.dtype)
    for i in range(b):
        frac = rng.uniform(spec.scale_min, spec.scale_max)
        side = np.sqrt(frac)
        ch = max(1, int(round(h * side)))
        cw = max(1, int(round(w * side)))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        crop = batch[i, :, top:top + ch, left:left + cw]
        img = bilinear_resize(crop, out_size, out_size) \
            if (ch, cw) != (out_size, out_size) else crop.copy()
        if spec.jitter:
            bright = rng.uniform(-spec.brightness_delta,
                                 spec.brightness_delta)
            contrast = rng.uniform(-spec.contrast_delta, spec.contrast_delta)
            img = (img - 0.5) * (1.0 + contrast) + 0.5 + bright
            img = np.clip(img, 0.0, 1.0)
        out[i] = img
    return out


def normalize_images(images, mean, std):
    """Optional per-channel standardization (applied after [0,1] scaling)."""
    mean = np.asarray(mean, dtype=images.dtype).reshape(1, -1, 1, 1)
    std = np.asarray(std, dtype=images.dtype).reshape(1, -1, 1, 1)
    return (images - mean) / std


def sample_subset(dataset: Dataset, count, seed=0) -> Dataset:
    """A seeded without-replacement subset (desk-scale training slices)."""
    if count > len(dataset):
        raise ValueError(f"subset of {count} from {len(dataset)} samples")
    idx = np.random.default_rng(seed).permutation(len(dataset))[:count]
    return dataset.subset(idx)


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

def batches(dataset: Dataset, batch_size, shuffle=False, seed=0):
    """Yield (images, labels) covering each sample exactly once per epoch.

    The shuffled order is a seeded permutation; the final partial batch is
    kept.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    count = len(dataset)
    if count == 0:
        raise ValueError("empty dataset")
    order = np.arange(count)
    if shuffle:
        order = np.random.default_rng(seed).permutation(count)
    for start in range(0, count, batch_size):
        idx = order[start:start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]
