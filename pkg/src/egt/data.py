"""Synthetic 9-class shapes dataset and the ``EGTD`` dataset container."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError

NUM_CLASSES = 9
SHAPES = ("disk", "square", "triangle")
COLORS = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.85, 0.20),
    "blue": (0.20, 0.30, 0.95),
}
CLASS_NAMES = tuple(f"{color}-{shape}" for shape in SHAPES for color in COLORS)

MAGIC = b"EGTD"
VERSION = 1
_HEADER = struct.Struct("<4s6I")


@dataclass
class Dataset:
    images: np.ndarray  # [M, C, S, S] float32 in [0, 1]
    labels: np.ndarray  # [M] int64
    num_classes: int = NUM_CLASSES
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] < 1:
            raise ValueError(f"images must be [M>=1, C, H, W], got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError(f"{self.labels.shape[0]} labels for {self.images.shape[0]} images")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_size(self) -> int:
        return self.images.shape[2]

    def subset(self, idx) -> Dataset:
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.split)


# -- generation ------------------------------------------------------------

def _shape_mask(shape: str, size: int, cx: float, cy: float, r: float, theta: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    u, v = xx - cx, yy - cy
    cos, sin = np.cos(theta), np.sin(theta)
    u, v = cos * u + sin * v, -sin * u + cos * v
    if shape == "disk":
        return u * u + v * v <= r * r
    if shape == "square":
        half = r * 0.82
        return (np.abs(u) <= half) & (np.abs(v) <= half)
    # equilateral triangle, apex up (image y grows downward), circumradius r * 1.15;
    # each edge is a half-plane n.(u, v) <= R/2 with outward normal n
    R = r * 1.15
    s3 = np.sqrt(3) / 2
    return (v <= R / 2) & (-s3 * u - 0.5 * v <= R / 2) & (s3 * u - 0.5 * v <= R / 2)


def _render(rng: np.random.Generator, label: int, size: int, difficulty: str) -> np.ndarray:
    shape = SHAPES[label // len(COLORS)]
    color = np.array(list(COLORS.values())[label % len(COLORS)])
    if difficulty == "easy":
        background = np.full(3, 0.1)
        noise = 0.03
        cx, cy = size / 2 + rng.uniform(-1, 1, 2)
        r = 0.30 * size
        theta = 0.0
    else:
        background = rng.uniform(0.0, 0.3, 3)
        noise = 0.06
        cx, cy = size / 2 + rng.uniform(-0.12, 0.12, 2) * size
        r = rng.uniform(0.22, 0.32) * size
        theta = rng.uniform(-0.4, 0.4)
        color = np.clip(color * rng.uniform(0.8, 1.0) + rng.uniform(-0.08, 0.08, 3), 0, 1)

    img = np.broadcast_to(background[:, None, None], (3, size, size)).copy()
    mask = _shape_mask(shape, size, cx, cy, r, theta)
    img[:, mask] = color[:, None]
    if difficulty == "mixed":
        # a flat occluding patch over part of the object
        ph, pw = rng.integers(size // 8, size // 5 + 1, 2)
        oy = int(np.clip(cy + rng.uniform(-r, r) - ph / 2, 0, size - ph))
        ox = int(np.clip(cx + rng.uniform(-r, r) - pw / 2, 0, size - pw))
        img[:, oy:oy + ph, ox:ox + pw] = rng.uniform(0.0, 0.5, 3)[:, None, None]
    img += rng.normal(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def gen_synthetic(num_per_class: int, image_size: int = 64, seed: int = 0,
                  difficulty: str = "easy", split: str = "train") -> Dataset:
    """Draw ``num_per_class`` images for each of the 9 shape/colour classes.

    ``easy`` renders centred, fixed-size, high-contrast shapes.  ``mixed``
    adds position, scale, rotation and colour jitter, cluttered backgrounds
    and an occluding patch.
    """
    if num_per_class < 1:
        raise ValueError(f"num_per_class must be >= 1, got {num_per_class}")
    if difficulty not in ("easy", "mixed"):
        raise ValueError(f"difficulty must be 'easy' or 'mixed', got {difficulty!r}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.repeat(np.arange(NUM_CLASSES), num_per_class))
    images = np.stack([_render(rng, int(y), image_size, difficulty) for y in labels])
    return Dataset(images.astype(np.float32), labels, NUM_CLASSES, split)


# -- container ---------------------------------------------------------------

def _record_dtype(c: int, h: int, w: int) -> np.dtype:
    return np.dtype([("label", "<u4"), ("pixels", "<f4", (c * h * w,))])


def encode_dataset(ds: Dataset) -> bytes:
    m, c, h, w = ds.images.shape
    records = np.empty(m, dtype=_record_dtype(c, h, w))
    records["label"] = ds.labels
    records["pixels"] = ds.images.reshape(m, -1)
    return _HEADER.pack(MAGIC, VERSION, m, c, h, w, ds.num_classes) + records.tobytes()


def decode_dataset(buf: bytes, split: str = "train") -> Dataset:
    if len(buf) < 4:
        raise FormatError("missing magic", 0)
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic, expected {MAGIC!r}", 0)
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", len(buf))
    _, version, m, c, h, w, k = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if m < 1 or c < 1 or h < 1 or w < 1 or k < 1:
        raise FormatError(f"invalid header fields count={m} c={c} h={h} w={w} classes={k}", 8)
    rec = _record_dtype(c, h, w)
    body = len(buf) - _HEADER.size
    if body < m * rec.itemsize:
        complete = body // rec.itemsize
        raise FormatError(f"truncated file: sample {complete} of {m} is incomplete",
                          _HEADER.size + complete * rec.itemsize)
    if body > m * rec.itemsize:
        raise FormatError("trailing bytes after last sample", _HEADER.size + m * rec.itemsize)
    records = np.frombuffer(buf, dtype=rec, count=m, offset=_HEADER.size)
    labels = records["label"].astype(np.int64)
    bad = np.flatnonzero(labels >= k)
    if bad.size:
        i = int(bad[0])
        raise FormatError(f"sample {i} has label {labels[i]} >= num_classes {k}",
                          _HEADER.size + i * rec.itemsize)
    images = records["pixels"].reshape(m, c, h, w).astype(np.float32)
    return Dataset(images, labels, k, split)


def save_dataset(ds: Dataset, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_dataset(ds))


def load_dataset(path: str | os.PathLike, split: str | None = None) -> Dataset:
    with open(path, "rb") as fh:
        buf = fh.read()
    if split is None:
        split = os.path.splitext(os.path.basename(os.fspath(path)))[0]
    return decode_dataset(buf, split)
