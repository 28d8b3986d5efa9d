"""Synthetic shape images and IDX (MNIST-style) file I/O."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import resize_array

SHAPES = ("circle", "square", "triangle", "cross")
SUPERSAMPLE = 4

IDX_TYPES = {0x08: np.dtype(">u1")}
IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class Dataset:
    images: np.ndarray  # n x S x S x C, float32 in [0, 1]
    labels: np.ndarray  # n, int64
    seed: int | None = None
    class_names: tuple[str, ...] = SHAPES

    def __len__(self):
        return len(self.labels)

    def split(self, n_first: int) -> tuple["Dataset", "Dataset"]:
        a = Dataset(self.images[:n_first], self.labels[:n_first], self.seed, self.class_names)
        b = Dataset(self.images[n_first:], self.labels[n_first:], self.seed, self.class_names)
        return a, b


# -- synthetic shapes ----------------------------------------------------

def _shape_mask(kind: str, u: np.ndarray, v: np.ndarray, r: float) -> np.ndarray:
    if kind == "circle":
        return u * u + v * v <= r * r
    if kind == "square":
        half = 0.8 * r
        return (np.abs(u) <= half) & (np.abs(v) <= half)
    if kind == "triangle":
        inside = np.ones(u.shape, dtype=bool)
        for phi in (-np.pi / 2, np.pi / 6, 5 * np.pi / 6):
            inside &= u * np.cos(phi) + v * np.sin(phi) <= 0.5 * r
        return inside
    if kind == "cross":
        w = 0.28 * r
        au, av = np.abs(u), np.abs(v)
        return ((au <= w) & (av <= r)) | ((av <= w) & (au <= r))
    raise ValueError(f"unknown shape {kind!r}")


def render_shape(kind: str, side: int, channels: int, rng: np.random.Generator) -> np.ndarray:
    """One anti-aliased shape on a noisy background, values in [0, 1]."""
    r = rng.uniform(0.30, 0.42) * side
    cx, cy = rng.uniform(r + 1.0, side - r - 1.0, size=2)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    background = rng.uniform(0.0, 0.35)
    contrast = rng.uniform(0.55, 0.75)
    fg_tint = rng.uniform(0.75, 1.0, size=channels)
    bg_tint = rng.uniform(0.75, 1.0, size=channels)
    noise_std = rng.uniform(0.01, 0.04)

    fine = side * SUPERSAMPLE
    coords = (np.arange(fine) + 0.5) / SUPERSAMPLE
    yy, xx = np.meshgrid(coords - cy, coords - cx, indexing="ij")
    c, s = np.cos(theta), np.sin(theta)
    u = c * xx + s * yy
    v = -s * xx + c * yy
    mask = _shape_mask(kind, u, v, r).astype(np.float64)
    alpha = mask.reshape(side, SUPERSAMPLE, side, SUPERSAMPLE).mean(axis=(1, 3))[..., None]

    bg = background * bg_tint
    fg = min(1.0, background + contrast) * fg_tint
    img = bg * (1.0 - alpha) + fg * alpha
    img = img + rng.normal(0.0, noise_std, size=(side, side, channels))
    return np.clip(img, 0.0, 1.0)


def generate_shapes(n: int, side: int = 40, seed: int = 0, channels: int = 3,
                    num_classes: int = len(SHAPES)) -> Dataset:
    """Class-balanced shape images; image ``i`` draws from its own derived seed."""
    if side < 16:
        raise ValueError(f"image side {side} < 16 is too small to render shapes")
    if not 1 <= num_classes <= len(SHAPES):
        raise ValueError(f"num_classes must be in [1, {len(SHAPES)}]")
    if n < num_classes:
        raise ValueError(f"need at least {num_classes} images, got {n}")
    labels = np.random.default_rng([seed, 0x5EED]).permutation(np.arange(n) % num_classes)
    images = np.empty((n, side, side, channels), dtype=np.float32)
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        images[i] = render_shape(SHAPES[labels[i]], side, channels, rng)
    return Dataset(images, labels.astype(np.int64), seed, SHAPES[:num_classes])


# -- IDX -------------------------------------------------------------------

def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def parse_idx(buf: bytes) -> np.ndarray:
    """Decode an IDX byte string into an array of its declared shape."""
    if len(buf) < 4:
        raise IdxFormatError("truncated magic number", len(buf))
    zero, type_code, ndim = struct.unpack(">HBB", buf[:4])
    if zero != 0 or type_code not in IDX_TYPES or ndim < 1:
        raise IdxFormatError(f"bad magic 0x{int.from_bytes(buf[:4], 'big'):08x}", 0)
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise IdxFormatError("truncated dimension header", len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    dtype = IDX_TYPES[type_code]
    need = header + int(np.prod(dims)) * dtype.itemsize
    if len(buf) < need:
        raise IdxFormatError(f"truncated data: expected {need} bytes, file has {len(buf)}", len(buf))
    if len(buf) > need:
        raise IdxFormatError(f"{len(buf) - need} trailing bytes after data", need)
    return np.frombuffer(buf, dtype=dtype, offset=header).reshape(dims).astype(np.uint8)


def read_idx(path) -> np.ndarray:
    with _open(path) as fh:
        return parse_idx(fh.read())


def encode_idx(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise ValueError(f"only unsigned-byte IDX is supported, got {arr.dtype}")
    header = struct.pack(">HBB", 0, 0x08, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def write_idx(path, arr: np.ndarray) -> None:
    data = encode_idx(arr)
    if Path(path).suffix == ".gz":
        with gzip.open(path, "wb") as fh:
            fh.write(data)
    else:
        Path(path).write_bytes(data)


def load_idx(images_path, labels_path, side: int, channels: int = 3) -> Dataset:
    """Grayscale IDX images replicated to ``channels``, scaled to [0, 1], resized to ``side``."""
    with _open(images_path) as fh:
        ibuf = fh.read()
    with _open(labels_path) as fh:
        lbuf = fh.read()
    if len(ibuf) >= 4 and int.from_bytes(ibuf[:4], "big") != IMAGES_MAGIC:
        raise IdxFormatError(f"image file magic 0x{int.from_bytes(ibuf[:4], 'big'):08x} != 0x{IMAGES_MAGIC:08x}", 0)
    if len(lbuf) >= 4 and int.from_bytes(lbuf[:4], "big") != LABELS_MAGIC:
        raise IdxFormatError(f"label file magic 0x{int.from_bytes(lbuf[:4], 'big'):08x} != 0x{LABELS_MAGIC:08x}", 0)
    raw = parse_idx(ibuf)
    labels = parse_idx(lbuf)
    if raw.shape[0] != labels.shape[0]:
        # both counts live in the first dimension field, right after the magic
        raise IdxFormatError(f"image count {raw.shape[0]} != label count {labels.shape[0]}", 4)
    imgs = raw.astype(np.float32)[..., None] / 255.0
    imgs = np.repeat(imgs, channels, axis=-1)
    if imgs.shape[1:3] != (side, side):
        imgs = resize_array(imgs, side, side).astype(np.float32)
    return Dataset(np.clip(imgs, 0.0, 1.0), labels.astype(np.int64), None,
                   tuple(str(i) for i in range(int(labels.max()) + 1)) if labels.size else ())
