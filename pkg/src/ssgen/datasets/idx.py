"""Reader and writer for the big-endian IDX container used by MNIST-family data."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ssgen.datasets.glyphs import SIZE, LabeledImage
from ssgen.errors import DataError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError:
        raise DataError(f"IDX file not found: {path}") from None


def _header(buf: bytes, path, magic: int, ndim: int) -> tuple[int, ...]:
    need = 4 + 4 * ndim
    if len(buf) < need:
        raise DataError(f"{path}: truncated header at byte offset {len(buf)} (need {need} bytes)")
    (found,) = struct.unpack_from(">I", buf, 0)
    if found != magic:
        raise DataError(f"{path}: bad magic 0x{found:08x} at byte offset 0, expected 0x{magic:08x}")
    return struct.unpack_from(">" + "I" * ndim, buf, 4)


def read_idx_images(path) -> np.ndarray:
    buf = _read(path)
    count, rows, cols = _header(buf, path, IMAGES_MAGIC, 3)
    offset = 16
    expected = offset + count * rows * cols
    if len(buf) < expected:
        raise DataError(f"{path}: truncated pixel data at byte offset {len(buf)}, expected {expected}")
    raw = np.frombuffer(buf, dtype=np.uint8, count=count * rows * cols, offset=offset)
    return raw.reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    buf = _read(path)
    (count,) = _header(buf, path, LABELS_MAGIC, 1)
    offset = 8
    if len(buf) < offset + count:
        raise DataError(f"{path}: truncated label data at byte offset {len(buf)}, expected {offset + count}")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=offset).astype(np.int64)


def load_idx(images_path, labels_path) -> list[LabeledImage]:
    """Load paired IDX files; pixels are scaled to [0, 1] by /255."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if images.shape[1:] != (SIZE, SIZE):
        raise DataError(f"images are {images.shape[1:]}, expected {SIZE}x{SIZE}")
    scaled = images.astype(np.float32) / 255.0
    return [LabeledImage(img, int(lab)) for img, lab in zip(scaled, labels)]


def write_idx(samples: list[LabeledImage], images_path, labels_path) -> None:
    """Write samples back out, quantising pixels to uint8 (round(255 * p))."""
    pixels = np.stack([s.pixels for s in samples]) if samples else np.zeros((0, SIZE, SIZE))
    quantised = np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)
    labels = np.array([s.label for s in samples], dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGES_MAGIC, len(samples), SIZE, SIZE))
        fh.write(quantised.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABELS_MAGIC, len(samples)))
        fh.write(labels.tobytes())
