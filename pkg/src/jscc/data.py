"""Synthetic image sources and IDX file ingestion."""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Tuple, Union

import numpy as np
from scipy.ndimage import uniform_filter

IDX_UBYTE_3D = 0x00000803


class IDXFormatError(ValueError):
    pass


class SourceKind(str, enum.Enum):
    GAUSS_BLOBS = "gauss_blobs"
    SPRITES = "sprites"


@dataclass
class DatasetHandle:
    """Fixed-shape images with values in [0, 1], flattened row-major for the models."""

    images: np.ndarray  # (n, side, side)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 3:
            raise ValueError(f"expected (n, rows, cols) images, got shape {self.images.shape}")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.images.shape[1:]

    @property
    def dim(self) -> int:
        return int(np.prod(self.images.shape[1:]))

    @property
    def flat(self) -> np.ndarray:
        return self.images.reshape(len(self), -1)

    def split(self, n_eval: int) -> Tuple["DatasetHandle", "DatasetHandle"]:
        """Disjoint (train, eval) split; the last ``n_eval`` images are held out."""
        if not 0 <= n_eval <= len(self):
            raise ValueError(f"cannot hold out {n_eval} of {len(self)} images")
        cut = len(self) - n_eval
        return DatasetHandle(self.images[:cut]), DatasetHandle(self.images[cut:])

    def batches(self, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
        """Endless stream of flattened batches, reshuffled every epoch from ``rng``."""
        flat = self.flat
        n = len(flat)
        if n == 0:
            raise ValueError("empty dataset")
        step = min(batch_size, n)
        while True:
            order = rng.permutation(n)
            for start in range(0, n - step + 1, step):
                yield flat[order[start:start + step]]


def _gauss_blobs(n: int, side: int, rng: np.random.Generator) -> np.ndarray:
    counts = rng.integers(1, 4, size=n)
    centers = rng.uniform(0.0, side - 1.0, size=(n, 3, 2))
    scales = rng.uniform(0.6, max(side / 4.0, 0.8), size=(n, 3))
    intensity = rng.uniform(0.4, 1.0, size=(n, 3))
    intensity[np.arange(3)[None, :] >= counts[:, None]] = 0.0
    grid = np.arange(side, dtype=np.float64)
    dy = grid[None, None, :] - centers[:, :, 0:1]  # (n, 3, side)
    dx = grid[None, None, :] - centers[:, :, 1:2]
    gy = np.exp(-0.5 * (dy / scales[:, :, None]) ** 2)
    gx = np.exp(-0.5 * (dx / scales[:, :, None]) ** 2)
    imgs = np.einsum("nk,nki,nkj->nij", intensity, gy, gx)
    return np.clip(imgs, 0.0, 1.0)


def _sprites(n: int, side: int, rng: np.random.Generator) -> np.ndarray:
    imgs = np.zeros((n, side, side))
    is_cross = rng.random(n) < 0.5
    h = rng.integers(2, max(side // 2, 2) + 1, size=n)
    w = rng.integers(2, max(side // 2, 2) + 1, size=n)
    top = rng.integers(0, side - h + 1)
    left = rng.integers(0, side - w + 1)
    for i in range(n):
        r0, c0, hh, ww = top[i], left[i], h[i], w[i]
        if is_cross[i]:
            imgs[i, r0:r0 + hh, c0 + ww // 2] = 1.0
            imgs[i, r0 + hh // 2, c0:c0 + ww] = 1.0
        else:
            imgs[i, r0:r0 + hh, c0:c0 + ww] = 1.0
    imgs = uniform_filter(imgs, size=(1, 3, 3), mode="constant")
    return np.clip(imgs, 0.0, 1.0)


def generate_synthetic(kind: Union[SourceKind, str], n: int, side: int, seed: int) -> DatasetHandle:
    kind = SourceKind(kind)
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 4 <= side <= 32:
        raise ValueError("side must lie in [4, 32]")
    rng = np.random.default_rng(seed)
    if kind is SourceKind.GAUSS_BLOBS:
        return DatasetHandle(_gauss_blobs(n, side, rng))
    return DatasetHandle(_sprites(n, side, rng))


def load_idx(path: Union[str, Path]) -> DatasetHandle:
    """Read an unsigned-byte 3-D IDX file (magic 0x00000803) and scale to [0, 1]."""
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise IDXFormatError(f"truncated header at offset {len(buf)}")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != IDX_UBYTE_3D:
        raise IDXFormatError(f"bad magic 0x{magic:08x} at offset 0 (expected 0x{IDX_UBYTE_3D:08x})")
    if len(buf) < 16:
        raise IDXFormatError(f"truncated dimensions at offset {len(buf)}")
    count, rows, cols = struct.unpack(">III", buf[4:16])
    need = 16 + count * rows * cols
    if len(buf) < need:
        raise IDXFormatError(f"truncated pixel data at offset {len(buf)} (expected {need} bytes)")
    if len(buf) > need:
        raise IDXFormatError(f"trailing bytes at offset {need}")
    pixels = np.frombuffer(buf, dtype=np.uint8, count=count * rows * cols, offset=16)
    return DatasetHandle(pixels.reshape(count, rows, cols).astype(np.float64) / 255.0)


def save_idx(path: Union[str, Path], images: np.ndarray) -> None:
    """Write ``images`` in [0, 1] (or uint8) as an unsigned-byte 3-D IDX file."""
    images = np.asarray(images)
    if images.dtype != np.uint8:
        images = np.round(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)
    if images.ndim != 3:
        raise ValueError("expected (n, rows, cols)")
    header = struct.pack(">IIII", IDX_UBYTE_3D, *images.shape)
    Path(path).write_bytes(header + images.tobytes())


def write_pgm(path: Union[str, Path], image: np.ndarray) -> None:
    """Binary (P5) 8-bit greyscale image from values in [0, 1]."""
    pixels = np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    rows, cols = pixels.shape
    Path(path).write_bytes(f"P5\n{cols} {rows}\n255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    cols, rows, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    data = np.frombuffer(parts[4], dtype=np.uint8, count=rows * cols)
    return data.reshape(rows, cols).astype(np.float64) / maxval


def tile_grid(rows_of_images, pad: int = 1) -> np.ndarray:
    """Tile a list of rows, each a sequence of equal-shape images, into one image."""
    rows_of_images = [list(r) for r in rows_of_images]
    h, w = np.asarray(rows_of_images[0][0]).shape
    n_rows, n_cols = len(rows_of_images), max(len(r) for r in rows_of_images)
    canvas = np.zeros((n_rows * (h + pad) + pad, n_cols * (w + pad) + pad))
    for i, row in enumerate(rows_of_images):
        for j, img in enumerate(row):
            top, left = pad + i * (h + pad), pad + j * (w + pad)
            canvas[top:top + h, left:left + w] = img
    return canvas
