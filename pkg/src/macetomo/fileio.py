"""On-disk formats: image and sinogram containers and the 16-bit PGM preview.

All binary payloads are little-endian float32; headers are short ASCII lines
so files remain identifiable with ``head``.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "save_image",
    "load_image",
    "save_sinogram",
    "load_sinogram",
    "save_pgm",
]

IMAGE_MAGIC = "MACEIMG1"
SINO_MAGIC = "MACESINO1"


def save_image(path, image: np.ndarray, rows: int, cols: int) -> None:
    """Write ``MACEIMG1``: header, "rows cols", float32 LE row-major pixels."""
    image = np.asarray(image, dtype=np.float64).reshape(rows, cols)
    with open(path, "wb") as fh:
        fh.write(f"{IMAGE_MAGIC}\n".encode("ascii"))
        fh.write(f"{rows} {cols}\n".encode("ascii"))
        fh.write(image.astype("<f4").tobytes())


def load_image(path) -> np.ndarray:
    """Read a ``MACEIMG1`` file; returns a (rows, cols) float64 array."""
    with open(path, "rb") as fh:
        magic = fh.readline().decode("ascii").strip()
        if magic != IMAGE_MAGIC:
            raise ValueError(f"bad image file magic: {magic!r}")
        rows, cols = (int(t) for t in fh.readline().split())
        data = np.frombuffer(fh.read(4 * rows * cols), dtype="<f4")
    return data.astype(np.float64).reshape(rows, cols)


def save_sinogram(path, y: np.ndarray, weights: np.ndarray) -> None:
    """Write ``MACESINO1``: header, "n_views n_channels", then the data values
    followed by the weight values (both float32 LE, views outer)."""
    y = np.asarray(y, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if y.ndim != 2 or weights.shape != y.shape:
        raise ValueError("y and weights must be matching (n_views, n_channels) arrays")
    with open(path, "wb") as fh:
        fh.write(f"{SINO_MAGIC}\n".encode("ascii"))
        fh.write(f"{y.shape[0]} {y.shape[1]}\n".encode("ascii"))
        fh.write(y.astype("<f4").tobytes())
        fh.write(weights.astype("<f4").tobytes())


def load_sinogram(path):
    """Read a ``MACESINO1`` file; returns (y, weights) float64 arrays."""
    with open(path, "rb") as fh:
        magic = fh.readline().decode("ascii").strip()
        if magic != SINO_MAGIC:
            raise ValueError(f"bad sinogram file magic: {magic!r}")
        n_views, n_channels = (int(t) for t in fh.readline().split())
        count = n_views * n_channels
        y = np.frombuffer(fh.read(4 * count), dtype="<f4")
        w = np.frombuffer(fh.read(4 * count), dtype="<f4")
    shape = (n_views, n_channels)
    return y.astype(np.float64).reshape(shape), w.astype(np.float64).reshape(shape)


def save_pgm(path, image: np.ndarray) -> None:
    """Write a binary 16-bit PGM preview, min-max scaled to [0, 65535].

    Sample values are big-endian per the netpbm convention for maxval > 255.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("preview requires a 2D image")
    lo, hi = float(img.min()), float(img.max())
    if hi > lo:
        scaled = np.round((img - lo) / (hi - lo) * 65535.0)
    else:
        scaled = np.zeros_like(img)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n65535\n".encode("ascii"))
        fh.write(scaled.astype(">u2").tobytes())
