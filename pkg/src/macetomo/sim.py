"""Synthetic data generation: deterministic phantoms and noisy sinograms.

Phantom values are attenuation coefficients on a [0, 0.05] scale.  Phantom
edges are anti-aliased by area-averaging an 8x oversampled indicator, so
projections approximate the continuous line integrals rather than a
staircase.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Geometry, forward_project
from .models import WeightModel

__all__ = ["SinogramSet", "PHANTOM_KINDS", "make_phantom", "simulate_sinogram"]

PHANTOM_KINDS = ("shepp-logan-like", "uniform-disk", "checker")

_OVERSAMPLE = 8

# (cx, cy, semi_x, semi_y, tilt_radians, added_value) in units of the image
# half-width; mirrored pairs keep the base phantom symmetric under 180-degree
# rotation, the final unpaired blob breaks it.
_ELLIPSES = [
    (0.0, 0.0, 0.86, 0.86, 0.0, 0.020),
    (0.0, 0.0, 0.66, 0.82, 0.0, 0.010),
    (0.30, 0.18, 0.22, 0.14, 0.6, 0.012),
    (-0.30, -0.18, 0.22, 0.14, 0.6, 0.012),
    (0.26, -0.36, 0.16, 0.10, -0.4, -0.008),
    (-0.26, 0.36, 0.16, 0.10, -0.4, -0.008),
]
_ASYM_BLOB = (0.0, 0.52, 0.10, 0.18, 0.0, 0.010)


@dataclass(frozen=True)
class SinogramSet:
    """Projection data with its per-entry statistical weights."""

    y: np.ndarray
    weights: np.ndarray


def _fine_grid(geom: Geometry):
    m = geom.n_side * _OVERSAMPLE
    # offsets from the grid center: index reflection negates them exactly,
    # so symmetric shapes rasterize symmetrically down to the bit
    c = (np.arange(m) - (m - 1) / 2.0) * (geom.pixel_pitch / _OVERSAMPLE)
    return np.meshgrid(c, c)


def _downsample(fine: np.ndarray, n_side: int) -> np.ndarray:
    return fine.reshape(n_side, _OVERSAMPLE, n_side, _OVERSAMPLE).mean(axis=(1, 3)).ravel()


def make_phantom(kind: str, geom: Geometry, symmetric: bool = False) -> np.ndarray:
    """Deterministic phantom image for the given geometry.

    ``symmetric=True`` drops the unpaired feature of the ellipse phantom so
    the result is invariant under 180-degree rotation.
    """
    if kind not in PHANTOM_KINDS:
        raise ValueError(f"unknown phantom kind {kind!r}; pick one of {PHANTOM_KINDS}")
    n_side = geom.n_side
    half = 0.5 * geom.image_width
    if kind == "checker":
        cell = max(1, n_side // 8)
        r, c = np.divmod(np.arange(n_side * n_side), n_side)
        return np.where(((r // cell) + (c // cell)) % 2 == 0, 0.04, 0.0)

    xx, yy = _fine_grid(geom)
    if kind == "uniform-disk":
        fine = np.where(xx**2 + yy**2 <= (0.7 * half) ** 2, 0.04, 0.0)
        return _downsample(fine, n_side)

    fine = np.zeros_like(xx)
    shapes = list(_ELLIPSES) if symmetric else list(_ELLIPSES) + [_ASYM_BLOB]
    for cx, cy, sa, sb, tilt, val in shapes:
        dx = xx - cx * half
        dy = yy - cy * half
        ct, st = np.cos(tilt), np.sin(tilt)
        u = (ct * dx + st * dy) / (sa * half)
        w = (-st * dx + ct * dy) / (sb * half)
        fine += np.where(u * u + w * w <= 1.0, val, 0.0)
    return _downsample(np.clip(fine, 0.0, 0.05), n_side)


def simulate_sinogram(
    phantom: np.ndarray,
    matrices,
    seed: int,
    counts_scale: float = 1.0,
    weight_kind: str = "exp",
) -> SinogramSet:
    """Project the phantom and add Gaussian noise with per-entry variance
    1 / (Lambda * counts_scale).

    Weights Lambda come from ``WeightModel``: ``exp`` mimics inverse-variance
    photon statistics on the clean projections, ``identity`` is all ones.
    ``counts_scale=inf`` turns the noise off; the stored weights do not
    depend on it.
    """
    clean = forward_project(matrices, np.asarray(phantom, dtype=np.float64))
    if weight_kind == "exp":
        weights = WeightModel.from_sinogram(clean).per_view
    elif weight_kind == "identity":
        weights = WeightModel.identity(*clean.shape).per_view
    else:
        raise ValueError(f"unknown weight model {weight_kind!r}")
    if counts_scale <= 0:
        raise ValueError("counts_scale must be > 0 (use inf to disable noise)")
    if np.isinf(counts_scale):
        y = clean.copy()
    else:
        rng = np.random.default_rng(seed)
        std = 1.0 / np.sqrt(weights * counts_scale)
        y = clean + rng.standard_normal(clean.shape) * std
    return SinogramSet(y=y, weights=weights)
