"""Pluggable image denoisers for the PnP consensus loop.

``quadratic-prox`` is the proximal map of a convex quadratic smoothness
penalty and is therefore firmly non-expansive, which is the hypothesis the
PnP convergence guarantee needs.  ``boxcar`` is a plain window mean: not
firmly non-expansive in general, included to exercise the empirically
convergent regime.  Any image-to-image callable can be used in its place.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .models import graph_laplacian

__all__ = ["DenoiserSpec", "make_denoiser", "denoise"]

_DENSE_LIMIT = 4096


@dataclass(frozen=True)
class DenoiserSpec:
    """Denoiser selection: kind in {identity, quadratic-prox, boxcar}."""

    kind: str = "identity"
    lam: float = 1.0
    radius: int = 1

    def __post_init__(self):
        if self.kind not in ("identity", "quadratic-prox", "boxcar"):
            raise ValueError(f"unknown denoiser kind {self.kind!r}")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.radius < 1:
            raise ValueError("radius must be >= 1")


class _QuadraticProx:
    """H(v) = argmin_z 0.5 * lam * ||D z||^2 + 0.5 * ||z - v||^2, i.e.
    (I + lam * L) z = v with L the weighted 8-neighborhood Laplacian."""

    def __init__(self, lam: float, n_side: int):
        import scipy.sparse as sp

        self.lam = lam
        self.n = n_side * n_side
        self._op = (sp.identity(self.n, format="csr") + lam * graph_laplacian(n_side)).tocsr()
        if self.n <= _DENSE_LIMIT:
            self._cho = sla.cho_factor(self._op.toarray())
        else:
            self._cho = None

    def __call__(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if self._cho is not None:
            return sla.cho_solve(self._cho, v)
        z, info = spla.cg(self._op, v, rtol=1e-10, atol=0.0, maxiter=10 * self.n)
        if info != 0:
            raise RuntimeError(f"quadratic-prox CG failed to converge (info={info})")
        return z


class _Boxcar:
    """Window mean over a (2r+1)^2 neighborhood, renormalized at the borders."""

    def __init__(self, radius: int, n_side: int):
        self.radius = radius
        self.n_side = n_side

    def __call__(self, v: np.ndarray) -> np.ndarray:
        m = self.n_side
        img = np.asarray(v, dtype=np.float64).reshape(m, m)
        r = self.radius
        # summed-area table with a zero border row/col
        sat = np.zeros((m + 1, m + 1))
        sat[1:, 1:] = np.cumsum(np.cumsum(img, axis=0), axis=1)
        i = np.arange(m)
        lo_r, hi_r = np.maximum(i - r, 0), np.minimum(i + r + 1, m)
        lo_c, hi_c = lo_r, hi_r
        box = (
            sat[np.ix_(hi_r, hi_c)]
            - sat[np.ix_(lo_r, hi_c)]
            - sat[np.ix_(hi_r, lo_c)]
            + sat[np.ix_(lo_r, lo_c)]
        )
        counts = np.outer(hi_r - lo_r, hi_c - lo_c)
        return (box / counts).ravel()


@lru_cache(maxsize=32)
def _build(spec: DenoiserSpec, n_side: int):
    if spec.kind == "identity":
        return lambda v: np.array(v, dtype=np.float64)
    if spec.kind == "quadratic-prox":
        return _QuadraticProx(spec.lam, n_side)
    return _Boxcar(spec.radius, n_side)


def make_denoiser(spec: DenoiserSpec, n_side: int):
    """Return a callable H mapping length-n images to length-n images."""
    return _build(spec, n_side)


def denoise(spec: DenoiserSpec, v: np.ndarray, n_side: int) -> np.ndarray:
    """Apply the denoiser described by ``spec`` to one image."""
    return make_denoiser(spec, n_side)(v)
