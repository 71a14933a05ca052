"""2D parallel-beam CT geometry: system matrix, view partitioning, projectors.

The image is an ``n_side x n_side`` grid of square pixels of side
``pixel_pitch`` centered on the origin.  Row 0 is the top of the image and
the flat pixel index is ``row * n_side + col``.  A view at angle ``theta``
consists of ``n_channels`` parallel rays with direction
``(-sin theta, cos theta)``; channel ``d`` is offset laterally by
``(d - (n_channels - 1) / 2) * channel_pitch``.  Matrix entries are exact
ray/pixel intersection lengths, so projections are line integrals.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Geometry",
    "SparseViewMatrix",
    "ViewSubset",
    "build_system_matrix",
    "partition_views",
    "forward_project",
    "back_project",
    "save_system_matrix",
    "load_system_matrix",
    "roi_mask",
]

MATRIX_MAGIC = "MACEMAT1"

# Entries shorter than this fraction of a pixel side are corner-grazing
# artifacts of the plane-crossing enumeration and are dropped.
_LENGTH_FLOOR = 1e-12


@dataclass(frozen=True)
class Geometry:
    """Acquisition geometry for a 2D parallel-beam scan.

    Attributes
    ----------
    n_side : int
        Pixels per image side; the image has ``n_side ** 2`` unknowns.
    pixel_pitch : float
        Pixel side length in physical units.
    n_views : int
        Number of projection angles.
    n_channels : int
        Detector channels per view (one ray each).
    channel_pitch : float
        Detector channel spacing in physical units.
    view_angles : np.ndarray
        Strictly increasing angles in radians within [0, pi).  Defaults to
        ``n_views`` uniform samples of [0, pi).
    """

    n_side: int
    pixel_pitch: float
    n_views: int
    n_channels: int
    channel_pitch: float
    view_angles: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.n_side < 1:
            raise ValueError("n_side must be >= 1")
        if self.n_views < 1:
            raise ValueError("n_views must be >= 1")
        if self.n_channels < 1:
            raise ValueError("n_channels must be >= 1")
        if self.pixel_pitch <= 0 or self.channel_pitch <= 0:
            raise ValueError("pitches must be > 0")
        if self.view_angles is None:
            angles = np.arange(self.n_views) * (np.pi / self.n_views)
        else:
            angles = np.asarray(self.view_angles, dtype=np.float64)
            if angles.shape != (self.n_views,):
                raise ValueError("view_angles must have length n_views")
            if np.any(angles < 0.0) or np.any(angles >= np.pi):
                raise ValueError("view_angles must lie in [0, pi)")
            if self.n_views > 1 and np.any(np.diff(angles) <= 0.0):
                raise ValueError("view_angles must be strictly increasing")
        angles = np.ascontiguousarray(angles, dtype=np.float64)
        angles.setflags(write=False)
        object.__setattr__(self, "view_angles", angles)

    @property
    def n_pixels(self) -> int:
        return self.n_side * self.n_side

    @property
    def image_width(self) -> float:
        return self.n_side * self.pixel_pitch

    def channel_offsets(self) -> np.ndarray:
        """Lateral ray offsets, centered on the detector midpoint."""
        d = np.arange(self.n_channels, dtype=np.float64)
        return (d - (self.n_channels - 1) / 2.0) * self.channel_pitch


@dataclass(frozen=True)
class ViewSubset:
    """One interleaved class of view indices assigned to a single agent."""

    subset_index: int
    view_indices: tuple

    def __len__(self) -> int:
        return len(self.view_indices)


@dataclass
class SparseViewMatrix:
    """Sparse forward operator for a single view, one CSR-style row per channel.

    ``row_ptr`` has length ``n_channels + 1``; row ``d`` owns entries
    ``row_ptr[d]:row_ptr[d + 1]`` of ``cols`` (pixel indices, sorted) and
    ``lens`` (intersection lengths).  Instances are immutable by convention
    and safe to share across workers.
    """

    view_index: int
    n_channels: int
    n_pixels: int
    row_ptr: np.ndarray
    cols: np.ndarray
    lens: np.ndarray

    def __post_init__(self):
        self._csr = None
        if self.row_ptr.shape != (self.n_channels + 1,):
            raise ValueError("row_ptr must have length n_channels + 1")
        if self.cols.shape != self.lens.shape:
            raise ValueError("cols and lens must have equal length")

    @property
    def nnz(self) -> int:
        return int(self.cols.shape[0])

    def row(self, d: int):
        lo, hi = self.row_ptr[d], self.row_ptr[d + 1]
        return self.cols[lo:hi], self.lens[lo:hi]

    def row_sums(self) -> np.ndarray:
        out = np.zeros(self.n_channels)
        np.add.at(out, np.repeat(np.arange(self.n_channels), np.diff(self.row_ptr)), self.lens)
        return out

    def to_csr(self) -> sp.csr_matrix:
        if self._csr is None:
            self._csr = sp.csr_matrix(
                (self.lens, self.cols.astype(np.int64), self.row_ptr),
                shape=(self.n_channels, self.n_pixels),
            )
        return self._csr


def partition_views(n_views: int, n_subsets: int) -> list[ViewSubset]:
    """Split view indices into interleaved subsets: subset i gets {m : m mod N == i}.

    Raises ValueError unless ``1 <= n_subsets <= n_views`` (an agent with no
    views would have an undefined local subproblem).
    """
    if n_subsets < 1:
        raise ValueError("n_subsets must be >= 1")
    if n_subsets > n_views:
        raise ValueError("n_subsets must not exceed n_views")
    return [
        ViewSubset(subset_index=i, view_indices=tuple(range(i, n_views, n_subsets)))
        for i in range(n_subsets)
    ]


def _trace_axis_aligned(offset: float, lo_edge: float, pitch: float, n_side: int, along_rows: bool):
    """Ray parallel to a grid axis: one full-length chord per crossed line of pixels."""
    idx = int(np.floor((offset - lo_edge) / pitch))
    if idx < 0 or idx >= n_side:
        return np.empty(0, dtype=np.int32), np.empty(0)
    if along_rows:
        pix = np.arange(n_side, dtype=np.int32) * n_side + np.int32(idx)
    else:
        pix = np.int32(idx) * n_side + np.arange(n_side, dtype=np.int32)
    return pix, np.full(n_side, pitch)


def _trace_ray(px: float, py: float, ux: float, uy: float, geom: Geometry):
    """Pixel indices and intersection lengths for the ray p + t*u (u unit length)."""
    n_side = geom.n_side
    pitch = geom.pixel_pitch
    half = 0.5 * geom.image_width
    x0, y0 = -half, half  # left edge, top edge

    if ux == 0.0:
        return _trace_axis_aligned(px, x0, pitch, n_side, along_rows=True)
    if uy == 0.0:
        # rows count downward from y0
        return _trace_axis_aligned(y0 - py, 0.0, pitch, n_side, along_rows=False)

    edges = np.arange(n_side + 1, dtype=np.float64) * pitch
    tx = (x0 + edges - px) / ux
    ty = (y0 - edges - py) / uy
    t_lo = max(min(tx[0], tx[-1]), min(ty[0], ty[-1]))
    t_hi = min(max(tx[0], tx[-1]), max(ty[0], ty[-1]))
    if t_hi <= t_lo:
        return np.empty(0, dtype=np.int32), np.empty(0)

    ts = np.concatenate((tx, ty))
    ts = ts[(ts > t_lo) & (ts < t_hi)]
    ts = np.concatenate(([t_lo], np.sort(ts), [t_hi]))
    seg = np.diff(ts)
    keep = seg > _LENGTH_FLOOR * pitch
    if not np.any(keep):
        return np.empty(0, dtype=np.int32), np.empty(0)
    mid = 0.5 * (ts[:-1] + ts[1:])[keep]
    seg = seg[keep]
    col = np.floor((px + mid * ux - x0) / pitch).astype(np.int64)
    row = np.floor((y0 - (py + mid * uy)) / pitch).astype(np.int64)
    np.clip(col, 0, n_side - 1, out=col)
    np.clip(row, 0, n_side - 1, out=row)
    pix = (row * n_side + col).astype(np.int32)
    order = np.argsort(pix, kind="stable")
    return pix[order], seg[order]


def build_system_matrix(geom: Geometry) -> list[SparseViewMatrix]:
    """Trace every (view, channel) ray and assemble one sparse matrix per view.

    Output is deterministic: rays are traced in (view, channel) order and
    row entries are sorted by pixel index.
    """
    offsets = geom.channel_offsets()
    matrices = []
    for k in range(geom.n_views):
        theta = geom.view_angles[k]
        ux, uy = -np.sin(theta), np.cos(theta)
        ex, ey = np.cos(theta), np.sin(theta)
        row_ptr = np.zeros(geom.n_channels + 1, dtype=np.int64)
        cols_parts, lens_parts = [], []
        for d in range(geom.n_channels):
            s = offsets[d]
            pix, seg = _trace_ray(s * ex, s * ey, ux, uy, geom)
            row_ptr[d + 1] = row_ptr[d] + pix.shape[0]
            cols_parts.append(pix)
            lens_parts.append(seg)
        matrices.append(
            SparseViewMatrix(
                view_index=k,
                n_channels=geom.n_channels,
                n_pixels=geom.n_pixels,
                row_ptr=row_ptr,
                cols=np.concatenate(cols_parts) if cols_parts else np.empty(0, dtype=np.int32),
                lens=np.concatenate(lens_parts) if lens_parts else np.empty(0),
            )
        )
    return matrices


def forward_project(matrices: list[SparseViewMatrix], x: np.ndarray) -> np.ndarray:
    """Apply every view matrix to the image: out[k, d] = sum_j A[k, d, j] * x[j]."""
    x = np.asarray(x, dtype=np.float64)
    n = matrices[0].n_pixels
    if x.shape != (n,):
        raise ValueError(f"image must have shape ({n},), got {x.shape}")
    out = np.empty((len(matrices), matrices[0].n_channels))
    for k, mat in enumerate(matrices):
        out[k] = mat.to_csr() @ x
    return out


def back_project(matrices: list[SparseViewMatrix], sinogram: np.ndarray) -> np.ndarray:
    """Exact transpose of :func:`forward_project`."""
    sinogram = np.asarray(sinogram, dtype=np.float64)
    expected = (len(matrices), matrices[0].n_channels)
    if sinogram.shape != expected:
        raise ValueError(f"sinogram must have shape {expected}, got {sinogram.shape}")
    out = np.zeros(matrices[0].n_pixels)
    for k, mat in enumerate(matrices):
        out += mat.to_csr().T @ sinogram[k]
    return out


def roi_mask(geom: Geometry) -> np.ndarray:
    """Boolean mask of pixels whose centers fall in the inscribed circle."""
    half = 0.5 * geom.image_width
    c = (np.arange(geom.n_side) + 0.5) * geom.pixel_pitch - half
    xx, yy = np.meshgrid(c, c)
    return ((xx**2 + yy**2) <= half**2).ravel()


def save_system_matrix(path, matrices: list[SparseViewMatrix]) -> None:
    """Write the per-view sparse matrices to the binary cache format.

    Layout: ASCII line ``MACEMAT1``, ASCII line ``n_views n_channels n``,
    then per view, per row, a little-endian uint32 entry count followed by
    (uint32 pixel index, float32 length) pairs.
    """
    pair = np.dtype([("i", "<u4"), ("v", "<f4")])
    with open(path, "wb") as fh:
        fh.write(f"{MATRIX_MAGIC}\n".encode("ascii"))
        fh.write(f"{len(matrices)} {matrices[0].n_channels} {matrices[0].n_pixels}\n".encode("ascii"))
        for mat in matrices:
            for d in range(mat.n_channels):
                cols, lens = mat.row(d)
                fh.write(np.array(cols.shape[0], dtype="<u4").tobytes())
                rec = np.empty(cols.shape[0], dtype=pair)
                rec["i"] = cols
                rec["v"] = lens
                fh.write(rec.tobytes())


def load_system_matrix(path) -> list[SparseViewMatrix]:
    """Read matrices written by :func:`save_system_matrix` (float32 lengths)."""
    pair = np.dtype([("i", "<u4"), ("v", "<f4")])
    with open(path, "rb") as fh:
        magic = fh.readline().decode("ascii").strip()
        if magic != MATRIX_MAGIC:
            raise ValueError(f"bad matrix file magic: {magic!r}")
        n_views, n_channels, n = (int(t) for t in fh.readline().split())
        matrices = []
        for k in range(n_views):
            row_ptr = np.zeros(n_channels + 1, dtype=np.int64)
            cols_parts, lens_parts = [], []
            for d in range(n_channels):
                (count,) = np.frombuffer(fh.read(4), dtype="<u4")
                rec = np.frombuffer(fh.read(8 * int(count)), dtype=pair)
                row_ptr[d + 1] = row_ptr[d] + count
                cols_parts.append(rec["i"].astype(np.int32))
                lens_parts.append(rec["v"].astype(np.float64))
            matrices.append(
                SparseViewMatrix(
                    view_index=k,
                    n_channels=n_channels,
                    n_pixels=n,
                    row_ptr=row_ptr,
                    cols=np.concatenate(cols_parts) if cols_parts else np.empty(0, dtype=np.int32),
                    lens=np.concatenate(lens_parts) if lens_parts else np.empty(0),
                )
            )
    return matrices
