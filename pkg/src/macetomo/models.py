"""Cost functions for MAP reconstruction: weighted-least-squares likelihood,
quadratic and Q-GGMRF neighborhood priors, and the global/local objectives.

The global objective is

    f(x; beta) = sum_k 0.5 * ||y_k - A_k x||^2_{Lambda_k} + beta * h(x)

and the local objective of view subset ``i`` keeps that subset's data terms
plus ``beta / N`` times the prior, so the locals sum exactly to the global.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .geometry import Geometry, ViewSubset

__all__ = [
    "QUADRATIC",
    "QGGMRF",
    "PriorParams",
    "WeightModel",
    "ReconProblem",
    "graph_laplacian",
    "neighbor_pairs",
    "neighbor_table",
    "qggmrf_potential",
    "qggmrf_influence",
    "qggmrf_surrogate_coef",
    "quadratic_prior_matrix",
    "likelihood_cost",
    "prior_cost",
    "prior_gradient",
    "map_cost",
    "local_cost",
    "map_gradient",
    "local_gradient",
]

QUADRATIC = "quadratic-mrf"
QGGMRF = "qggmrf"

# 8-neighborhood offsets (row, col) and raw pair weights: 1 for edge-adjacent,
# 1/sqrt(2) for diagonal.  Weights are normalized by the interior incident sum
# (4 + 2*sqrt(2)) — a single global constant keeps w_sr == w_rs, which the
# pairwise prior and its ICD updates rely on.
_OFFSETS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
_RAW_W = [1 / np.sqrt(2), 1.0, 1 / np.sqrt(2), 1.0, 1.0, 1 / np.sqrt(2), 1.0, 1 / np.sqrt(2)]
_W_NORM = 4.0 + 2.0 * np.sqrt(2.0)


@dataclass(frozen=True)
class PriorParams:
    """Prior model configuration.

    ``kind`` is ``"quadratic-mrf"`` or ``"qggmrf"``.  The quadratic prior is
    beta * x^T B x with B the half-Laplacian of the weighted 8-neighborhood
    graph plus ``eps_reg * I`` (the ridge makes B positive definite, as the
    spectral analysis requires; it is kept in every cost/gradient path so all
    solver routes minimize the same function).  The Q-GGMRF prior is
    beta * sum_pairs w_sr rho(x_s - x_r) with the standard four-parameter
    potential (p, q, T, sigma_x).
    """

    kind: str = QUADRATIC
    beta: float = 1.0
    p: float = 2.0
    q: float = 1.2
    T: float = 1.0
    sigma_x: float = 1.0
    eps_reg: float = 1e-8

    def __post_init__(self):
        if self.kind not in (QUADRATIC, QGGMRF):
            raise ValueError(f"unknown prior kind {self.kind!r}")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.kind == QGGMRF:
            if not (1.0 <= self.q <= self.p <= 2.0):
                raise ValueError("Q-GGMRF requires 1 <= q <= p <= 2")
            if self.T <= 0 or self.sigma_x <= 0:
                raise ValueError("Q-GGMRF requires T > 0 and sigma_x > 0")
        if self.eps_reg < 0:
            raise ValueError("eps_reg must be >= 0")

    def with_beta(self, beta: float) -> "PriorParams":
        return PriorParams(self.kind, beta, self.p, self.q, self.T, self.sigma_x, self.eps_reg)


def neighbor_table(n_side: int):
    """Per-pixel neighbor indices and weights.

    Returns ``(idx, w)`` of shape (n, 8); missing neighbors (image border)
    carry index -1 and weight 0.
    """
    n = n_side * n_side
    rows, cols = np.divmod(np.arange(n), n_side)
    idx = np.full((n, 8), -1, dtype=np.int64)
    w = np.zeros((n, 8))
    for k, (dr, dc) in enumerate(_OFFSETS):
        rr, cc = rows + dr, cols + dc
        ok = (rr >= 0) & (rr < n_side) & (cc >= 0) & (cc < n_side)
        idx[ok, k] = rr[ok] * n_side + cc[ok]
        w[ok, k] = _RAW_W[k] / _W_NORM
    return idx, w


def neighbor_pairs(n_side: int):
    """Unique neighbor pairs (s < r) with their weights, for pairwise sums."""
    idx, w = neighbor_table(n_side)
    s = np.repeat(np.arange(n_side * n_side), 8)
    r = idx.ravel()
    ww = w.ravel()
    keep = r > s
    return s[keep], r[keep], ww[keep]


def qggmrf_potential(delta, p: float, q: float, T: float, sigma_x: float):
    """Q-GGMRF potential rho(delta); even, convex, quadratic near zero."""
    ad = np.abs(np.asarray(delta, dtype=np.float64))
    u = ad / (T * sigma_x)
    frac = np.zeros_like(u)  # at delta = 0 the potential itself vanishes
    pos = u > 0.0
    um = u[pos] ** (q - p)
    frac[pos] = um / (1.0 + um)
    out = (ad**p / (p * sigma_x**p)) * frac
    return out if out.ndim else float(out)


def qggmrf_influence(delta, p: float, q: float, T: float, sigma_x: float):
    """Derivative rho'(delta); odd function of delta."""
    d = np.asarray(delta, dtype=np.float64)
    ad = np.abs(d)
    u = ad / (T * sigma_x)
    out = np.zeros_like(d)
    pos = ad > 0.0
    um = u[pos] ** (q - p)
    out[pos] = (
        np.sign(d[pos])
        * (ad[pos] ** (p - 1) / sigma_x**p)
        * um
        * (q / p + um)
        / (1.0 + um) ** 2
    )
    return out


def qggmrf_surrogate_coef(delta, p: float, q: float, T: float, sigma_x: float):
    """Symmetric-bound surrogate curvature rho'(delta) / delta.

    Non-increasing in |delta| for this potential family, so it majorizes the
    1D restriction and each surrogate step descends.  The delta -> 0 limit is
    1 / sigma_x^2 for p = 2; smaller |delta| values are floored to keep the
    coefficient finite for p < 2.
    """
    d = np.abs(np.asarray(delta, dtype=np.float64))
    floor = 1e-9 * T * sigma_x
    d = np.maximum(d, floor)
    if p == 2.0:
        small = d <= floor
        out = qggmrf_influence(d, p, q, T, sigma_x) / d
        return np.where(small, 1.0 / sigma_x**2, out)
    return qggmrf_influence(d, p, q, T, sigma_x) / d


def graph_laplacian(n_side: int) -> sp.csr_matrix:
    """Weighted 8-neighborhood graph Laplacian L: x^T L x = sum_pairs w (x_s - x_r)^2."""
    s, r, w = neighbor_pairs(n_side)
    n = n_side * n_side
    data = np.concatenate((w, w, -w, -w))
    ii = np.concatenate((s, r, s, r))
    jj = np.concatenate((s, r, r, s))
    return sp.csr_matrix((data, (ii, jj)), shape=(n, n))


def quadratic_prior_matrix(params: PriorParams, n_side: int) -> sp.csr_matrix:
    """Matrix B with x^T B x == h(x) for the quadratic prior (half-Laplacian + ridge)."""
    n = n_side * n_side
    return (0.5 * graph_laplacian(n_side) + params.eps_reg * sp.identity(n, format="csr")).tocsr()


@dataclass(frozen=True)
class WeightModel:
    """Per-view diagonal sinogram weights (inverse noise variances)."""

    per_view: np.ndarray

    def __post_init__(self):
        w = np.ascontiguousarray(self.per_view, dtype=np.float64)
        if w.ndim != 2:
            raise ValueError("weights must be a (n_views, n_channels) array")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        w.setflags(write=False)
        object.__setattr__(self, "per_view", w)

    @classmethod
    def identity(cls, n_views: int, n_channels: int) -> "WeightModel":
        return cls(np.ones((n_views, n_channels)))

    @classmethod
    def from_sinogram(cls, y: np.ndarray) -> "WeightModel":
        """Photon-statistics surrogate: exp(-y) rescaled to mean 1."""
        w = np.exp(-np.asarray(y, dtype=np.float64))
        return cls(w / w.mean())


@dataclass
class ReconProblem:
    """Bundle defining the MAP objective: geometry, matrices, data, weights, prior."""

    geom: Geometry
    matrices: list
    y: np.ndarray
    weights: np.ndarray
    prior: PriorParams

    def __post_init__(self):
        self.y = np.ascontiguousarray(self.y, dtype=np.float64)
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        shape = (self.geom.n_views, self.geom.n_channels)
        if self.y.shape != shape or self.weights.shape != shape:
            raise ValueError(f"y and weights must have shape {shape}")
        if len(self.matrices) != self.geom.n_views:
            raise ValueError("need one sparse view matrix per view")

    @property
    def n(self) -> int:
        return self.geom.n_pixels


def likelihood_cost(y: np.ndarray, weights: np.ndarray, matrices: list, x: np.ndarray) -> float:
    """sum_k 0.5 * ||y_k - A_k x||^2_{Lambda_k}."""
    y = np.asarray(y, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if y.shape != (len(matrices), matrices[0].n_channels) or weights.shape != y.shape:
        raise ValueError("y/weights shape must be (n_views, n_channels)")
    total = 0.0
    for k, mat in enumerate(matrices):
        r = y[k] - mat.to_csr() @ x
        total += 0.5 * float(np.dot(weights[k] * r, r))
    return total


def prior_cost(x: np.ndarray, params: PriorParams, n_side: int) -> float:
    """beta * h(x) for the configured prior."""
    x = np.asarray(x, dtype=np.float64)
    s, r, w = neighbor_pairs(n_side)
    d = x[s] - x[r]
    if params.kind == QUADRATIC:
        h = 0.5 * float(np.dot(w, d * d)) + params.eps_reg * float(np.dot(x, x))
    else:
        h = float(np.dot(w, qggmrf_potential(d, params.p, params.q, params.T, params.sigma_x)))
    return params.beta * h


def prior_gradient(x: np.ndarray, params: PriorParams, n_side: int) -> np.ndarray:
    """Gradient of beta * h(x)."""
    x = np.asarray(x, dtype=np.float64)
    idx, w = neighbor_table(n_side)
    xn = np.where(idx >= 0, x[idx], 0.0)
    d = x[:, None] - xn
    if params.kind == QUADRATIC:
        g = np.sum(w * d, axis=1) + 2.0 * params.eps_reg * x
    else:
        g = np.sum(w * qggmrf_influence(d, params.p, params.q, params.T, params.sigma_x), axis=1)
    return params.beta * g


def map_cost(problem: ReconProblem, x: np.ndarray, beta: float | None = None) -> float:
    """Global objective f(x; beta)."""
    params = problem.prior if beta is None else problem.prior.with_beta(beta)
    return likelihood_cost(problem.y, problem.weights, problem.matrices, x) + prior_cost(
        x, params, problem.geom.n_side
    )


def local_cost(
    problem: ReconProblem,
    subsets: list[ViewSubset],
    i: int,
    x: np.ndarray,
    beta: float | None = None,
) -> float:
    """Subset objective f_i: the subset's data terms plus (beta / N) * h(x)."""
    params = problem.prior if beta is None else problem.prior.with_beta(beta)
    views = list(subsets[i].view_indices)
    total = prior_cost(x, params.with_beta(params.beta / len(subsets)), problem.geom.n_side)
    for k in views:
        r = problem.y[k] - problem.matrices[k].to_csr() @ x
        total += 0.5 * float(np.dot(problem.weights[k] * r, r))
    return total


def map_gradient(problem: ReconProblem, x: np.ndarray, beta: float | None = None) -> np.ndarray:
    """Gradient of f: A^T Lambda (A x - y) + beta * grad h(x)."""
    params = problem.prior if beta is None else problem.prior.with_beta(beta)
    g = np.zeros(problem.n)
    for k, mat in enumerate(problem.matrices):
        csr = mat.to_csr()
        g += csr.T @ (problem.weights[k] * (csr @ x - problem.y[k]))
    return g + prior_gradient(x, params, problem.geom.n_side)


def local_gradient(
    problem: ReconProblem,
    subsets: list[ViewSubset],
    i: int,
    x: np.ndarray,
    beta: float | None = None,
) -> np.ndarray:
    """Gradient of f_i."""
    params = problem.prior if beta is None else problem.prior.with_beta(beta)
    g = prior_gradient(x, params.with_beta(params.beta / len(subsets)), problem.geom.n_side)
    for k in subsets[i].view_indices:
        csr = problem.matrices[k].to_csr()
        g += csr.T @ (problem.weights[k] * (csr @ x - problem.y[k]))
    return g
