"""Independent ground-truth machinery: dense MAP/prox solves, the exact and
first-order partial-update iteration matrices with their spectra, a serial
PnP reference solver, and the evaluation metrics.

Everything here deliberately avoids the coordinate-descent code paths: dense
factorizations and explicit matrices provide the second route against which
the solvers are checked.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .denoisers import DenoiserSpec, make_denoiser
from .geometry import ViewSubset
from .icd import ConvergenceError
from .models import QUADRATIC, PriorParams, ReconProblem, graph_laplacian, quadratic_prior_matrix

__all__ = [
    "DenseSystem",
    "IterationMatrixReport",
    "EquitCounter",
    "dense_system",
    "dense_map_oracle",
    "dense_prox_oracle",
    "partial_update_closed_form",
    "assemble_iteration_matrices",
    "serial_pnp_oracle",
    "dense_composite_pnp_oracle",
    "exact_T_conventional",
    "exact_T_pnp",
    "nrmse",
    "equits",
    "speedup",
]

DENSE_LIMIT = 4096
MATRIX_STATE_LIMIT = 8192


@dataclass
class DenseSystem:
    """Row-stacked dense copy of the full system: A, diagonal weights, data."""

    A: np.ndarray
    lam: np.ndarray
    y: np.ndarray
    n_channels: int

    def rows_for(self, subset: ViewSubset) -> np.ndarray:
        parts = [
            np.arange(k * self.n_channels, (k + 1) * self.n_channels)
            for k in subset.view_indices
        ]
        return np.concatenate(parts)


def dense_system(problem: ReconProblem) -> DenseSystem:
    if problem.n > DENSE_LIMIT:
        raise ValueError(f"dense oracle limited to n <= {DENSE_LIMIT}")
    rows = []
    for mat in problem.matrices:
        rows.append(mat.to_csr().toarray())
    return DenseSystem(
        A=np.vstack(rows),
        lam=problem.weights.ravel().copy(),
        y=problem.y.ravel().copy(),
        n_channels=problem.geom.n_channels,
    )


def _quad_params(problem: ReconProblem, beta: float | None) -> PriorParams:
    params = problem.prior if beta is None else problem.prior.with_beta(beta)
    if params.kind != QUADRATIC:
        raise ValueError("dense quadratic oracles require the quadratic prior")
    return params


def _refined_solve(M: np.ndarray, b: np.ndarray) -> np.ndarray:
    """SPD solve with one step of iterative refinement."""
    cho = sla.cho_factor(M)
    x = sla.cho_solve(cho, b)
    x += sla.cho_solve(cho, b - M @ x)
    return x


def dense_map_oracle(problem: ReconProblem, beta: float | None = None,
                     ds: DenseSystem | None = None) -> np.ndarray:
    """Direct MAP solve for the quadratic prior: (A^T Lambda A + 2 beta B) x = A^T Lambda y."""
    params = _quad_params(problem, beta)
    ds = ds or dense_system(problem)
    B = quadratic_prior_matrix(params, problem.geom.n_side).toarray()
    M = ds.A.T @ (ds.lam[:, None] * ds.A) + 2.0 * params.beta * B
    b = ds.A.T @ (ds.lam * ds.y)
    return _refined_solve(M, b)


def _local_quadratics(problem: ReconProblem, subsets, i: int, beta: float | None,
                      ds: DenseSystem | None = None):
    """Dense H_i = A_i^T Lam_i A_i + 2 (beta / N) B and b_i = A_i^T Lam_i y_i."""
    params = _quad_params(problem, beta)
    ds = ds or dense_system(problem)
    rows = ds.rows_for(subsets[i])
    Ai = ds.A[rows]
    li = ds.lam[rows]
    yi = ds.y[rows]
    B = quadratic_prior_matrix(params, problem.geom.n_side).toarray()
    H = Ai.T @ (li[:, None] * Ai) + (2.0 * params.beta / len(subsets)) * B
    b = Ai.T @ (li * yi)
    return H, b


def dense_prox_oracle(problem: ReconProblem, subsets, i: int, v: np.ndarray,
                      sigma: float, beta: float | None = None,
                      ds: DenseSystem | None = None) -> np.ndarray:
    """Exact proximal map of f_i: solve (H_i + I / sigma^2) z = b_i + v / sigma^2."""
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    H, b = _local_quadratics(problem, subsets, i, beta, ds)
    inv_s2 = 1.0 / sigma**2
    return _refined_solve(H + inv_s2 * np.eye(H.shape[0]), b + inv_s2 * np.asarray(v, dtype=np.float64))


def partial_update_closed_form(problem: ReconProblem, subsets, i: int, v: np.ndarray,
                               x: np.ndarray, sigma: float, beta: float | None = None,
                               ds: DenseSystem | None = None) -> np.ndarray:
    """Closed form of one raster ICD pass on the quadratic prox objective.

    With L the strictly lower triangle of H_i and Ltilde = L + diag(H_i),
    the pass maps (v, x) to -(Ltilde + I/sigma^2)^{-1} (L^T x - b_i - v/sigma^2).
    """
    H, b = _local_quadratics(problem, subsets, i, beta, ds)
    inv_s2 = 1.0 / sigma**2
    lower = np.tril(H) + inv_s2 * np.eye(H.shape[0])
    upper = np.triu(H, 1)
    rhs = b + inv_s2 * np.asarray(v, dtype=np.float64) - upper @ np.asarray(x, dtype=np.float64)
    return sla.solve_triangular(lower, rhs, lower=True)


@dataclass
class IterationMatrixReport:
    """Spectra of the exact and first-order partial-update iteration maps."""

    sigma: float
    rho: float
    n_subsets: int
    spectral_radius_exact: float
    spectral_radius_first_order: float
    eigenvalues_exact: np.ndarray
    eigenvalues_first_order: np.ndarray
    matrix_exact: np.ndarray = field(repr=False, default=None)
    const_exact: np.ndarray = field(repr=False, default=None)
    matrix_first_order: np.ndarray = field(repr=False, default=None)
    const_first_order: np.ndarray = field(repr=False, default=None)


def assemble_iteration_matrices(problem: ReconProblem, config) -> IterationMatrixReport:
    """Build both iteration matrices of the augmented state [w; X] explicitly.

    The exact map pushes basis vectors through one outer iteration with the
    per-agent closed-form pass; the first-order map expands that pass to
    first order in eps = sigma^2.  Quadratic priors only; the state dimension
    2 N n is capped so eigendecompositions stay cheap.
    """
    from .geometry import partition_views

    N = config.n_subsets
    n = problem.n
    rho = config.rho
    sigma = config.sigma
    if 2 * N * n > MATRIX_STATE_LIMIT:
        raise ValueError(f"augmented state 2*N*n = {2 * N * n} exceeds {MATRIX_STATE_LIMIT}")
    subsets = partition_views(problem.geom.n_views, N)
    ds = dense_system(problem)
    inv_s2 = 1.0 / sigma**2

    hessians, lus, uppers, consts = [], [], [], []
    for i in range(N):
        H, b = _local_quadratics(problem, subsets, i, config.beta, ds)
        hessians.append(H)
        lus.append(sla.lu_factor(np.tril(H) + inv_s2 * np.eye(n)))
        uppers.append(np.triu(H, 1))
        consts.append(b)

    def apply_exact(W, X, with_const):
        # W, X: (N, n, m) batches
        wbar = W.mean(axis=0)
        V = 2.0 * wbar[None] - W
        Xn = np.empty_like(X)
        for i in range(N):
            rhs = inv_s2 * V[i] - uppers[i] @ X[i]
            if with_const:
                rhs += consts[i][:, None]
            Xn[i] = sla.lu_solve(lus[i], rhs)
        Wn = rho * (2.0 * Xn - V) + (1.0 - rho) * W
        return Wn, Xn

    dim = 2 * N * n
    basis = np.eye(dim)
    Wb = basis[: N * n].reshape(N, n, dim)
    Xb = basis[N * n :].reshape(N, n, dim)
    Wn, Xn = apply_exact(Wb, Xb, with_const=False)
    M_exact = np.vstack([Wn.reshape(N * n, dim), Xn.reshape(N * n, dim)])
    z = np.zeros((N, n, 1))
    Wc, Xc = apply_exact(z, z, with_const=True)
    c_exact = np.concatenate([Wc.ravel(), Xc.ravel()])

    # first-order map in eps = sigma^2
    eps = sigma**2
    G = np.kron(np.full((N, N), 1.0 / N), np.eye(n))
    R = 2.0 * G - np.eye(N * n)
    Lt_blk = sla.block_diag(*uppers)
    Ltil_blk = sla.block_diag(*[np.tril(H) for H in hessians])
    I_big = np.eye(N * n)
    top_left = rho * (I_big - 2.0 * eps * Ltil_blk) @ R + (1.0 - rho) * I_big
    top_right = -2.0 * rho * eps * Lt_blk
    bot_left = (I_big - eps * Ltil_blk) @ R
    bot_right = -eps * Lt_blk
    M_first = np.block([[top_left, top_right], [bot_left, bot_right]])
    b_all = np.concatenate(consts)
    c_first = np.concatenate([2.0 * rho * eps * b_all, eps * b_all])

    ev_exact = np.linalg.eigvals(M_exact)
    ev_first = np.linalg.eigvals(M_first)
    return IterationMatrixReport(
        sigma=sigma,
        rho=rho,
        n_subsets=N,
        spectral_radius_exact=float(np.max(np.abs(ev_exact))),
        spectral_radius_first_order=float(np.max(np.abs(ev_first))),
        eigenvalues_exact=ev_exact,
        eigenvalues_first_order=ev_first,
        matrix_exact=M_exact,
        const_exact=c_exact,
        matrix_first_order=M_first,
        const_first_order=c_first,
    )


def _as_denoiser(denoiser, n_side: int):
    if isinstance(denoiser, DenoiserSpec):
        return make_denoiser(denoiser, n_side)
    return denoiser


def serial_pnp_oracle(problem: ReconProblem, denoiser, sigma: float, tol: float,
                      max_iter: int = 20000, rho: float = 0.5) -> np.ndarray:
    """Reference solve of the two-operator PnP equilibrium.

    Runs the damped two-variable alternation between the full-data proximal
    map F (dense, beta = 0) and the denoiser H until both equilibrium
    equations hold to ``tol`` relative; independent of the stacked consensus
    machinery.
    """
    H = _as_denoiser(denoiser, problem.geom.n_side)
    ds = dense_system(problem)
    inv_s2 = 1.0 / sigma**2
    M = ds.A.T @ (ds.lam[:, None] * ds.A) + inv_s2 * np.eye(problem.n)
    cho = sla.cho_factor(M)
    b = ds.A.T @ (ds.lam * ds.y)

    def F(v):
        return sla.cho_solve(cho, b + inv_s2 * v)

    # Two-slot consensus: the reflection (2G - I) swaps the slots, so the F
    # agent reads w2 and the H agent reads w1.  At the fixed point
    # w1 = x* + alpha*, w2 = x* - alpha* and both agents return x*.  The
    # residual compares both agent outputs against the state average: with
    # x = (w1 + w2) / 2 and alpha = (w1 - w2) / 2 these are exactly the two
    # equilibrium equations evaluated at (x, alpha).
    w1 = np.zeros(problem.n)
    w2 = np.zeros(problem.n)
    x_hat = np.zeros(problem.n)
    for _ in range(max_iter):
        x_f = F(w2)
        x_h = H(w1)
        x_hat = 0.5 * (x_f + x_h)
        mid = 0.5 * (w1 + w2)
        scale = max(float(np.linalg.norm(mid)), 1e-300)
        resid = max(float(np.linalg.norm(x_f - mid)), float(np.linalg.norm(x_h - mid))) / scale
        if resid < tol:
            return x_hat
        w1, w2 = (
            rho * (2.0 * x_f - w2) + (1.0 - rho) * w1,
            rho * (2.0 * x_h - w1) + (1.0 - rho) * w2,
        )
    raise ConvergenceError(f"serial PnP oracle: residual did not reach {tol:g}", last_iterate=x_hat)


def dense_composite_pnp_oracle(problem: ReconProblem, lam_d: float, sigma: float,
                               ds: DenseSystem | None = None) -> np.ndarray:
    """Minimizer of likelihood + (lam_d / (2 sigma^2)) ||D x||^2.

    A PnP equilibrium whose denoiser is the unit-step proximal map of
    (lam_d / 2) ||D x||^2 balances gradients as grad f + sigma^{-2} grad g = 0,
    which is this quadratic solve.
    """
    ds = ds or dense_system(problem)
    L = graph_laplacian(problem.geom.n_side).toarray()
    M = ds.A.T @ (ds.lam[:, None] * ds.A) + (lam_d / sigma**2) * L
    b = ds.A.T @ (ds.lam * ds.y)
    return _refined_solve(M, b)


def exact_T_conventional(problem: ReconProblem, subsets, sigma: float, stack: np.ndarray,
                         beta: float | None = None, ds: DenseSystem | None = None) -> np.ndarray:
    """(2F - I)(2G - I) with exact dense proximal agents."""
    stack = np.asarray(stack, dtype=np.float64)
    ds = ds or dense_system(problem)
    v = 2.0 * stack.mean(axis=0)[None] - stack
    out = np.empty_like(stack)
    for i in range(stack.shape[0]):
        fi = dense_prox_oracle(problem, subsets, i, v[i], sigma, beta, ds)
        out[i] = 2.0 * fi - v[i]
    return out


def exact_T_pnp(problem: ReconProblem, subsets, denoiser, sigma: float, stack: np.ndarray,
                ds: DenseSystem | None = None) -> np.ndarray:
    """(2F - I)(2G_H - I) with exact dense agents at sqrt(N) * sigma and beta = 0."""
    stack = np.asarray(stack, dtype=np.float64)
    H = _as_denoiser(denoiser, problem.geom.n_side)
    ds = ds or dense_system(problem)
    N = stack.shape[0]
    v = 2.0 * H(stack.mean(axis=0))[None] - stack
    s_agent = np.sqrt(N) * sigma
    out = np.empty_like(stack)
    for i in range(N):
        fi = dense_prox_oracle(problem, subsets, i, v[i], s_agent, beta=0.0, ds=ds)
        out[i] = 2.0 * fi - v[i]
    return out


# ---------------------------------------------------------------------------
# metrics


def nrmse(x: np.ndarray, x_ref: np.ndarray) -> float:
    """||x - x_ref|| / ||x_ref||."""
    x = np.asarray(x, dtype=np.float64)
    x_ref = np.asarray(x_ref, dtype=np.float64)
    if x.shape != x_ref.shape:
        raise ValueError("shapes must match")
    scale = float(np.linalg.norm(x_ref))
    if scale == 0.0:
        raise ValueError("reference norm is zero")
    return float(np.linalg.norm(x - x_ref)) / scale


@dataclass
class EquitCounter:
    """Normalized computation units: one equit is a full pass over the ROI by
    every one of the N view subsets."""

    roi_voxels: int
    n_subsets: int
    updates: int = 0

    def __post_init__(self):
        if self.roi_voxels <= 0:
            raise ValueError("roi_voxels must be > 0")
        if self.n_subsets < 1:
            raise ValueError("n_subsets must be >= 1")

    def add_updates(self, count: int) -> None:
        if count < 0:
            raise ValueError("update count must be nonnegative")
        self.updates += count

    def equits(self) -> float:
        return self.updates / (self.roi_voxels * self.n_subsets)


def equits(counter: EquitCounter) -> float:
    """Voxel updates normalized by (ROI voxels) * (view subsets)."""
    return counter.equits()


def speedup(equits_central: float, equits_mace: float, n_subsets: int) -> float:
    """Parallel speedup N * equits_central / equits_mace."""
    if equits_mace <= 0:
        raise ValueError("equits_mace must be > 0")
    return n_subsets * equits_central / equits_mace
