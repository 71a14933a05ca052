"""Iterative coordinate descent: single-pixel updates, one-pass partial
proximal updates, fully converged proximal maps, and the centralized MAP
baseline.

All sweeps visit pixels in fixed raster order, which makes one pass over a
quadratic objective algebraically identical to a Gauss-Seidel step with the
lower-triangular splitting of the local Hessian.  Each workspace keeps an
error sinogram e = y_i - A_i z that is updated incrementally per pixel and
rebuilt from scratch every ``REFRESH_EVERY`` passes to bound float drift.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .geometry import ViewSubset
from .models import QUADRATIC, ReconProblem, neighbor_table

__all__ = [
    "AgentWorkspace",
    "ConvergenceError",
    "pixel_update",
    "partial_update_prox",
    "prox_solve",
    "icd_map_solve",
]

REFRESH_EVERY = 50


class ConvergenceError(RuntimeError):
    """Raised when an iterative solve exhausts its pass budget.

    Carries the last iterate (and optional per-iteration log) so callers can
    inspect or resume.
    """

    def __init__(self, message, last_iterate=None, log=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.log = log


def _qg_influence(d, p, q, T, sx):
    ad = abs(d)
    if ad == 0.0:
        return 0.0
    u = ad / (T * sx)
    um = u ** (q - p)
    val = (ad ** (p - 1.0) / sx**p) * um * (q / p + um) / (1.0 + um) ** 2
    return val if d > 0.0 else -val


def _qg_coef(d, p, q, T, sx):
    ad = abs(d)
    floor = 1e-9 * T * sx
    if ad <= floor:
        if p == 2.0:
            return 1.0 / (sx * sx)
        ad = floor
    u = ad / (T * sx)
    um = u ** (q - p)
    return (ad ** (p - 2.0) / sx**p) * um * (q / p + um) / (1.0 + um) ** 2


def _sweep(
    z,
    v,
    e,
    col_ptr,
    row_idx,
    a_val,
    lam,
    curv_data,
    nbr_idx,
    nbr_w,
    beta_eff,
    eps_reg,
    inv_sigma2,
    quad_prior,
    p,
    q,
    T,
    sx,
    clamp,
    s_begin,
    s_end,
):
    """Raster pass of exact (quadratic) or surrogate (Q-GGMRF) 1D minimizations.

    Mutates ``z`` and ``e`` in place; returns the squared update norm over the
    visited range.  With ``clamp`` the step is shortened so pixels stay
    nonnegative (the 1D restriction is convex, so the constrained minimizer
    is the clipped step).
    """
    delta_sq = 0.0
    for s in range(s_begin, s_end):
        zs = z[s]
        t1 = 0.0
        for jj in range(col_ptr[s], col_ptr[s + 1]):
            r = row_idx[jj]
            t1 += a_val[jj] * lam[r] * e[r]
        gp = 0.0
        cp = 0.0
        if beta_eff > 0.0:
            acc_g = 0.0
            acc_c = 0.0
            if quad_prior:
                for k in range(8):
                    r = nbr_idx[s, k]
                    if r >= 0:
                        w = nbr_w[s, k]
                        acc_g += w * (zs - z[r])
                        acc_c += w
                gp = beta_eff * (acc_g + 2.0 * eps_reg * zs)
                cp = beta_eff * (acc_c + 2.0 * eps_reg)
            else:
                for k in range(8):
                    r = nbr_idx[s, k]
                    if r >= 0:
                        w = nbr_w[s, k]
                        d = zs - z[r]
                        acc_g += w * _qg_influence(d, p, q, T, sx)
                        acc_c += w * _qg_coef(d, p, q, T, sx)
                gp = beta_eff * acc_g
                cp = beta_eff * acc_c
        num = t1 - gp - inv_sigma2 * (zs - v[s])
        den = curv_data[s] + cp + inv_sigma2
        if den <= 0.0:
            continue
        alpha = num / den
        if clamp and zs + alpha < 0.0:
            alpha = -zs
        z[s] = zs + alpha
        for jj in range(col_ptr[s], col_ptr[s + 1]):
            e[row_idx[jj]] -= alpha * a_val[jj]
        delta_sq += alpha * alpha
    return delta_sq


try:  # compile the hot loop; the pure-Python path is a functional fallback
    import numba

    _qg_influence = numba.njit(cache=True, nogil=True)(_qg_influence)
    _qg_coef = numba.njit(cache=True, nogil=True)(_qg_coef)
    _sweep = numba.njit(cache=True, nogil=True)(_sweep)
except ImportError:  # pragma: no cover
    pass


class AgentWorkspace:
    """Private solver state of one agent: its view subset's stacked system,
    error sinogram, current image, and proximal parameter.

    Parameters
    ----------
    problem : ReconProblem
    subset : ViewSubset
        The views this agent owns.
    n_subsets : int
        Total number of agents N; the prior enters with weight beta / N.
    sigma : float or None
        Proximal parameter; None disables the proximal term (centralized use).
    beta : float, optional
        Overrides the problem's prior strength (PnP agents pass 0).
    state : ndarray, optional
        Initial image; defaults to zeros.
    clamp_nonneg : bool
        Clip every pixel update at zero.  Off by default: the convergence
        theory and the dense-oracle equality tests assume the unconstrained
        minimizer.
    """

    def __init__(self, problem: ReconProblem, subset: ViewSubset, n_subsets: int,
                 sigma: float | None, beta: float | None = None, state: np.ndarray | None = None,
                 clamp_nonneg: bool = False):
        if sigma is not None and sigma <= 0:
            raise ValueError("sigma must be > 0")
        self.subset = subset
        self.sigma = sigma
        self.clamp_nonneg = clamp_nonneg
        self.prior = problem.prior if beta is None else problem.prior.with_beta(beta)
        self.n = problem.n
        views = list(subset.view_indices)
        stacked = sp.vstack([problem.matrices[k].to_csr() for k in views], format="csr")
        self.y = problem.y[views].ravel().copy()
        self.lam = problem.weights[views].ravel().copy()
        csc = stacked.tocsc()
        self.col_ptr = csc.indptr.astype(np.int64)
        self.row_idx = csc.indices.astype(np.int64)
        self.a_val = csc.data.astype(np.float64)
        sq = csc.copy()
        sq.data = csc.data**2 * self.lam[csc.indices]
        self.curv_data = np.asarray(sq.sum(axis=0)).ravel()
        self._csr = stacked
        self.nbr_idx, self.nbr_w = neighbor_table(problem.geom.n_side)
        self.beta_eff = self.prior.beta / n_subsets
        self.state = np.zeros(self.n) if state is None else np.array(state, dtype=np.float64)
        self.error_sinogram = self.y - self._csr @ self.state
        self.passes = 0

    @property
    def inv_sigma2(self) -> float:
        return 0.0 if self.sigma is None else 1.0 / (self.sigma * self.sigma)

    def nnz(self) -> int:
        return int(self.a_val.shape[0])

    def refresh_error(self) -> None:
        self.error_sinogram = self.y - self._csr @ self.state

    def error_drift(self) -> float:
        exact = self.y - self._csr @ self.state
        scale = max(float(np.linalg.norm(exact)), 1e-300)
        return float(np.linalg.norm(self.error_sinogram - exact)) / scale

    def set_state(self, x: np.ndarray) -> None:
        self.state = np.array(x, dtype=np.float64)
        self.refresh_error()

    def _run_range(self, v: np.ndarray, s_begin: int, s_end: int) -> float:
        pr = self.prior
        return _sweep(
            self.state,
            v,
            self.error_sinogram,
            self.col_ptr,
            self.row_idx,
            self.a_val,
            self.lam,
            self.curv_data,
            self.nbr_idx,
            self.nbr_w,
            self.beta_eff,
            pr.eps_reg if pr.kind == QUADRATIC else 0.0,
            self.inv_sigma2,
            pr.kind == QUADRATIC,
            pr.p,
            pr.q,
            pr.T,
            pr.sigma_x,
            self.clamp_nonneg,
            s_begin,
            s_end,
        )


def _check_target(ws: AgentWorkspace, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (ws.n,):
        raise ValueError(f"v must have shape ({ws.n},)")
    return v


def pixel_update(ws: AgentWorkspace, s: int, v: np.ndarray) -> float:
    """Exact (quadratic) or surrogate (Q-GGMRF) 1D update of pixel ``s``.

    Minimizes f_i(z + alpha e_s) + ||z + alpha e_s - v||^2 / (2 sigma^2) over
    alpha, applies the step to the workspace state and error sinogram, and
    returns the step.  Curvature is always positive because 1/sigma^2 > 0
    whenever a proximal target is in play.
    """
    if not 0 <= s < ws.n:
        raise ValueError("pixel index out of range")
    v = _check_target(ws, v)
    before = ws.state[s]
    ws._run_range(v, s, s + 1)
    return float(ws.state[s] - before)


def partial_update_prox(ws: AgentWorkspace, v: np.ndarray) -> np.ndarray:
    """One full raster pass toward prox_{f_i, sigma}(v) from the remembered state.

    Returns a copy of the updated state (the workspace keeps it as the next
    initial condition).
    """
    v = _check_target(ws, v)
    ws._run_range(v, 0, ws.n)
    ws.passes += 1
    if ws.passes % REFRESH_EVERY == 0:
        ws.refresh_error()
    return ws.state.copy()


def prox_solve(ws: AgentWorkspace, v: np.ndarray, tol: float, max_passes: int = 500) -> np.ndarray:
    """Fully converged proximal map: repeat raster passes until the relative
    update norm drops below ``tol``."""
    if tol <= 0:
        raise ValueError("tol must be > 0")
    v = _check_target(ws, v)
    for _ in range(max_passes):
        delta_sq = ws._run_range(v, 0, ws.n)
        ws.passes += 1
        if ws.passes % REFRESH_EVERY == 0:
            ws.refresh_error()
        scale = max(float(np.linalg.norm(ws.state)), 1e-300)
        if np.sqrt(delta_sq) / scale < tol:
            return ws.state.copy()
    raise ConvergenceError(
        f"prox_solve: no convergence to {tol:g} in {max_passes} passes",
        last_iterate=ws.state.copy(),
    )


def icd_map_solve(
    problem: ReconProblem,
    tol: float,
    beta: float | None = None,
    max_passes: int = 1000,
    x0: np.ndarray | None = None,
    counter=None,
    on_pass=None,
    clamp_nonneg: bool = False,
) -> np.ndarray:
    """Centralized MAP baseline: full-data ICD with no proximal term.

    Sweeps until the relative update norm per pass is below ``tol``.  If a
    counter with ``add_updates`` is supplied, it is advanced by one full pass
    of pixel updates per sweep; ``on_pass(k, relnorm, x)`` is called after
    each sweep for logging.
    """
    if tol <= 0:
        raise ValueError("tol must be > 0")
    all_views = ViewSubset(0, tuple(range(problem.geom.n_views)))
    ws = AgentWorkspace(problem, all_views, 1, sigma=None, beta=beta, state=x0,
                        clamp_nonneg=clamp_nonneg)
    v = np.zeros(problem.n)  # unused: the proximal term is off
    for k in range(max_passes):
        delta_sq = ws._run_range(v, 0, ws.n)
        ws.passes += 1
        if ws.passes % REFRESH_EVERY == 0:
            ws.refresh_error()
        if counter is not None:
            counter.add_updates(ws.n)
        scale = max(float(np.linalg.norm(ws.state)), 1e-300)
        relnorm = np.sqrt(delta_sq) / scale
        if on_pass is not None:
            on_pass(k + 1, relnorm, ws.state)
        if relnorm < tol:
            return ws.state.copy()
    raise ConvergenceError(
        f"icd_map_solve: no convergence to {tol:g} in {max_passes} passes",
        last_iterate=ws.state.copy(),
    )
