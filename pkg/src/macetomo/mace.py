"""Consensus-equilibrium outer loops: stacked-state algebra, the averaging
and denoising consensus operators, Mann iteration, and the partial-update
solvers for conventional and PnP priors.

A stacked state is a (N, n) float array: N per-agent images.  One outer
iteration is

    v = (2G - I) w                      scatter to agents
    X_i <- one ICD pass toward prox of f_i at v_i, warm-started at X_i
    w <- rho * (2X - v) + (1 - rho) * w  gather + Mann damping

with G replaced by G_H (denoise the average, then broadcast) in PnP mode.
Agents run concurrently between the scatter and gather points; the reduce
is always performed in agent-index order, so results are bit-identical for
any worker count.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .denoisers import DenoiserSpec, make_denoiser
from .geometry import partition_views
from .icd import AgentWorkspace, ConvergenceError, partial_update_prox, prox_solve
from .models import ReconProblem
from .oracle import EquitCounter, nrmse

__all__ = [
    "MaceConfig",
    "MaceResult",
    "ConvergenceLog",
    "ResidualReport",
    "WorkerPool",
    "new_stack",
    "average",
    "consensus_G",
    "reflect_G",
    "consensus_GH",
    "mann_step",
    "mace_solve",
    "mace_pnp_solve",
    "equilibrium_residuals",
]

CONVENTIONAL = "conventional"
PNP = "pnp"


# ---------------------------------------------------------------------------
# stacked-state algebra


def new_stack(n_subsets: int, n: int) -> np.ndarray:
    """Fresh all-zero stacked state with N components of length n."""
    if n_subsets < 1 or n < 1:
        raise ValueError("stack dimensions must be >= 1")
    return np.zeros((n_subsets, n))


def _check_stack(stack: np.ndarray) -> np.ndarray:
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim != 2 or stack.shape[0] < 1:
        raise ValueError("a stacked state must be a (N, n) array with N >= 1")
    return stack


def average(stack: np.ndarray) -> np.ndarray:
    """Mean image over the stack components.

    Reduces over a balanced pairwise tree in a fixed order, so the result is
    independent of worker scheduling and, for power-of-two N, averaging a
    stack of identical components reproduces the component bit for bit
    (every addition doubles and the divisor is a power of two).
    """
    stack = _check_stack(stack)
    acc = stack.copy()
    m = acc.shape[0]
    while m > 1:
        half = m // 2
        acc[:half] += acc[half : 2 * half]
        if m % 2:
            acc[half] = acc[2 * half]
            m = half + 1
        else:
            m = half
    return acc[0] / stack.shape[0]


def consensus_G(stack: np.ndarray) -> np.ndarray:
    """Replicate the component average into every slot."""
    stack = _check_stack(stack)
    return np.broadcast_to(average(stack), stack.shape).copy()


def reflect_G(stack: np.ndarray) -> np.ndarray:
    """2 G(w) - w; self-inverse because G is a projection."""
    stack = _check_stack(stack)
    return 2.0 * average(stack)[None, :] - stack


def consensus_GH(stack: np.ndarray, denoiser) -> np.ndarray:
    """Denoise the component average and replicate it into every slot."""
    stack = _check_stack(stack)
    return np.broadcast_to(denoiser(average(stack)), stack.shape).copy()


def mann_step(w: np.ndarray, Tw: np.ndarray, rho: float) -> np.ndarray:
    """Damped fixed-point step rho * Tw + (1 - rho) * w."""
    w = np.asarray(w, dtype=np.float64)
    Tw = np.asarray(Tw, dtype=np.float64)
    if w.shape != Tw.shape:
        raise ValueError("w and Tw must have identical shapes")
    return rho * Tw + (1.0 - rho) * w


# ---------------------------------------------------------------------------
# configuration / bookkeeping


@dataclass(frozen=True)
class MaceConfig:
    """Outer-loop configuration.

    ``rho`` must lie strictly inside (0, 1) — the Mann iteration's admissible
    range.  ``sigma`` is the agents' proximal parameter; PnP agents use
    sqrt(N) * sigma internally.  ``beta`` overrides the problem prior
    strength in conventional mode; PnP mode always runs the agents with
    beta = 0 and regularizes through the denoiser.
    """

    n_subsets: int
    rho: float = 0.8
    sigma: float = 1.0
    mode: str = CONVENTIONAL
    beta: float | None = None
    denoiser: DenoiserSpec | None = None
    max_outer: int = 1000
    tol: float = 1e-7
    equit_accounting: bool = True
    residuals: str = "final"  # "final" or "none"
    clamp_nonneg: bool = False  # disables the exact-oracle equalities

    def __post_init__(self):
        if self.n_subsets < 1:
            raise ValueError("n_subsets must be >= 1")
        if not 0.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (0, 1)")
        if self.sigma <= 0.0:
            raise ValueError("sigma must be > 0")
        if self.mode not in (CONVENTIONAL, PNP):
            raise ValueError(f"mode must be '{CONVENTIONAL}' or '{PNP}'")
        if self.mode == PNP and self.denoiser is None:
            raise ValueError("pnp mode requires a denoiser spec")
        if self.max_outer < 1:
            raise ValueError("max_outer must be >= 1")
        if self.tol <= 0.0:
            raise ValueError("tol must be > 0")
        if self.residuals not in ("final", "none"):
            raise ValueError("residuals must be 'final' or 'none'")


class ConvergenceLog:
    """Per-iteration records, serializable as CSV."""

    COLUMNS = ("iter", "equits", "mann_update_relnorm", "r_F", "r_u", "nrmse_vs_ref", "wall_seconds")

    def __init__(self, pnp: bool = False):
        self.pnp = pnp
        self.rows: list[dict] = []

    def append(self, **kw) -> None:
        self.rows.append(kw)

    def header(self) -> tuple:
        cols = list(self.COLUMNS)
        if self.pnp:
            cols[4] = "r_H"
        return tuple(cols)

    def write_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.header())
            for row in self.rows:
                writer.writerow(
                    [
                        row.get("iter"),
                        _fmt(row.get("equits")),
                        _fmt(row.get("relnorm")),
                        _fmt(row.get("r_F")),
                        _fmt(row.get("r_u")),
                        _fmt(row.get("nrmse")),
                        _fmt(row.get("wall")),
                    ]
                )


def _fmt(value):
    return "" if value is None else repr(float(value))


@dataclass
class ResidualReport:
    """Consensus-equilibrium residuals at a stacked state."""

    mode: str
    r_F: float
    r_u: float  # r_H in pnp mode
    per_agent: list = field(default_factory=list)


@dataclass
class MaceResult:
    image: np.ndarray
    stack: np.ndarray
    log: ConvergenceLog
    iterations: int
    converged: bool
    equits: float | None = None
    residuals: ResidualReport | None = None


class WorkerPool:
    """Thread pool mapping agent tasks; results always gathered in task order.

    ``workers=None`` or 1 runs serially.  Numeric results are identical
    either way because agents share no mutable state and the reduction is
    fixed-order.
    """

    def __init__(self, workers: int | None = None):
        self.workers = workers
        self._pool = ThreadPoolExecutor(max_workers=workers) if workers and workers > 1 else None

    def map(self, fn, items):
        if self._pool is None:
            return [fn(item) for item in items]
        return list(self._pool.map(fn, items))

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------------------
# outer loops


def _build_agents(problem: ReconProblem, config: MaceConfig) -> list[AgentWorkspace]:
    subsets = partition_views(problem.geom.n_views, config.n_subsets)
    if config.mode == PNP:
        sigma = np.sqrt(config.n_subsets) * config.sigma
        beta = 0.0
    else:
        sigma = config.sigma
        beta = config.beta
    return [
        AgentWorkspace(problem, sub, config.n_subsets, sigma=sigma, beta=beta,
                       clamp_nonneg=config.clamp_nonneg)
        for sub in subsets
    ]


def _run_outer(problem, config, pool, ref_image, w0, denoiser):
    """Shared driver for both modes; ``denoiser`` is None in conventional mode."""
    n = problem.n
    N = config.n_subsets
    agents = _build_agents(problem, config)
    counter = EquitCounter(roi_voxels=n, n_subsets=N) if config.equit_accounting else None

    w = new_stack(N, n) if w0 is None else _check_stack(w0).copy()
    if w.shape != (N, n):
        raise ValueError(f"w0 must have shape ({N}, {n})")
    x_init = average(w) if denoiser is None else denoiser(average(w))
    for agent in agents:
        agent.set_state(x_init)

    own_pool = pool is None
    pool = pool or WorkerPool()
    log = ConvergenceLog(pnp=denoiser is not None)
    t0 = time.perf_counter()
    converged = False
    iterations = 0
    try:
        for k in range(config.max_outer):
            if denoiser is None:
                v = reflect_G(w)
            else:
                v = 2.0 * consensus_GH(w, denoiser) - w

            def task(i):
                return partial_update_prox(agents[i], v[i])

            X = np.stack(pool.map(task, range(N)))
            w_new = mann_step(w, 2.0 * X - v, config.rho)

            norm_new = float(np.linalg.norm(w_new))
            if not np.isfinite(norm_new):
                raise ConvergenceError(
                    f"MACE diverged at iteration {k + 1}: the partial-update map is "
                    "expansive for this sigma (reduce sigma)",
                    last_iterate=None,
                    log=log,
                )
            scale = max(float(np.linalg.norm(w)), 1e-300)
            relnorm = float(np.linalg.norm(w_new - w)) / scale
            w = w_new
            iterations = k + 1
            if counter is not None:
                counter.add_updates(N * n)
            if ref_image is None:
                err = None
            else:
                est = average(w) if denoiser is None else denoiser(average(w))
                err = nrmse(est, ref_image)
            log.append(
                iter=iterations,
                equits=None if counter is None else counter.equits(),
                relnorm=relnorm,
                r_F=None,
                r_u=None,
                nrmse=err,
                wall=time.perf_counter() - t0,
            )
            if relnorm < config.tol:
                converged = True
                break
    finally:
        if own_pool:
            pool.close()

    x_star = average(w) if denoiser is None else denoiser(average(w))
    result = MaceResult(
        image=x_star,
        stack=w,
        log=log,
        iterations=iterations,
        converged=converged,
        equits=None if counter is None else counter.equits(),
    )
    if config.residuals == "final":
        result.residuals = equilibrium_residuals(problem, config, w, denoiser=denoiser)
        if log.rows:
            log.rows[-1]["r_F"] = result.residuals.r_F
            log.rows[-1]["r_u"] = result.residuals.r_u
    if not converged:
        raise ConvergenceError(
            f"MACE: Mann update relnorm did not reach {config.tol:g} "
            f"in {config.max_outer} iterations",
            last_iterate=result,
            log=log,
        )
    return result


def mace_solve(
    problem: ReconProblem,
    config: MaceConfig,
    pool: WorkerPool | None = None,
    ref_image: np.ndarray | None = None,
    w0: np.ndarray | None = None,
) -> MaceResult:
    """Partial-update consensus reconstruction with the conventional prior.

    Converges to the MAP solution of the full-data objective; the returned
    image is the component average of the final stack.
    """
    if config.mode != CONVENTIONAL:
        raise ValueError("mace_solve requires mode='conventional'")
    return _run_outer(problem, config, pool, ref_image, w0, denoiser=None)


def mace_pnp_solve(
    problem: ReconProblem,
    config: MaceConfig,
    pool: WorkerPool | None = None,
    ref_image: np.ndarray | None = None,
    w0: np.ndarray | None = None,
    denoiser=None,
) -> MaceResult:
    """Partial-update consensus reconstruction with a PnP denoiser prior.

    Agents carry only their data terms (beta = 0) at proximal parameter
    sqrt(N) * sigma; the denoiser acts once per iteration on the average.
    The returned image is H(mean of the final stack).  Any image-to-image
    callable may be passed as ``denoiser`` in place of the configured spec.
    """
    if config.mode != PNP:
        raise ValueError("mace_pnp_solve requires mode='pnp'")
    if denoiser is None:
        denoiser = make_denoiser(config.denoiser, problem.geom.n_side)
    return _run_outer(problem, config, pool, ref_image, w0, denoiser=denoiser)


def equilibrium_residuals(
    problem: ReconProblem,
    config: MaceConfig,
    w: np.ndarray,
    prox_tol: float = 1e-9,
    denoiser=None,
) -> ResidualReport:
    """Measure how well a stacked state satisfies the equilibrium conditions.

    Conventional mode: with x_hat the stack average and u_i = x_hat - w_i,
    every agent should satisfy F_i(x_hat + u_i; sigma) = x_hat; r_F is the
    worst relative violation (F_i evaluated by fully converged ICD) and r_u
    is the relative norm of sum_i u_i (zero by construction, reported as a
    sanity value).  PnP mode: x_hat = H(mean w), t_i = x_hat - w_i, agents
    use sqrt(N) * sigma, and r_H checks H at the consensus point.
    """
    w = _check_stack(w)
    subsets = partition_views(problem.geom.n_views, config.n_subsets)
    w_bar = average(w)
    per_agent = []
    if config.mode == PNP:
        if denoiser is None:
            denoiser = make_denoiser(config.denoiser, problem.geom.n_side)
        x_hat = denoiser(w_bar)
        sigma = np.sqrt(config.n_subsets) * config.sigma
        beta = 0.0
        seconds = x_hat - w  # t_i
        alpha = w_bar - x_hat
        aux = float(np.linalg.norm(denoiser(x_hat + alpha) - x_hat))
    else:
        x_hat = w_bar
        sigma = config.sigma
        beta = config.beta
        seconds = x_hat - w  # u_i
        aux = float(np.linalg.norm(seconds.sum(axis=0)))
    scale = max(float(np.linalg.norm(x_hat)), 1e-300)
    for i, sub in enumerate(subsets):
        ws = AgentWorkspace(
            problem, sub, config.n_subsets, sigma=sigma, beta=beta, state=x_hat
        )
        fi = prox_solve(ws, x_hat + seconds[i], tol=prox_tol)
        per_agent.append(float(np.linalg.norm(fi - x_hat)) / scale)
    return ResidualReport(
        mode=config.mode,
        r_F=max(per_agent),
        r_u=aux / scale,
        per_agent=per_agent,
    )
