"""End-to-end experiment driver: builds the synthetic problem from a
RunConfig, dispatches the configured solver, and writes the run artifacts
(reconstruction, convergence CSV, residual report, preview, memory report).
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .config import RunConfig
from .fileio import save_image, save_pgm, save_sinogram
from .geometry import build_system_matrix, load_system_matrix, partition_views, save_system_matrix
from .icd import ConvergenceError, icd_map_solve
from .mace import ConvergenceLog, MaceResult, WorkerPool, mace_pnp_solve, mace_solve
from .models import QUADRATIC, ReconProblem
from .oracle import DENSE_LIMIT, EquitCounter, dense_map_oracle, nrmse, serial_pnp_oracle
from .sim import make_phantom, simulate_sinogram

__all__ = [
    "prepare_problem",
    "run",
    "sweep",
    "memory_report_text",
    "per_agent_nnz",
    "equits_to_target",
]

BYTES_PER_ENTRY = 8  # uint32 index + float32 length, as in the cache format


def prepare_problem(cfg: RunConfig):
    """Build (problem, phantom, sigma) from a config, honoring the matrix cache."""
    geom = cfg.geometry()
    cache = cfg.get("io", "matrix_cache")
    if cache and os.path.exists(cache):
        matrices = load_system_matrix(cache)
        if len(matrices) != geom.n_views or matrices[0].n_pixels != geom.n_pixels:
            raise ValueError(f"matrix cache {cache!r} does not match the configured geometry")
    else:
        matrices = build_system_matrix(geom)
        if cache:
            save_system_matrix(cache, matrices)
    phantom = make_phantom(cfg.get("sim", "phantom"), geom)
    sino = simulate_sinogram(
        phantom,
        matrices,
        seed=cfg.get("sim", "seed"),
        counts_scale=cfg.get("sim", "counts_scale"),
        weight_kind=cfg.get("sim", "weight_model"),
    )
    problem = ReconProblem(geom, matrices, sino.y, sino.weights, cfg.prior())
    return problem, phantom, cfg.resolve_sigma(phantom)


def per_agent_nnz(matrices, n_subsets: int) -> list[int]:
    subsets = partition_views(len(matrices), n_subsets)
    return [sum(matrices[k].nnz for k in sub.view_indices) for sub in subsets]


def memory_report_text(matrices, n_subsets: int) -> str:
    """Per-agent system-matrix sizes, plus the reduction trend over N."""
    total = sum(m.nnz for m in matrices)
    max_view = max(m.nnz for m in matrices)
    lines = [
        "system matrix memory report",
        f"views: {len(matrices)}  total nonzeros: {total}  total bytes: {total * BYTES_PER_ENTRY}",
        f"largest single view: {max_view} nonzeros",
        "",
        "per-agent maximum vs. number of view subsets:",
        "    N   max nnz      max bytes",
    ]
    for n in (1, 2, 4, 8, 16):
        if n > len(matrices):
            break
        worst = max(per_agent_nnz(matrices, n))
        lines.append(f"  {n:3d}   {worst:9d}   {worst * BYTES_PER_ENTRY:10d}")
    lines.append("")
    lines.append(f"configured run uses N = {n_subsets}:")
    for i, nnz in enumerate(per_agent_nnz(matrices, n_subsets)):
        lines.append(f"  agent {i}: {nnz} nonzeros, {nnz * BYTES_PER_ENTRY} bytes")
    return "\n".join(lines) + "\n"


def _residual_report_text(result: MaceResult, sigma: float, mode: str) -> str:
    rep = result.residuals
    lines = [
        "consensus equilibrium residuals",
        f"mode: {mode}  sigma: {sigma!r}  iterations: {result.iterations}",
        f"r_F  = {rep.r_F!r}",
        (f"r_H  = {rep.r_u!r}" if rep.mode == "pnp" else f"r_u  = {rep.r_u!r}"),
    ]
    for i, val in enumerate(rep.per_agent):
        lines.append(f"  agent {i}: {val!r}")
    return "\n".join(lines) + "\n"


def _reference_image(problem: ReconProblem, cfg: RunConfig, sigma: float):
    """Fully converged reference for the NRMSE log column, when cheap to get."""
    mode = cfg.get("mace", "mode")
    if problem.n > DENSE_LIMIT:
        return None
    if mode in ("centralized", "mace"):
        if problem.prior.kind == QUADRATIC:
            return dense_map_oracle(problem)
        return None
    spec = cfg.denoiser_spec()
    if spec.kind in ("identity", "quadratic-prox"):
        return serial_pnp_oracle(problem, spec, sigma, tol=1e-9)
    return None


def run(cfg: RunConfig, out_dir=None) -> dict:
    """Execute the configured reconstruction and write all artifacts.

    Returns a dict of artifact paths.  On solver failure the convergence log
    written so far is preserved before the error propagates.
    """
    out = Path(out_dir if out_dir is not None else cfg.get("io", "output_dir"))
    out.mkdir(parents=True, exist_ok=True)
    problem, phantom, sigma = prepare_problem(cfg)
    geom = problem.geom
    mode = cfg.get("mace", "mode")
    workers = cfg.get("mace", "workers") or None
    ref = _reference_image(problem, cfg, sigma)

    paths = {
        "phantom": out / "phantom.img",
        "sinogram": out / "sinogram.sino",
        "image": out / "recon.img",
        "preview": out / "recon.pgm",
        "csv": out / "convergence.csv",
        "memory": out / "memory.txt",
    }
    save_image(paths["phantom"], phantom, geom.n_side, geom.n_side)
    save_sinogram(paths["sinogram"], problem.y, problem.weights)
    paths["memory"].write_text(
        memory_report_text(problem.matrices, cfg.get("mace", "n_subsets") if mode != "centralized" else 1)
    )

    if mode == "centralized":
        counter = EquitCounter(roi_voxels=problem.n, n_subsets=1)
        log = ConvergenceLog(pnp=False)

        def on_pass(k, relnorm, x):
            log.append(
                iter=k,
                equits=counter.equits(),
                relnorm=relnorm,
                r_F=None,
                r_u=None,
                nrmse=None if ref is None else nrmse(x, ref),
                wall=None,
            )

        try:
            x = icd_map_solve(
                problem,
                tol=cfg.get("mace", "tol"),
                max_passes=cfg.get("mace", "max_outer"),
                counter=counter,
                on_pass=on_pass,
                clamp_nonneg=cfg.get("mace", "clamp_nonneg"),
            )
        except ConvergenceError:
            log.write_csv(paths["csv"])
            raise
        log.write_csv(paths["csv"])
    else:
        mace_cfg = cfg.mace_config(sigma)
        solver = mace_pnp_solve if mode == "mace-pnp" else mace_solve
        try:
            with WorkerPool(workers) as pool:
                result = solver(problem, mace_cfg, pool=pool, ref_image=ref)
        except ConvergenceError as err:
            if err.log is not None:
                err.log.write_csv(paths["csv"])
            raise
        x = result.image
        result.log.write_csv(paths["csv"])
        paths["stack"] = out / "stack.npz"
        np.savez(paths["stack"], w=result.stack, sigma=sigma, mode=mace_cfg.mode)
        if result.residuals is not None:
            paths["residuals"] = out / "residuals.txt"
            paths["residuals"].write_text(_residual_report_text(result, sigma, mode))

    save_image(paths["image"], x, geom.n_side, geom.n_side)
    save_pgm(paths["preview"], np.asarray(x).reshape(geom.n_side, geom.n_side))
    return {k: str(v) for k, v in paths.items()}


def equits_to_target(log_rows, target: float):
    """Equits at the first logged iteration whose NRMSE is <= target."""
    for row in log_rows:
        val = row.get("nrmse")
        if val is not None and val <= target and row.get("equits") is not None:
            return row["equits"]
    return None


def sweep(cfg: RunConfig, out_dir=None) -> dict:
    """Run the configured rho / N / sigma sweeps and tabulate equits-to-target.

    Each cell reports the equits needed to reach the experiment target NRMSE
    against the fully converged reference (blank when never reached).
    """
    out = Path(out_dir if out_dir is not None else cfg.get("io", "output_dir"))
    out.mkdir(parents=True, exist_ok=True)
    problem, phantom, sigma = prepare_problem(cfg)
    mode = cfg.get("mace", "mode")
    if mode == "centralized":
        raise ValueError("sweep requires a consensus mode (mace or mace-pnp)")
    ref = _reference_image(problem, cfg, sigma)
    if ref is None:
        raise ValueError("sweep needs a dense reference (quadratic prior or proximal denoiser)")
    target = cfg.get("experiment", "target_nrmse")
    solver = mace_pnp_solve if mode == "mace-pnp" else mace_solve
    phantom_name = cfg.get("sim", "phantom")

    def measure(mace_cfg):
        try:
            result = solver(problem, mace_cfg, ref_image=ref)
            rows = result.log.rows
        except ConvergenceError as err:
            if err.log is None:
                raise
            rows = err.log.rows
        eq = equits_to_target(rows, target)
        final = rows[-1]["nrmse"] if rows else None
        return eq, final

    lines = [f"equits to NRMSE <= {target:g} (phantom: {phantom_name}, sigma: {sigma!r})", ""]
    table_rows = []

    rho_list = cfg.get("experiment", "rho_list")
    if rho_list:
        lines.append("rho sweep, N = %d:" % cfg.get("mace", "n_subsets"))
        lines.append("  " + "".join(f"{r:>10.2f}" for r in rho_list))
        cells = []
        for rho in rho_list:
            eq, _ = measure(cfg.mace_config(sigma, rho=rho))
            cells.append(eq)
            table_rows.append({"sweep": "rho", "value": rho, "equits": eq})
        lines.append("  " + "".join(f"{'-' if c is None else format(c, '10.2f')}" for c in cells))
        lines.append("")

    n_list = [n for n in cfg.get("experiment", "n_list") if n <= problem.geom.n_views]
    if n_list:
        lines.append("view-subset sweep, rho = %.2f:" % cfg.get("mace", "rho"))
        lines.append(f"  {'N':>4} {'equits':>10} {'final NRMSE':>14}")
        for n in n_list:
            eq, fin = measure(cfg.mace_config(sigma, n_subsets=n))
            table_rows.append({"sweep": "N", "value": n, "equits": eq})
            lines.append(
                f"  {n:>4} {'-' if eq is None else format(eq, '10.2f')} "
                f"{'-' if fin is None else format(fin, '14.3e')}"
            )
        lines.append("")

    for sig in cfg.get("experiment", "sigma_list"):
        eq, fin = measure(cfg.mace_config(sig))
        table_rows.append({"sweep": "sigma", "value": sig, "equits": eq})
        lines.append(f"sigma = {sig:g}: equits = {'-' if eq is None else format(eq, '.2f')}")

    path = out / "sweep.txt"
    path.write_text("\n".join(lines) + "\n")
    csv_path = out / "sweep.csv"
    with open(csv_path, "w") as fh:
        fh.write("sweep,value,equits\n")
        for row in table_rows:
            eq = "" if row["equits"] is None else repr(float(row["equits"]))
            fh.write(f"{row['sweep']},{row['value']},{eq}\n")
    return {"table": str(path), "csv": str(csv_path), "rows": table_rows}
