"""Command-line interface.

Subcommands: phantom, project, reconstruct, residuals, eigreport, sweep,
metrics.  Every subcommand accepts ``--set section.key=value`` overrides on
top of an optional ``--config`` file; ``reconstruct`` requires the config.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import apply_overrides, default_config, parse_config
from .fileio import load_image, save_image, save_pgm, save_sinogram
from .mace import equilibrium_residuals
from .oracle import assemble_iteration_matrices, nrmse, speedup
from .runner import prepare_problem, run, sweep
from .sim import make_phantom


def _load_cfg(args, require_config=False):
    if getattr(args, "config", None):
        cfg = parse_config(args.config)
    elif require_config:
        raise SystemExit("error: --config is required for this command")
    else:
        cfg = default_config()
    for direct, addr in (
        ("mode", "mace.mode"),
        ("n_subsets", "mace.n_subsets"),
        ("rho", "mace.rho"),
        ("sigma", "mace.sigma"),
        ("seed", "sim.seed"),
        ("output_dir", "io.output_dir"),
    ):
        value = getattr(args, direct, None)
        if value is not None:
            section, key = addr.split(".")
            cfg.set(section, key, str(value))
    apply_overrides(cfg, args.set or [])
    return cfg


def _add_common(sub, config_required=False):
    sub.add_argument("--config", required=config_required, help="INI run configuration")
    sub.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                     help="override one config value (repeatable)")
    sub.add_argument("--output-dir", dest="output_dir", help="override io.output_dir")


def cmd_phantom(args) -> int:
    cfg = _load_cfg(args)
    geom = cfg.geometry()
    image = make_phantom(cfg.get("sim", "phantom"), geom)
    out = Path(args.out or Path(cfg.get("io", "output_dir")) / "phantom.img")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_image(out, image, geom.n_side, geom.n_side)
    save_pgm(out.with_suffix(".pgm"), image.reshape(geom.n_side, geom.n_side))
    print(f"wrote {out} and {out.with_suffix('.pgm')}")
    return 0


def cmd_project(args) -> int:
    cfg = _load_cfg(args)
    problem, _, _ = prepare_problem(cfg)
    out = Path(args.out or Path(cfg.get("io", "output_dir")) / "sinogram.sino")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_sinogram(out, problem.y, problem.weights)
    print(f"wrote {out}")
    return 0


def cmd_reconstruct(args) -> int:
    cfg = _load_cfg(args, require_config=True)
    paths = run(cfg)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


def cmd_residuals(args) -> int:
    cfg = _load_cfg(args, require_config=True)
    stack_path = Path(args.stack or Path(cfg.get("io", "output_dir")) / "stack.npz")
    data = np.load(stack_path)
    problem, phantom, sigma = prepare_problem(cfg)
    mace_cfg = cfg.mace_config(float(data["sigma"]))
    if str(data["mode"]) != mace_cfg.mode:
        raise SystemExit(
            f"error: stack was produced in mode {str(data['mode'])!r} but the "
            f"config selects {mace_cfg.mode!r}"
        )
    report = equilibrium_residuals(problem, mace_cfg, data["w"])
    aux = "r_H" if report.mode == "pnp" else "r_u"
    print(f"r_F = {report.r_F!r}")
    print(f"{aux} = {report.r_u!r}")
    for i, val in enumerate(report.per_agent):
        print(f"agent {i}: {val!r}")
    return 0


def cmd_eigreport(args) -> int:
    cfg = _load_cfg(args)
    problem, phantom, sigma = prepare_problem(cfg)
    mace_cfg = cfg.mace_config(sigma)
    report = assemble_iteration_matrices(problem, mace_cfg)
    out = Path(cfg.get("io", "output_dir"))
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "eigenvalues.csv"
    with open(csv_path, "w") as fh:
        fh.write("which,real,imag,abs\n")
        for which, evs in (
            ("exact", report.eigenvalues_exact),
            ("first_order", report.eigenvalues_first_order),
        ):
            for ev in evs:
                fh.write(f"{which},{ev.real!r},{ev.imag!r},{abs(ev)!r}\n")
    summary = out / "eigreport.txt"
    summary.write_text(
        "partial-update iteration matrix spectra\n"
        f"n_subsets: {report.n_subsets}  rho: {report.rho}  sigma: {report.sigma!r}\n"
        f"spectral radius (exact map):       {report.spectral_radius_exact!r}\n"
        f"spectral radius (first-order map): {report.spectral_radius_first_order!r}\n"
    )
    print(summary.read_text(), end="")
    print(f"wrote {csv_path} and {summary}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_cfg(args)
    result = sweep(cfg)
    print(Path(result["table"]).read_text(), end="")
    print(f"wrote {result['table']} and {result['csv']}")
    return 0


def _equits_from_csv(path) -> float:
    import csv

    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise SystemExit(f"error: {path} has no data rows")
    value = rows[-1]["equits"]
    if value == "":
        raise SystemExit(f"error: {path} has no equit accounting")
    return float(value)


def cmd_metrics(args) -> int:
    did = False
    if args.image and args.ref:
        a = load_image(args.image).ravel()
        b = load_image(args.ref).ravel()
        print(f"nrmse = {nrmse(a, b)!r}")
        did = True
    if args.central_csv and args.mace_csv:
        ec = _equits_from_csv(args.central_csv)
        em = _equits_from_csv(args.mace_csv)
        s = speedup(ec, em, args.n_subsets)
        print(f"equits_central = {ec!r}")
        print(f"equits_mace = {em!r}")
        print(f"speedup(N={args.n_subsets}) = {s!r}")
        did = True
    if not did:
        raise SystemExit("error: pass --image/--ref and/or --central-csv/--mace-csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="macetomo",
        description="Distributed consensus-equilibrium CT reconstruction toolkit",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("phantom", help="write the configured phantom image")
    _add_common(p)
    p.add_argument("--out", help="output image path")
    p.set_defaults(func=cmd_phantom)

    p = subs.add_parser("project", help="simulate and write the sinogram")
    _add_common(p)
    p.add_argument("--out", help="output sinogram path")
    p.set_defaults(func=cmd_project)

    p = subs.add_parser("reconstruct", help="run the configured reconstruction")
    _add_common(p, config_required=True)
    p.add_argument("--mode", choices=("centralized", "mace", "mace-pnp"))
    p.add_argument("--n-subsets", dest="n_subsets", type=int)
    p.add_argument("--rho", type=float)
    p.add_argument("--sigma")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_reconstruct)

    p = subs.add_parser("residuals", help="equilibrium residuals of a saved run")
    _add_common(p, config_required=True)
    p.add_argument("--stack", help="stack.npz from a previous reconstruct run")
    p.set_defaults(func=cmd_residuals)

    p = subs.add_parser("eigreport", help="iteration-matrix spectra (small problems)")
    _add_common(p)
    p.set_defaults(func=cmd_eigreport)

    p = subs.add_parser("sweep", help="rho / N / sigma convergence sweeps")
    _add_common(p)
    p.set_defaults(func=cmd_sweep)

    p = subs.add_parser("metrics", help="NRMSE between images; speedup from logs")
    p.add_argument("--image")
    p.add_argument("--ref")
    p.add_argument("--central-csv", dest="central_csv")
    p.add_argument("--mace-csv", dest="mace_csv")
    p.add_argument("--n-subsets", dest="n_subsets", type=int, default=1)
    p.set_defaults(func=cmd_metrics)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
