import numpy as np
import pytest

from macetomo.cli import main as cli_main
from macetomo.config import apply_overrides, default_config, parse_config
from macetomo.fileio import load_image, load_sinogram, save_image, save_pgm, save_sinogram
from macetomo.geometry import Geometry, build_system_matrix
from macetomo.runner import per_agent_nnz, run, sweep
from macetomo.sim import make_phantom, simulate_sinogram


@pytest.fixture()
def small_geom():
    return Geometry(n_side=16, pixel_pitch=1.0, n_views=16, n_channels=24, channel_pitch=1.0)


# ---------------------------------------------------------------------------
# phantoms and simulation


def test_uniform_disk_phantom(small_geom):
    img = make_phantom("uniform-disk", small_geom).reshape(16, 16)
    assert img[8, 8] == pytest.approx(0.04)
    assert img[0, 0] == 0.0
    assert img.max() <= 0.05 and img.min() >= 0.0


def test_checker_phantom_mean(small_geom):
    img = make_phantom("checker", small_geom)
    assert set(np.unique(img)) == {0.0, 0.04}
    assert abs(img.mean() - 0.02) <= 0.04 / small_geom.n_pixels


def test_ellipse_phantom_rotation_symmetry(small_geom):
    # symmetric down to block-averaging rounding (summation order flips)
    img = make_phantom("shepp-logan-like", small_geom, symmetric=True).reshape(16, 16)
    assert np.allclose(img, np.rot90(img, 2), rtol=0.0, atol=1e-15)
    asym = make_phantom("shepp-logan-like", small_geom).reshape(16, 16)
    assert np.max(np.abs(asym - np.rot90(asym, 2))) > 1e-3


def test_unknown_phantom_kind(small_geom):
    with pytest.raises(ValueError):
        make_phantom("donut", small_geom)


def test_simulate_sinogram_noise_off_and_reproducible(small_geom):
    mats = build_system_matrix(small_geom)
    phantom = make_phantom("uniform-disk", small_geom)
    clean = simulate_sinogram(phantom, mats, seed=1, counts_scale=np.inf)
    from macetomo.geometry import forward_project

    assert np.array_equal(clean.y, forward_project(mats, phantom))
    a = simulate_sinogram(phantom, mats, seed=42, counts_scale=100.0)
    b = simulate_sinogram(phantom, mats, seed=42, counts_scale=100.0)
    assert np.array_equal(a.y, b.y)
    c = simulate_sinogram(phantom, mats, seed=43, counts_scale=100.0)
    assert not np.array_equal(a.y, c.y)
    ident = simulate_sinogram(phantom, mats, seed=1, weight_kind="identity")
    assert np.all(ident.weights == 1.0)


def test_simulated_noise_variance_matches_weights():
    geom = Geometry(n_side=4, pixel_pitch=1.0, n_views=4, n_channels=6, channel_pitch=0.8)
    mats = build_system_matrix(geom)
    phantom = make_phantom("uniform-disk", geom)
    from macetomo.geometry import forward_project

    clean = forward_project(mats, phantom)
    samples = np.stack(
        [simulate_sinogram(phantom, mats, seed=s, counts_scale=1.0).y - clean for s in range(1000)]
    )
    weights = simulate_sinogram(phantom, mats, seed=0).weights
    var = samples.var(axis=0)
    assert np.all(np.abs(var * weights - 1.0) < 0.10 + 3.0 / np.sqrt(1000))


# ---------------------------------------------------------------------------
# file formats


def test_image_roundtrip(tmp_path):
    img = np.random.default_rng(0).standard_normal((5, 7))
    path = tmp_path / "x.img"
    save_image(path, img, 5, 7)
    with open(path, "rb") as fh:
        assert fh.readline() == b"MACEIMG1\n"
        assert fh.readline() == b"5 7\n"
    back = load_image(path)
    assert back.shape == (5, 7)
    assert np.array_equal(back, img.astype(np.float32).astype(np.float64))


def test_sinogram_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    y = rng.standard_normal((3, 4))
    w = rng.random((3, 4))
    path = tmp_path / "s.sino"
    save_sinogram(path, y, w)
    with open(path, "rb") as fh:
        assert fh.readline() == b"MACESINO1\n"
        assert fh.readline() == b"3 4\n"
        payload = fh.read()
    assert len(payload) == 2 * 4 * 12
    y2, w2 = load_sinogram(path)
    assert np.array_equal(y2, y.astype(np.float32).astype(np.float64))
    assert np.array_equal(w2, w.astype(np.float32).astype(np.float64))


def test_pgm_preview(tmp_path):
    img = np.array([[0.0, 1.0], [2.0, 4.0]])
    path = tmp_path / "p.pgm"
    save_pgm(path, img)
    data = path.read_bytes()
    assert data.startswith(b"P5\n2 2\n65535\n")
    pixels = np.frombuffer(data[len(b"P5\n2 2\n65535\n"):], dtype=">u2").reshape(2, 2)
    assert pixels[0, 0] == 0 and pixels[1, 1] == 65535
    assert pixels[0, 1] == round(1.0 / 4.0 * 65535)
    flat = tmp_path / "flat.pgm"
    save_pgm(flat, np.full((2, 2), 3.3))
    assert np.all(np.frombuffer(flat.read_bytes()[-8:], dtype=">u2") == 0)


# ---------------------------------------------------------------------------
# config


def test_default_config_builds():
    cfg = default_config()
    cfg.validate()
    geom = cfg.geometry()
    assert geom.n_side == 32 and geom.n_views == 64 and geom.n_channels == 96
    assert cfg.prior().kind == "quadratic-mrf"


def test_parse_config_and_overrides(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(
        "[geometry]\nn_side = 8\nn_views = 12\nn_channels = 10\n"
        "[mace]\nmode = centralized\nsigma = 0.5\n"
        "[experiment]\nrho_list = 0.4,0.9\n"
    )
    cfg = parse_config(path)
    assert cfg.get("geometry", "n_side") == 8
    assert cfg.get("mace", "mode") == "centralized"
    assert cfg.get("mace", "sigma") == 0.5
    assert cfg.get("experiment", "rho_list") == (0.4, 0.9)
    apply_overrides(cfg, ["mace.mode=mace", "mace.sigma=auto", "sim.counts_scale=inf"])
    assert cfg.get("mace", "mode") == "mace"
    assert cfg.get("mace", "sigma") == "auto"
    assert np.isinf(cfg.get("sim", "counts_scale"))


def test_config_rejects_unknown_keys(tmp_path):
    bad_key = tmp_path / "bad1.ini"
    bad_key.write_text("[geometry]\nn_sides = 8\n")
    with pytest.raises(ValueError, match="unknown config key"):
        parse_config(bad_key)
    bad_section = tmp_path / "bad2.ini"
    bad_section.write_text("[geom]\nn_side = 8\n")
    with pytest.raises(ValueError, match="unknown config section"):
        parse_config(bad_section)
    cfg = default_config()
    with pytest.raises(ValueError):
        apply_overrides(cfg, ["mace.mode=warp-drive"])
    with pytest.raises(ValueError):
        apply_overrides(cfg, ["nonsense"])


def _fast_cfg(out_dir, mode="mace", workers=0):
    cfg = default_config()
    for item in (
        "geometry.n_side=12",
        "geometry.n_views=16",
        "geometry.n_channels=20",
        "geometry.channel_pitch=0.9",
        "prior.beta=1.0",
        "mace.mode=%s" % mode,
        "mace.n_subsets=4",
        "mace.sigma=0.08",
        "mace.tol=1e-8",
        "mace.max_outer=4000",
        "mace.workers=%d" % workers,
        "sim.seed=11",
        "io.output_dir=%s" % out_dir,
    ):
        apply_overrides(cfg, [item])
    return cfg


# ---------------------------------------------------------------------------
# runner + CLI


def test_run_centralized_writes_artifacts(tmp_path):
    cfg = _fast_cfg(tmp_path / "central", mode="centralized")
    paths = run(cfg)
    for key in ("image", "preview", "csv", "memory", "phantom", "sinogram"):
        assert (key in paths) and len(open(paths[key], "rb").read()) > 0
    assert "residuals" not in paths
    header = open(paths["csv"]).readline().strip()
    assert header == "iter,equits,mann_update_relnorm,r_F,r_u,nrmse_vs_ref,wall_seconds"
    import csv

    rows = list(csv.DictReader(open(paths["csv"])))
    assert float(rows[0]["equits"]) == 1.0
    assert float(rows[-1]["nrmse_vs_ref"]) < 1e-5


def test_run_mace_writes_residuals_and_stack(tmp_path):
    cfg = _fast_cfg(tmp_path / "mace")
    paths = run(cfg)
    assert "residuals" in paths and "stack" in paths
    text = open(paths["residuals"]).read()
    assert "r_F" in text and "r_u" in text
    data = np.load(paths["stack"])
    assert data["w"].shape == (4, 144)
    import csv

    rows = list(csv.DictReader(open(paths["csv"])))
    assert rows[-1]["r_F"] != "" and float(rows[-1]["r_F"]) < 1e-6
    assert float(rows[-1]["mann_update_relnorm"]) < 1e-8


def test_run_mace_pnp_mode(tmp_path):
    cfg = _fast_cfg(tmp_path / "pnp", mode="mace-pnp")
    apply_overrides(cfg, ["mace.denoiser=quadratic-prox", "mace.denoiser_lambda=2.0",
                          "mace.sigma=0.05"])
    paths = run(cfg)
    text = open(paths["residuals"]).read()
    assert "r_H" in text
    import csv

    rows = list(csv.DictReader(open(paths["csv"])))
    assert "r_H" in rows[0]
    assert float(rows[-1]["nrmse_vs_ref"]) < 1e-6  # vs the serial reference


def test_run_deterministic_across_worker_counts(tmp_path):
    a = run(_fast_cfg(tmp_path / "w1", workers=1))
    b = run(_fast_cfg(tmp_path / "w4", workers=4))
    assert open(a["image"], "rb").read() == open(b["image"], "rb").read()
    assert open(a["preview"], "rb").read() == open(b["preview"], "rb").read()


def test_run_failure_preserves_log(tmp_path):
    from macetomo.icd import ConvergenceError

    cfg = _fast_cfg(tmp_path / "fail")
    apply_overrides(cfg, ["mace.max_outer=3", "mace.tol=1e-14"])
    with pytest.raises(ConvergenceError):
        run(cfg)
    csv_path = tmp_path / "fail" / "convergence.csv"
    assert csv_path.exists()
    assert len(csv_path.read_text().strip().splitlines()) == 4  # header + 3 rows


def test_run_uses_matrix_cache(tmp_path):
    cfg = _fast_cfg(tmp_path / "cache_run")
    cache = tmp_path / "system.mat"
    apply_overrides(cfg, [f"io.matrix_cache={cache}"])
    run(cfg)
    assert cache.exists()
    # second run loads the cache; mismatched geometry is rejected
    run(cfg)
    apply_overrides(cfg, ["geometry.n_side=10"])
    with pytest.raises(ValueError, match="cache"):
        run(cfg)


def test_memory_report_interleaving_bound(small_geom):
    mats = build_system_matrix(small_geom)
    total = sum(m.nnz for m in mats)
    biggest_view = max(m.nnz for m in mats)
    for n in (2, 4, 8, 16):
        worst = max(per_agent_nnz(mats, n))
        assert worst <= int(np.ceil(total / n)) + biggest_view


def test_sweep_produces_tables(tmp_path):
    cfg = _fast_cfg(tmp_path / "sweep")
    apply_overrides(
        cfg,
        ["experiment.rho_list=0.5,0.8", "experiment.n_list=1,2", "experiment.target_nrmse=1e-3"],
    )
    result = sweep(cfg)
    rows = result["rows"]
    assert any(r["sweep"] == "rho" for r in rows)
    assert any(r["sweep"] == "N" for r in rows)
    text = open(result["table"]).read()
    assert "rho sweep" in text and "view-subset sweep" in text


def test_cli_phantom_project_reconstruct_metrics(tmp_path, capsys):
    ini = tmp_path / "run.ini"
    ini.write_text(
        "[geometry]\nn_side = 12\nn_views = 16\nn_channels = 20\nchannel_pitch = 0.9\n"
        "[prior]\nbeta = 1.0\n"
        "[mace]\nmode = mace\nn_subsets = 4\nsigma = 0.08\ntol = 1e-8\nmax_outer = 4000\n"
        f"[io]\noutput_dir = {tmp_path / 'cli_out'}\n"
    )
    assert cli_main(["phantom", "--config", str(ini)]) == 0
    assert cli_main(["project", "--config", str(ini)]) == 0
    assert cli_main(["reconstruct", "--config", str(ini)]) == 0
    assert cli_main(["residuals", "--config", str(ini)]) == 0
    out_dir = tmp_path / "cli_out"
    assert cli_main([
        "metrics",
        "--image", str(out_dir / "recon.img"),
        "--ref", str(out_dir / "phantom.img"),
    ]) == 0
    captured = capsys.readouterr().out
    assert "nrmse" in captured


def test_cli_reconstruct_requires_config():
    with pytest.raises(SystemExit):
        cli_main(["reconstruct"])


def test_cli_eigreport(tmp_path, capsys):
    assert cli_main([
        "eigreport",
        "--set", "geometry.n_side=4",
        "--set", "geometry.n_views=8",
        "--set", "geometry.n_channels=6",
        "--set", "mace.n_subsets=2",
        "--set", "mace.sigma=0.001",
        "--set", f"io.output_dir={tmp_path}",
    ]) == 0
    text = (tmp_path / "eigreport.txt").read_text()
    assert "spectral radius" in text
    assert (tmp_path / "eigenvalues.csv").exists()
    out = capsys.readouterr().out
    assert "spectral radius" in out


def test_cli_speedup_metrics(tmp_path, capsys):
    central = _fast_cfg(tmp_path / "c", mode="centralized")
    run(central)
    mace = _fast_cfg(tmp_path / "m")
    run(mace)
    assert cli_main([
        "metrics",
        "--central-csv", str(tmp_path / "c" / "convergence.csv"),
        "--mace-csv", str(tmp_path / "m" / "convergence.csv"),
        "--n-subsets", "4",
    ]) == 0
    assert "speedup" in capsys.readouterr().out
