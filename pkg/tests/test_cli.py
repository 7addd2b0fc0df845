import numpy as np
import pytest

from spectralpd import (GeometrySpec, SpectralForwardOp, build_parallel_projector,
                        default_head_phantom, default_material_table,
                        default_spectra, generate_phantom)
from spectralpd.cli import main
from spectralpd.phantom import (read_raw_image, write_materials_csv,
                                write_phantom_csv, write_raw_image,
                                write_spectra_csv, write_synthesis_csv)
from spectralpd.spectral import SpectralModel


def write_fixtures(root, n_bins=6):
    energies, weights = default_spectra(n_bins)
    table = default_material_table(n_bins)
    write_spectra_csv(root / "spectra.csv", weights)
    write_materials_csv(root / "materials.csv", table.coeffs)
    write_synthesis_csv(root / "synthesis.csv", table)
    write_phantom_csv(root / "phantom.csv", default_head_phantom())
    return table


def write_config(root, *, n_side=16, n_bins=15, n_views=8, max_iters=150,
                 lam=0.0, snr_db=None, seed=0, scheme="epd-exact",
                 tau=0.2, out="out", log_every=50, energy=""):
    noise = f"snr_db = {snr_db}" if snr_db is not None else "snr_db ="
    text = f"""
[geometry]
n_side = {n_side}
n_bins = {n_bins}
n_views = {n_views}
angular_gap = 0.026179938779914945

[model]
spectra_csv = spectra.csv
materials_csv = materials.csv
synthesis_csv = synthesis.csv

[phantom]
ellipses_csv = phantom.csv

[solver]
scheme = {scheme}
tau = {tau}
sigma_k = {tau}
sigma_a = {tau}
lambda = {lam}
max_iters = {max_iters}
log_every = {log_every}

[noise]
{noise}
seed = {seed}

[output]
directory = {out}
energy_images_kev = {energy}
"""
    path = root / "run.ini"
    path.write_text(text)
    return path


@pytest.fixture()
def workspace(tmp_path):
    write_fixtures(tmp_path)
    return tmp_path


class TestSimulate:
    def test_noise_free_sinogram_is_exact(self, workspace):
        cfg = write_config(workspace)
        assert main(["simulate", "--config", str(cfg)]) == 0
        out = workspace / "out"
        g, n_bins, n_views, _ = read_raw_image(out / "sinogram.raw")
        assert (n_bins, n_views) == (15, 16)
        # recompute the forward projection independently of the artifacts
        geom = GeometrySpec.dect(16, 8, 0.026179938779914945, n_bins=15)
        from spectralpd.spectral import load_spectral_model
        model = load_spectral_model(workspace / "spectra.csv",
                                    workspace / "materials.csv",
                                    geom.ray_spectra())
        op = SpectralForwardOp(build_parallel_projector(geom), model)
        truth, _, _, _ = read_raw_image(out / "truth.raw")
        assert (g == op.forward(truth)).all()

    def test_manifest_reproducible_and_checkable(self, workspace):
        cfg = write_config(workspace, snr_db=21.0, seed=4)
        assert main(["simulate", "--config", str(cfg), "--out",
                     str(workspace / "a")]) == 0
        assert main(["simulate", "--config", str(cfg), "--out",
                     str(workspace / "b")]) == 0
        m_a = (workspace / "a" / "manifest.txt").read_text()
        m_b = (workspace / "b" / "manifest.txt").read_text()
        assert m_a == m_b
        assert main(["simulate", "--config", str(cfg), "--out",
                     str(workspace / "a"), "--check"]) == 0

    def test_check_detects_tampering(self, workspace):
        cfg = write_config(workspace)
        assert main(["simulate", "--config", str(cfg)]) == 0
        sino = workspace / "out" / "sinogram.raw"
        blob = bytearray(sino.read_bytes())
        blob[0] ^= 0xFF
        sino.write_bytes(bytes(blob))
        assert main(["simulate", "--config", str(cfg), "--check"]) == 4

    def test_measured_snr_recorded(self, workspace):
        cfg = write_config(workspace, snr_db=27.11, seed=9)
        assert main(["simulate", "--config", str(cfg)]) == 0
        manifest = (workspace / "out" / "manifest.txt").read_text()
        line = next(l for l in manifest.splitlines() if "snr_db_measured" in l)
        measured = float(line.split("=")[1])
        assert abs(measured - 27.11) <= 0.01


class TestReconstruct:
    def test_zero_iterations_writes_initial_images(self, workspace):
        cfg = write_config(workspace, max_iters=0)
        assert main(["simulate", "--config", str(cfg)]) == 0
        assert main(["reconstruct", "--config", str(cfg)]) == 0
        out = workspace / "out"
        recon, _, _, _ = read_raw_image(out / "recon.raw")
        assert (recon == 0).all()
        metrics_lines = (out / "metrics.csv").read_text().splitlines()
        assert len(metrics_lines) == 1  # header only, empty body
        iter_lines = (out / "iterations.csv").read_text().splitlines()
        assert len(iter_lines) == 1

    def test_short_run_outputs(self, workspace):
        cfg = write_config(workspace, max_iters=200, energy="60,100")
        assert main(["simulate", "--config", str(cfg)]) == 0
        assert main(["reconstruct", "--config", str(cfg)]) == 0
        out = workspace / "out"
        for name in ("recon.raw", "recon_m1.pgm", "recon_m2.pgm",
                     "energy_60kev.raw", "energy_100kev.raw",
                     "iterations.csv", "metrics.csv", "certificate.txt",
                     "manifest_reconstruct.txt"):
            assert (out / name).exists(), name
        body = (out / "metrics.csv").read_text().splitlines()
        assert len(body) == 2
        header = body[0].split(",")
        assert "energy_60kev_psnr_db" in header
        assert main(["reconstruct", "--config", str(cfg), "--check"]) == 0

    def test_scheme_override_changes_trajectory(self, workspace):
        cfg = write_config(workspace, max_iters=120, log_every=40)
        for out, scheme in (("o1", "epd-exact"), ("o2", "exact-nl-pdhgm")):
            assert main(["simulate", "--config", str(cfg), "--out",
                         str(workspace / out)]) == 0
            assert main(["reconstruct", "--config", str(cfg), "--out",
                         str(workspace / out), "--scheme", scheme]) == 0

        def rd_series(path):
            lines = (path / "iterations.csv").read_text().splitlines()[1:]
            return [float(l.split(",")[2]) for l in lines]

        rd1 = rd_series(workspace / "o1")
        rd2 = rd_series(workspace / "o2")
        assert rd1 != rd2
        assert rd1[-1] < rd1[0] and rd2[-1] < rd2[0]

    def test_missing_sinogram_is_config_error(self, workspace):
        cfg = write_config(workspace)
        assert main(["reconstruct", "--config", str(cfg)]) == 2

    def test_divergent_data_aborts_with_code_3(self, workspace):
        cfg = write_config(workspace, max_iters=5)
        assert main(["simulate", "--config", str(cfg)]) == 0
        out = workspace / "out"
        g, w, h, _ = read_raw_image(out / "sinogram.raw")
        g[0] = np.nan
        write_raw_image(out / "sinogram.raw", g, w, h, 1)
        assert main(["reconstruct", "--config", str(cfg)]) == 3


class TestVerify:
    def test_certified_config_passes(self, workspace):
        cfg = write_config(workspace, n_side=8, n_bins=9, n_views=5,
                           tau=0.2, max_iters=0)
        assert main(["verify", "--config", str(cfg)]) == 0
        report = (workspace / "out" / "verify_report.txt").read_text()
        assert "holds_step_product = PASS" in report
        assert "remainder_bound_holds = PASS" in report

    def test_violated_steps_fail(self, workspace):
        cfg = write_config(workspace, n_side=8, n_bins=9, n_views=5,
                           tau=5.0, max_iters=0)
        assert main(["verify", "--config", str(cfg)]) == 4
        report = (workspace / "out" / "verify_report.txt").read_text()
        assert "holds_step_product = FAIL" in report

    def test_oversized_instance_rejected(self, workspace):
        cfg = write_config(workspace, n_side=32, n_bins=45, n_views=60)
        assert main(["verify", "--config", str(cfg)]) == 2


class TestMetricsCommand:
    def test_recompute_from_artifacts(self, workspace, capsys):
        cfg = write_config(workspace, max_iters=100)
        assert main(["simulate", "--config", str(cfg)]) == 0
        assert main(["reconstruct", "--config", str(cfg)]) == 0
        assert main(["metrics", "--config", str(cfg)]) == 0
        out = capsys.readouterr().out
        assert "re,rd,rt" in out
        assert (workspace / "out" / "metrics_recomputed.csv").exists()

    def test_missing_artifacts_rejected(self, workspace):
        cfg = write_config(workspace)
        assert main(["metrics", "--config", str(cfg)]) == 2


class TestConfigErrors:
    def test_missing_config_file(self, tmp_path):
        assert main(["simulate", "--config", str(tmp_path / "nope.ini")]) == 2

    def test_missing_fixture_file(self, tmp_path):
        write_fixtures(tmp_path)
        (tmp_path / "phantom.csv").unlink()
        cfg = write_config(tmp_path)
        assert main(["simulate", "--config", str(cfg)]) == 2

    def test_unknown_scheme_named(self, tmp_path, capsys):
        write_fixtures(tmp_path)
        cfg = write_config(tmp_path, scheme="gradient-descent")
        assert main(["simulate", "--config", str(cfg)]) == 2
        assert "solver.scheme" in capsys.readouterr().err

    def test_missing_required_field(self, tmp_path, capsys):
        write_fixtures(tmp_path)
        cfg = write_config(tmp_path)
        text = cfg.read_text().replace("n_side = 16\n", "")
        cfg.write_text(text)
        assert main(["simulate", "--config", str(cfg)]) == 2
        assert "geometry.n_side" in capsys.readouterr().err
