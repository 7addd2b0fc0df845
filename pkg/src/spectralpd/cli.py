"""Config-driven batch front-end.

Subcommands: simulate (phantom + forward model -> sinogram artifacts),
reconstruct (sinogram -> images, per-iteration CSV, certificate),
verify (dense theory checks on a small instance), metrics (recompute
quality metrics from artifacts).  Exit codes: 0 success, 2 config
error, 3 numerical abort, 4 verification failure.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics as metrics_mod
from . import phantom as ph
from . import theory
from .linops import GeometrySpec, GradientOperator, build_parallel_projector
from .solver import (OperatorBundle, SchemeId, SolverConfig,
                     SolverDivergenceError, run, validate_step_sizes,
                     write_reports_csv)
from .spectral import SpectralForwardOp, load_spectral_model

__all__ = ["main"]


class ConfigError(Exception):
    pass


class VerificationFailure(Exception):
    pass


@dataclass
class RunSetup:
    geom: GeometrySpec
    model_paths: tuple
    phantom_path: Path
    synthesis_path: Path | None
    solver: SolverConfig
    scheme: SchemeId
    snr_db: float | None
    seed: int
    out_dir: Path
    energy_kev: tuple


def _get(cp, section, key, cast, default=None, required=False):
    if not cp.has_option(section, key):
        if required:
            raise ConfigError(f"missing required field {section}.{key}")
        return default
    raw = cp.get(section, key).strip()
    if raw == "":
        return default
    try:
        return cast(raw)
    except ValueError as exc:
        raise ConfigError(f"invalid value for {section}.{key}: {raw!r}") from exc


def _existing_path(base, section, key, raw):
    path = (base / raw).resolve() if not Path(raw).is_absolute() else Path(raw)
    if not path.exists():
        raise ConfigError(f"{section}.{key}: file not found: {path}")
    return path


def load_run_setup(config_path, out_override=None, seed_override=None,
                   scheme_override=None):
    config_path = Path(config_path)
    if not config_path.exists():
        raise ConfigError(f"config file not found: {config_path}")
    cp = configparser.ConfigParser()
    try:
        cp.read(config_path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    base = config_path.parent

    n_side = _get(cp, "geometry", "n_side", int, required=True)
    n_bins = _get(cp, "geometry", "n_bins", int, required=True)
    n_views = _get(cp, "geometry", "n_views", int, required=True)
    gap = _get(cp, "geometry", "angular_gap", float, default=0.0)
    extent = _get(cp, "geometry", "domain_extent", float, default=5.0)
    det_half = _get(cp, "geometry", "detector_half_width", float, default=7.05)
    try:
        geom = GeometrySpec.dect(n_side, n_views, gap, n_bins=n_bins,
                                 domain_extent=extent, detector_half_width=det_half)
    except ValueError as exc:
        raise ConfigError(f"geometry: {exc}") from exc

    spectra = _existing_path(base, "model", "spectra_csv",
                             _get(cp, "model", "spectra_csv", str, required=True))
    materials = _existing_path(base, "model", "materials_csv",
                               _get(cp, "model", "materials_csv", str, required=True))
    synthesis_raw = _get(cp, "model", "synthesis_csv", str)
    synthesis = (_existing_path(base, "model", "synthesis_csv", synthesis_raw)
                 if synthesis_raw else None)
    phantom_path = _existing_path(base, "phantom", "ellipses_csv",
                                  _get(cp, "phantom", "ellipses_csv", str,
                                       required=True))

    scheme_name = scheme_override or _get(cp, "solver", "scheme", str,
                                          default=SchemeId.EPD_EXACT.value)
    try:
        scheme = SchemeId(scheme_name)
    except ValueError:
        raise ConfigError(
            f"solver.scheme: unknown scheme {scheme_name!r}; valid names: "
            + ", ".join(s.value for s in SchemeId)) from None
    try:
        solver = SolverConfig(
            tau=_get(cp, "solver", "tau", float, default=0.2),
            sigma_k=_get(cp, "solver", "sigma_k", float, default=0.2),
            sigma_a=_get(cp, "solver", "sigma_a", float, default=0.2),
            theta=_get(cp, "solver", "theta", float, default=1.0),
            lam=_get(cp, "solver", "lambda", float, default=0.0),
            max_iters=_get(cp, "solver", "max_iters", int, default=0),
            log_every=_get(cp, "solver", "log_every", int, default=100),
            termination=_get(cp, "solver", "termination", float),
            force_steps=_get(cp, "solver", "force_steps",
                             lambda s: s.lower() in ("1", "true", "yes"),
                             default=True),
        )
    except ValueError as exc:
        raise ConfigError(f"solver: {exc}") from exc

    seed = seed_override if seed_override is not None else _get(
        cp, "noise", "seed", int, default=0)
    snr_db = _get(cp, "noise", "snr_db", float)
    solver.seed = seed

    out_dir = Path(out_override) if out_override else (
        base / _get(cp, "output", "directory", str, default="out"))
    energy_raw = _get(cp, "output", "energy_images_kev", str, default="")
    energy = tuple(float(tok) for tok in energy_raw.split(",") if tok.strip()) \
        if energy_raw else ()

    return RunSetup(geom=geom, model_paths=(spectra, materials),
                    phantom_path=phantom_path, synthesis_path=synthesis,
                    solver=solver, scheme=scheme, snr_db=snr_db, seed=seed,
                    out_dir=out_dir, energy_kev=energy)


def _build_problem(setup):
    geom = setup.geom
    model = load_spectral_model(*setup.model_paths, geom.ray_spectra())
    matrix = build_parallel_projector(geom)
    op = SpectralForwardOp(matrix, model)
    specs = ph.read_phantom_csv(setup.phantom_path)
    truth = ph.generate_phantom(specs, geom.n_side, model.n_materials,
                                geom.domain_extent)
    gradop = GradientOperator(geom.n_side, model.n_materials)
    return op, gradop, truth


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(path, files, extra=None):
    with open(path, "w") as fh:
        for key, value in (extra or {}).items():
            fh.write(f"# {key} = {value}\n")
        for name in files:
            fh.write(f"{_sha256(name)}  {Path(name).name}\n")


def _check_manifest(manifest_path):
    if not manifest_path.exists():
        raise VerificationFailure(f"manifest not found: {manifest_path}")
    bad = []
    for line in manifest_path.read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        digest, name = line.split(None, 1)
        target = manifest_path.parent / name.strip()
        if not target.exists() or _sha256(target) != digest:
            bad.append(name.strip())
    if bad:
        raise VerificationFailure("hash mismatch for: " + ", ".join(bad))


def _write_images(out_dir, stem, vector, n_side, n_mat):
    paths = []
    raw = out_dir / f"{stem}.raw"
    ph.write_raw_image(raw, vector, n_side, n_side, n_mat)
    paths += [raw, Path(str(raw) + ".meta")]
    planes = ph.material_planes(vector, n_side)
    for d in range(n_mat):
        pgm = out_dir / f"{stem}_m{d + 1}.pgm"
        ph.write_pgm16(pgm, planes[d])
        paths.append(pgm)
    return paths


def cmd_simulate(setup, check_only=False):
    out = setup.out_dir
    if check_only:
        _check_manifest(out / "manifest.txt")
        print(f"manifest ok: {out / 'manifest.txt'}")
        return 0
    out.mkdir(parents=True, exist_ok=True)
    op, _, truth = _build_problem(setup)
    clean = op.forward(truth)
    g = ph.simulate_data(op, truth, snr_db=setup.snr_db, seed=setup.seed)

    geom = setup.geom
    files = _write_images(out, "truth", truth, geom.n_side, op.n_materials)
    sino = out / "sinogram.raw"
    ph.write_raw_image(sino, g, geom.n_bins, geom.n_views, 1)
    files += [sino, Path(str(sino) + ".meta")]

    extra = {"seed": setup.seed}
    if setup.snr_db is not None:
        extra["snr_db_target"] = setup.snr_db
        extra["snr_db_measured"] = f"{ph.measured_snr_db(clean, g):.6f}"
    _write_manifest(out / "manifest.txt", files, extra)
    print(f"simulated {g.size} rays -> {out}")
    return 0


def _load_sinogram(out_dir):
    sino_path = out_dir / "sinogram.raw"
    if not sino_path.exists():
        raise ConfigError(f"sinogram artifact missing: {sino_path} (run simulate)")
    g, _, _, _ = ph.read_raw_image(sino_path)
    return g


def _synthesis_table(setup, op):
    energies, coeffs = ph.read_synthesis_csv(setup.synthesis_path)
    return ph.MaterialTable(np.arange(op.model.n_energies, dtype=float),
                            op.model.coeffs, energies, coeffs)


def cmd_reconstruct(setup, check_only=False):
    out = setup.out_dir
    if check_only:
        _check_manifest(out / "manifest_reconstruct.txt")
        print(f"manifest ok: {out / 'manifest_reconstruct.txt'}")
        return 0
    op, gradop, truth = _build_problem(setup)
    g = _load_sinogram(out)
    if g.shape != (op.n_rays,):
        raise ConfigError(f"sinogram has {g.size} entries, geometry expects "
                          f"{op.n_rays}")
    ops = OperatorBundle(forward=op, grad=gradop, data=g)
    certificate = validate_step_sizes(setup.solver, ops)
    with open(out / "certificate.txt", "w") as fh:
        fh.write("\n".join(certificate.summary_lines()) + "\n")

    state, reports = run(setup.scheme, ops, setup.solver,
                         certificate=certificate, f_truth=truth)

    geom = setup.geom
    files = _write_images(out, "recon", state.f, geom.n_side, op.n_materials)
    if setup.energy_kev:
        if setup.synthesis_path is None:
            raise ConfigError("output.energy_images_kev set but "
                              "model.synthesis_csv missing")
        table = _synthesis_table(setup, op)
        for kev in setup.energy_kev:
            img = ph.synthesize_energy_image(state.f, table, kev)
            files += _write_images(out, f"energy_{int(round(kev))}kev",
                                   img, geom.n_side, 1)

    iter_csv = out / "iterations.csv"
    with open(iter_csv, "w", newline="") as fh:
        write_reports_csv(reports, fh)

    metrics_csv = out / "metrics.csv"
    if reports:
        re, rd, rt = metrics_mod.relative_metrics(state.f, truth, g, op, gradop)
        report = metrics_mod.MetricReport(re=re, rd=rd, rt=rt)
        truth_planes = ph.material_planes(truth, geom.n_side)
        recon_planes = ph.material_planes(state.f, geom.n_side)
        for d in range(op.n_materials):
            report.add_image(f"material_{d + 1}", recon_planes[d], truth_planes[d])
        if setup.energy_kev and setup.synthesis_path is not None:
            table = _synthesis_table(setup, op)
            for kev in setup.energy_kev:
                rec_e = ph.synthesize_energy_image(state.f, table, kev)
                tru_e = ph.synthesize_energy_image(truth, table, kev)
                report.add_image(f"energy_{int(round(kev))}kev",
                                 rec_e.reshape(geom.n_side, geom.n_side),
                                 tru_e.reshape(geom.n_side, geom.n_side))
        report.write_csv(metrics_csv)
    else:
        with open(metrics_csv, "w") as fh:
            fh.write("re,rd,rt\n")
    files += [iter_csv, metrics_csv, out / "certificate.txt"]
    _write_manifest(out / "manifest_reconstruct.txt", files)
    final_rd = reports[-1].rd if reports else math.nan
    print(f"reconstructed with {setup.scheme.value}: {setup.solver.max_iters} "
          f"iterations, final RD {final_rd:.3e}")
    return 0


def cmd_verify(setup):
    op, gradop, truth = _build_problem(setup)
    dims = op.n_image + op.n_rays + gradop.n_rows
    if dims > 2000:
        raise ConfigError(f"verify instance has dimension {dims} > 2000; "
                          f"shrink geometry.n_side / n_views / n_bins")
    g = op.forward(truth)
    ops = OperatorBundle(forward=op, grad=gradop, data=g)
    cert = validate_step_sizes(setup.solver, ops)

    rng = np.random.default_rng(setup.seed)
    eigmins = []
    for _ in range(10):
        f = rng.uniform(0.0, 1.0, op.n_image)
        eigmin, _ = theory.check_psd(theory.assemble_metric(f, setup.solver, ops))
        eigmins.append(eigmin)
    psd_min = min(eigmins)
    psd_ok = psd_min >= -1e-10 if cert.holds_step_product else True

    c_r = op.ratio_lipschitz_constant()
    rho = 0.5 / c_r if c_r > 0 else 1.0
    remainder = theory.verify_remainder_contraction(op, truth, rho,
                                                    trials=50, seed=setup.seed)

    entries = {
        "c_k": cert.c_k,
        "norm_a": cert.norm_a,
        "kappa": cert.kappa,
        "s": cert.s,
        **cert.margins,
        "holds_step_product": cert.holds_step_product,
        "metric_min_eigenvalue": psd_min,
        "metric_psd_under_certificate": psd_ok,
        "ratio_constant": c_r,
        "remainder_worst_ratio": remainder.worst_ratio,
        "remainder_contraction": remainder.contraction,
        "remainder_bound_holds": remainder.passed,
    }
    setup.out_dir.mkdir(parents=True, exist_ok=True)
    report_path = setup.out_dir / "verify_report.txt"
    theory.write_verification_report(report_path, entries)
    print(f"verification report -> {report_path}")
    if not (cert.holds_step_product and psd_ok and remainder.passed):
        raise VerificationFailure(
            "mandatory checks failed: "
            + ", ".join(k for k, v in (("step_product", cert.holds_step_product),
                                       ("metric_psd", psd_ok),
                                       ("remainder_bound", remainder.passed))
                        if not v))
    return 0


def cmd_metrics(setup):
    out = setup.out_dir
    recon_path = out / "recon.raw"
    truth_path = out / "truth.raw"
    for path in (recon_path, truth_path):
        if not path.exists():
            raise ConfigError(f"artifact missing: {path}")
    recon, n_side, _, n_mat = ph.read_raw_image(recon_path)
    truth, _, _, _ = ph.read_raw_image(truth_path)
    g = _load_sinogram(out)
    op, gradop, _ = _build_problem(setup)
    re, rd, rt = metrics_mod.relative_metrics(recon, truth, g, op, gradop)
    report = metrics_mod.MetricReport(re=re, rd=rd, rt=rt)
    truth_planes = ph.material_planes(truth, n_side)
    recon_planes = ph.material_planes(recon, n_side)
    for d in range(n_mat):
        report.add_image(f"material_{d + 1}", recon_planes[d], truth_planes[d])
    report.write_csv(out / "metrics_recomputed.csv")
    print(report.csv_header())
    print(report.csv_row())
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="spectralpd",
        description="spectral CT reconstruction and verification runner")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
            ("simulate", "generate sinogram and truth artifacts"),
            ("reconstruct", "run a scheme against simulated artifacts"),
            ("verify", "dense theory checks on a small instance"),
            ("metrics", "recompute metrics from artifacts")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to the INI config")
        p.add_argument("--out", default=None, help="override output directory")
        p.add_argument("--seed", type=int, default=None, help="override seed")
        p.add_argument("--scheme", default=None, help="override scheme name")
        p.add_argument("--check", action="store_true",
                       help="verify artifact hashes against the manifest")
    args = parser.parse_args(argv)

    try:
        setup = load_run_setup(args.config, out_override=args.out,
                               seed_override=args.seed,
                               scheme_override=args.scheme)
        if args.command == "simulate":
            return cmd_simulate(setup, check_only=args.check)
        if args.command == "reconstruct":
            return cmd_reconstruct(setup, check_only=args.check)
        if args.command == "verify":
            return cmd_verify(setup)
        return cmd_metrics(setup)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SolverDivergenceError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3
    except VerificationFailure as exc:
        print(f"verification failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    raise SystemExit(main())
