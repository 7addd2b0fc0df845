"""Test-data generation: ellipse phantoms, synthetic spectra and material
tables, noisy sinogram simulation, monochromatic image synthesis, and
the CSV / raw-image fixture formats."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .spectral import SpectralModel

__all__ = [
    "EllipseSpec",
    "MaterialTable",
    "generate_phantom",
    "default_head_phantom",
    "default_spectra",
    "default_material_table",
    "default_model",
    "simulate_data",
    "synthesize_energy_image",
    "material_planes",
    "write_phantom_csv",
    "read_phantom_csv",
    "write_spectra_csv",
    "write_materials_csv",
    "write_synthesis_csv",
    "read_synthesis_csv",
    "write_raw_image",
    "read_raw_image",
    "write_pgm16",
]


@dataclass(frozen=True)
class EllipseSpec:
    """One ellipse: center and semi-axes in domain units, rotation in
    radians, one additive density value per material.  Values may be
    negative to carve out already-painted regions; the composed phantom
    is clamped to [0, 1]."""

    center: tuple
    semi_axes: tuple
    rotation: float
    values: tuple

    def __post_init__(self):
        if self.semi_axes[0] <= 0 or self.semi_axes[1] <= 0:
            raise ValueError("semi-axes must be positive")


def generate_phantom(specs, n_side, n_materials=None, domain_extent=5.0):
    """Compose ellipses on the pixel grid; returns the stacked image
    vector (materials concatenated, each row-major from top-left)."""
    if n_side < 8:
        raise ValueError(f"n_side must be >= 8, got {n_side}")
    if n_materials is None:
        n_materials = len(specs[0].values) if specs else 1
    h = 2.0 * domain_extent / n_side
    xs = -domain_extent + h * (np.arange(n_side) + 0.5)
    ys = domain_extent - h * (np.arange(n_side) + 0.5)
    gx, gy = np.meshgrid(xs, ys)  # gy descends with row index

    planes = np.zeros((n_materials, n_side, n_side))
    for spec in specs:
        if len(spec.values) != n_materials:
            raise ValueError("ellipse value count does not match material count")
        cx, cy = spec.center
        a, b = spec.semi_axes
        c, s = np.cos(spec.rotation), np.sin(spec.rotation)
        u = (gx - cx) * c + (gy - cy) * s
        v = -(gx - cx) * s + (gy - cy) * c
        inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        for d, val in enumerate(spec.values):
            planes[d][inside] += val
    np.clip(planes, 0.0, 1.0, out=planes)
    return planes.reshape(-1)


def default_head_phantom():
    """Head-like two-material phantom: a bone shell around a water-filled
    interior with a few internal features.  Materials: (water, bone)."""
    return [
        EllipseSpec((0.0, 0.0), (4.0, 3.2), 0.0, (0.0, 0.85)),     # skull shell
        EllipseSpec((0.0, 0.0), (3.55, 2.75), 0.0, (0.8, -0.85)),  # brain fill
        EllipseSpec((-1.2, 0.6), (0.9, 0.55), 0.5, (0.15, 0.0)),   # lesion
        EllipseSpec((1.3, 0.4), (0.65, 0.9), -0.3, (-0.25, 0.0)),  # ventricle
        EllipseSpec((0.2, -1.5), (0.45, 0.35), 0.0, (0.0, 0.6)),   # calcification
    ]


def material_planes(f, n_side):
    """Reshape a stacked image vector into (D, n_side, n_side)."""
    f = np.asarray(f, dtype=float)
    n = n_side * n_side
    if f.size % n:
        raise ValueError(f"vector of length {f.size} is not a stack of "
                         f"{n_side}x{n_side} planes")
    return f.reshape(-1, n_side, n_side)


# ---------------------------------------------------------------------------
# synthetic spectra and material coefficients


def default_spectra(n_bins=8, lo_peak=40.0, hi_peak=110.0):
    """Two smooth unimodal spectra over energy bins spanning 20-140 keV.
    Returns (bin energies in keV, normalized weights of shape (2, M))."""
    energies = np.linspace(20.0, 140.0, n_bins)
    low = np.exp(-0.5 * ((energies - lo_peak) / 10.0) ** 2)
    high = np.exp(-0.5 * ((energies - hi_peak) / 18.0) ** 2)
    weights = np.vstack([low / low.sum(), high / high.sum()])
    return energies, weights


# coefficient scale keeps the default desk-scale problems inside the
# certified step-size region at the standard tau = sigma = 0.2, while the
# contrast between the two energy dependencies keeps the material
# decomposition well conditioned
def _water_coeff(energy):
    return 0.080 + 0.010 * np.exp(-(energy - 20.0) / 35.0)


def _bone_coeff(energy):
    return 0.040 + 0.115 * np.exp(-(energy - 20.0) / 25.0)


@dataclass(frozen=True)
class MaterialTable:
    """Decomposition coefficients per energy bin plus monochromatic
    synthesis coefficients per requested display energy."""

    bin_energies: np.ndarray        # (M,) keV
    coeffs: np.ndarray              # (D, M) per-bin decomposition coefficients
    synthesis_energies: np.ndarray  # (E,) keV
    synthesis_coeffs: np.ndarray    # (E, D)

    def __post_init__(self):
        if np.any(self.coeffs <= 0):
            raise ValueError("decomposition coefficients must be positive")
        if self.synthesis_coeffs.shape != (self.synthesis_energies.size,
                                           self.coeffs.shape[0]):
            raise ValueError("synthesis table shape mismatch")


def default_material_table(n_bins=8, synthesis_energies=(60.0, 100.0)):
    """Water/bone coefficients on the default energy grid."""
    energies, _ = default_spectra(n_bins)
    coeffs = np.vstack([_water_coeff(energies), _bone_coeff(energies)])
    syn_e = np.asarray(synthesis_energies, dtype=float)
    syn_c = np.column_stack([_water_coeff(syn_e), _bone_coeff(syn_e)])
    return MaterialTable(energies, coeffs, syn_e, syn_c)


def default_model(geom, n_bins=8):
    """Synthetic two-spectrum model matched to a geometry's ray layout."""
    _, weights = default_spectra(n_bins)
    table = default_material_table(n_bins)
    return SpectralModel(weights, table.coeffs, geom.ray_spectra()), table


def synthesize_energy_image(f, table, energy_kev):
    """Monochromatic image at one tabulated energy: pixelwise linear
    combination of the basis images with the synthesis coefficients."""
    match = np.isclose(table.synthesis_energies, energy_kev, rtol=0, atol=1e-9)
    if not match.any():
        raise ValueError(f"energy {energy_kev} keV not in synthesis table "
                         f"{table.synthesis_energies.tolist()}")
    c = table.synthesis_coeffs[int(np.argmax(match))]
    f = np.asarray(f, dtype=float)
    planes = f.reshape(c.size, -1)
    return c @ planes


# ---------------------------------------------------------------------------
# data simulation


def simulate_data(op, f_truth, snr_db=None, seed=0):
    """Forward-project the truth; optionally add white Gaussian noise
    scaled to hit the requested SNR exactly.  Deterministic per seed."""
    clean = op.forward(f_truth)
    if snr_db is None or np.isinf(snr_db):
        return clean
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(clean.size)
    target = np.linalg.norm(clean) / (np.linalg.norm(noise) * 10.0 ** (snr_db / 20.0))
    return clean + target * noise


def measured_snr_db(clean, noisy):
    noise = np.asarray(noisy) - np.asarray(clean)
    return 10.0 * np.log10(np.linalg.norm(clean) ** 2 / np.linalg.norm(noise) ** 2)


# ---------------------------------------------------------------------------
# CSV fixtures


def write_phantom_csv(path, specs):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        n_mat = len(specs[0].values) if specs else 1
        writer.writerow(["center_x", "center_y", "semi_axis_a", "semi_axis_b",
                         "rotation_rad"]
                        + [f"value_material_{d + 1}" for d in range(n_mat)])
        for e in specs:
            writer.writerow([repr(float(e.center[0])), repr(float(e.center[1])),
                             repr(float(e.semi_axes[0])), repr(float(e.semi_axes[1])),
                             repr(float(e.rotation))] + [repr(float(v)) for v in e.values])


def read_phantom_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n_mat = len(header) - 5
        if n_mat < 1:
            raise ValueError(f"{path}: expected at least one value column")
        specs = []
        for row in reader:
            if not row:
                continue
            vals = [float(c) for c in row]
            specs.append(EllipseSpec((vals[0], vals[1]), (vals[2], vals[3]),
                                     vals[4], tuple(vals[5:])))
    return specs


def write_spectra_csv(path, weights):
    weights = np.atleast_2d(weights)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["energy_bin_index"]
                        + [f"weight_spectrum_{i + 1}" for i in range(weights.shape[0])])
        for m in range(weights.shape[1]):
            writer.writerow([m] + [repr(float(w)) for w in weights[:, m]])


def write_materials_csv(path, coeffs):
    coeffs = np.atleast_2d(coeffs)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["energy_bin_index"]
                        + [f"b_material_{d + 1}" for d in range(coeffs.shape[0])])
        for m in range(coeffs.shape[1]):
            writer.writerow([m] + [repr(float(b)) for b in coeffs[:, m]])


def write_synthesis_csv(path, table):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        n_mat = table.synthesis_coeffs.shape[1]
        writer.writerow(["energy_kev"]
                        + [f"c_material_{d + 1}" for d in range(n_mat)])
        for e, row in zip(table.synthesis_energies, table.synthesis_coeffs):
            writer.writerow([repr(float(e))] + [repr(float(c)) for c in row])


def read_synthesis_csv(path):
    """Returns (energies (E,), coefficients (E, D))."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        rows = [[float(c) for c in row] for row in reader if row]
    data = np.array(rows)
    return data[:, 0], data[:, 1:]


# ---------------------------------------------------------------------------
# image files: raw float64 with text sidecar, and 16-bit graymap


def _sidecar_path(path):
    return str(path) + ".meta"


def write_raw_image(path, f, width, height, n_materials=1):
    """Raw little-endian float64 planes plus a one-line sidecar holding
    width, height and the number of planes."""
    f = np.asarray(f, dtype=float)
    if f.size != width * height * n_materials:
        raise ValueError(f"vector of length {f.size} does not fill "
                         f"{n_materials} planes of {width}x{height}")
    f.astype("<f8").tofile(path)
    with open(_sidecar_path(path), "w") as fh:
        fh.write(f"{width} {height} {n_materials}\n")


def read_raw_image(path):
    """Returns (vector, width, height, n_materials)."""
    with open(_sidecar_path(path)) as fh:
        width, height, n_mat = (int(tok) for tok in fh.read().split())
    data = np.fromfile(path, dtype="<f8")
    if data.size != width * height * n_mat:
        raise ValueError(f"{path}: size does not match sidecar")
    return data, width, height, n_mat


def write_pgm16(path, plane, window=(0.0, 1.0)):
    """16-bit binary portable graymap of one plane, windowed for display."""
    plane = np.asarray(plane, dtype=float)
    lo, hi = window
    scaled = np.clip((plane - lo) / (hi - lo), 0.0, 1.0)
    pixels = np.round(scaled * 65535.0).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{plane.shape[1]} {plane.shape[0]}\n65535\n".encode("ascii"))
        pixels.tofile(fh)
