"""Convex nonlinear forward operator for dual-energy spectral CT.

Each measurement is a log-sum-exp ofattenuated basis-material line
integrals.  Everything downstream of the solver needs the same few
ingredients: stable evaluation, softmax spectrum weights, Jacobian
products, a Lipschitz bound for the gradient map, and the diagonal
ratio factors that relate gradients at two points.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .linops import SystemMatrix

__all__ = [
    "SpectralModel",
    "SpectralForwardOp",
    "GeneralizedLSEOp",
    "LinearizationState",
    "load_spectra_csv",
    "load_materials_csv",
    "load_spectral_model",
]


class SpectralModel:
    """Spectrum weights and basis-material decomposition coefficients.

    weights      (n_spectra, M) nonnegative rows summing to one
    coeffs       (D, M) strictly positive decomposition coefficients
    ray_spectrum (J,) spectrum index per ray
    """

    def __init__(self, weights, coeffs, ray_spectrum):
        weights = np.atleast_2d(np.asarray(weights, dtype=float))
        coeffs = np.atleast_2d(np.asarray(coeffs, dtype=float))
        ray_spectrum = np.asarray(ray_spectrum, dtype=np.int64)
        if weights.shape[1] != coeffs.shape[1]:
            raise ValueError(f"weights have {weights.shape[1]} energy bins, "
                             f"coeffs have {coeffs.shape[1]}")
        if np.any(weights < 0):
            raise ValueError("spectrum weights must be nonnegative")
        sums = weights.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-12):
            raise ValueError("each spectrum must sum to 1 within 1e-12; "
                             "load via load_spectral_model to renormalize")
        if np.any(coeffs <= 0):
            raise ValueError("decomposition coefficients must be strictly positive")
        if ray_spectrum.ndim != 1:
            raise ValueError("ray_spectrum must be a 1-D index array")
        if ray_spectrum.size and (ray_spectrum.min() < 0
                                  or ray_spectrum.max() >= weights.shape[0]):
            raise ValueError("ray_spectrum indexes outside the spectrum table")
        self.weights = weights
        self.coeffs = coeffs
        self.ray_spectrum = ray_spectrum

    @property
    def n_spectra(self):
        return self.weights.shape[0]

    @property
    def n_energies(self):
        return self.weights.shape[1]

    @property
    def n_materials(self):
        return self.coeffs.shape[0]

    @property
    def n_rays(self):
        return self.ray_spectrum.size


class LinearizationState:
    """Forward value and Jacobian of the operator frozen at one point.

    The Jacobian row for ray j is the ray vector replicated per material
    and scaled by -(softmax weights at the point dotted with that
    material's coefficients); only those per-ray scales are stored.
    """

    def __init__(self, op, point, value, scales):
        self.op = op
        self.point = point
        self.value = value
        self.scales = scales  # (J, D): softmax weights dotted with coeffs

    @property
    def n_cols(self):
        return self.op.n_image

    @property
    def n_rows(self):
        return self.op.n_rays

    def jac_apply(self, direction):
        """Directional derivative per ray."""
        d = np.asarray(direction, dtype=float)
        if d.shape != (self.op.n_image,):
            raise ValueError(f"expected vector of length {self.op.n_image}, got {d.shape}")
        q = self.op.matrix.apply_planes(d.reshape(self.op.n_materials, -1))
        return -(self.scales * q).sum(axis=1)

    def jac_transpose_apply(self, u):
        """Gradient-transpose product, image-shaped."""
        u = np.asarray(u, dtype=float)
        if u.shape != (self.op.n_rays,):
            raise ValueError(f"expected vector of length {self.op.n_rays}, got {u.shape}")
        parts = [-self.op.matrix.apply_adjoint(u * self.scales[:, d])
                 for d in range(self.op.n_materials)]
        return np.concatenate(parts)

    # aliases so operator_norm() can treat the Jacobian as a plain operator
    apply = jac_apply
    apply_adjoint = jac_transpose_apply

    def as_sparse(self):
        csr = self.op.matrix.tocsr()
        blocks = [sp.diags(-self.scales[:, d]) @ csr
                  for d in range(self.op.n_materials)]
        return sp.hstack(blocks, format="csr")

    def to_dense(self):
        dense = self.op.matrix.to_dense()
        return np.hstack([-self.scales[:, d:d + 1] * dense
                          for d in range(self.op.n_materials)])


class SpectralForwardOp:
    """Nonlinear convex forward operator built from a ray matrix and a
    spectral model.  All methods are pure; concurrent use is safe."""

    def __init__(self, matrix: SystemMatrix, model: SpectralModel):
        if model.n_rays != matrix.n_rows:
            raise ValueError(f"model covers {model.n_rays} rays, "
                             f"matrix has {matrix.n_rows}")
        self.matrix = matrix
        self.model = model
        self._zero_lin = None

    @property
    def n_rays(self):
        return self.matrix.n_rows

    @property
    def n_pixels(self):
        return self.matrix.n_cols

    @property
    def n_materials(self):
        return self.model.n_materials

    @property
    def n_image(self):
        return self.n_pixels * self.n_materials

    @property
    def is_linear(self):
        return self.model.n_energies == 1

    def _check_image(self, f):
        f = np.asarray(f, dtype=float)
        if f.shape != (self.n_image,):
            raise ValueError(f"expected image vector of length {self.n_image}, "
                             f"got shape {f.shape}")
        if np.isnan(f).any():
            raise ValueError("image contains NaN")
        return f

    def _shifted_terms(self, f):
        """Per-ray weights w and exp(z - max z) masked where w == 0."""
        f = self._check_image(f)
        p = self.matrix.apply_planes(f.reshape(self.n_materials, -1))  # (J, D)
        z = -(p @ self.model.coeffs)  # (J, M)
        w = self.model.weights[self.model.ray_spectrum]
        zm = np.where(w > 0, z, -np.inf)
        shift = zm.max(axis=1) if zm.size else np.zeros(0)
        e = np.exp(zm - shift[:, None]) if zm.size else zm
        return w, e, shift

    def forward(self, f):
        """Log-domain measurement per ray, max-shifted for stability."""
        w, e, shift = self._shifted_terms(f)
        if shift.size == 0:
            return np.zeros(0)
        # same reduction as linearize() so the two paths agree bitwise
        return shift + np.log((w * e).sum(axis=1))

    def softmax_weights(self, f):
        """Simplex weights per ray; rows sum to one."""
        w, e, _ = self._shifted_terms(f)
        num = w * e
        return num / num.sum(axis=1, keepdims=True)

    def linearize(self, f):
        """Value and Jacobian data at ``f`` in one pass."""
        w, e, shift = self._shifted_terms(f)
        num = w * e
        total = num.sum(axis=1)
        value = shift + np.log(total) if shift.size else np.zeros(0)
        omega = num / total[:, None] if shift.size else num
        scales = omega @ self.model.coeffs.T  # (J, D)
        return LinearizationState(self, np.asarray(f, dtype=float), value, scales)

    def linearize_zero(self):
        """Cached linearization at the zero image (constant Jacobian slot)."""
        if self._zero_lin is None:
            self._zero_lin = self.linearize(np.zeros(self.n_image))
        return self._zero_lin

    def grad_transpose_apply(self, f, u):
        return self.linearize(f).jac_transpose_apply(u)

    def jacobian_apply(self, f, direction):
        return self.linearize(f).jac_apply(direction)

    def gradient_norm_bound(self, matrix_norm=None):
        """Upper bound on the Jacobian spectral norm, valid at every image."""
        from .linops import operator_norm
        if matrix_norm is None:
            matrix_norm = operator_norm(self.matrix)
        return matrix_norm * float(np.sqrt((self.model.coeffs.max(axis=1) ** 2).sum()))

    def lipschitz_estimate(self, mode="analytic", samples=20, seed=0, step=1e-5):
        """Lipschitz constant of the per-ray gradient maps.

        analytic: closed-form bound from the coefficient spreads and the
        largest ray norm, valid everywhere.  empirical: max over sampled
        images of a power-iteration estimate of the worst per-ray second
        derivative, formed by central differences of the gradient rows.
        The analytic value always dominates the empirical one.
        """
        b = self.model.coeffs
        if mode == "analytic":
            spread = 0.0
            for d in range(self.n_materials):
                diffs = b[d][:, None] - b[d][None, :]
                spread += (np.triu(diffs, 1) ** 2).sum() / 4.0
            norms = self.matrix.row_norms()
            return float((norms.max() if norms.size else 0.0) ** 2 * spread)
        if mode != "empirical":
            raise ValueError(f"unknown mode {mode!r}")
        if samples < 1:
            raise ValueError("empirical mode needs samples >= 1")

        rng = np.random.default_rng(seed)
        norms = self.matrix.row_norms()
        best = 0.0
        for _ in range(samples):
            f = rng.uniform(0.0, 1.0, self.n_image)
            probe = rng.standard_normal(self.n_image)
            probe /= np.linalg.norm(probe)
            # difference quotient of all gradient rows along the probe
            s_plus = self.linearize(f + step * probe).scales
            s_minus = self.linearize(f - step * probe).scales
            per_ray = np.linalg.norm(s_plus - s_minus, axis=1) / (2.0 * step) * norms
            if per_ray.size == 0:
                continue
            j = int(per_ray.argmax())
            best = max(best, self._ray_curvature(f, j, probe, step))
        return best

    def _ray_row(self, j):
        csr = self.matrix.tocsr()
        return csr.getrow(j)

    def _ray_gradient(self, row, f, j):
        # gradient of one measurement, restricted to its ray support
        p = np.array([row @ f.reshape(self.n_materials, -1)[d]
                      for d in range(self.n_materials)]).ravel()
        z = -(p @ self.model.coeffs)
        w = self.model.weights[self.model.ray_spectrum[j]]
        zm = np.where(w > 0, z, -np.inf)
        e = np.exp(zm - zm.max())
        omega = w * e / (w * e).sum()
        return omega @ self.model.coeffs.T  # (D,) scales; row factor applied later

    def _ray_curvature(self, f, j, probe, step, iters=50):
        """Power iteration on the finite-difference second derivative of
        one measurement; converges to its largest curvature."""
        row = self._ray_row(j).toarray().ravel()
        rn2 = float(row @ row)
        if rn2 == 0.0:
            return 0.0
        p = probe.copy()
        lam = 0.0
        for _ in range(iters):
            nrm = np.linalg.norm(p)
            if nrm == 0.0:
                return 0.0
            p /= nrm
            gp = self._ray_gradient(row, f + step * p, j)
            gm = self._ray_gradient(row, f - step * p, j)
            dd = (gp - gm) / (2.0 * step)  # (D,) scale derivative
            # Hessian-vector product: rows are scale_d * row, so
            # H p = concat_d(dd_d * row) and the next iterate lies in the
            # span of the per-material copies of the ray vector.
            hp = np.concatenate([dd[d] * row for d in range(self.n_materials)])
            lam = float(np.linalg.norm(hp))
            p = hp
        return lam

    def ratio_matrix(self, f, f2):
        """Diagonal factors relating gradients at two nonnegative images.

        Returns a (J, D) array r with r[j, d] * grad_row(f2) == grad_row(f)
        exactly; each factor lies between min(b_d)/max(b_d) and its
        reciprocal.
        """
        f = self._check_image(f)
        f2 = self._check_image(f2)
        if (f < 0).any() or (f2 < 0).any():
            raise ValueError("ratio factors are defined on the nonnegative orthant")
        num = self.linearize(f).scales
        den = self.linearize(f2).scales
        # model invariant keeps denominators >= min coefficient; no guard
        assert (den >= self.model.coeffs.min(axis=1) * (1.0 - 1e-12)).all()
        return num / den

    def ratio_lipschitz_constant(self):
        """Closed-form constant bounding the ratio factors' deviation from
        one by the distance between the two evaluation points."""
        b = self.model.coeffs
        spread = sum(float(np.abs(b[d][:, None] - b[d][None, :]).max())
                     for d in range(self.n_materials))
        scale = float((np.linalg.norm(b, axis=1) / b.min(axis=1)).max())
        norms = self.matrix.row_norms()
        return spread * scale * float(norms.max() if norms.size else 0.0)


class GeneralizedLSEOp:
    """Log of a normalized weighted sum of exponentials of linear terms.

    Output i aggregates the contiguous term range offsets[i]:offsets[i+1];
    term weights within one output are nonnegative and sum to one.
    """

    def __init__(self, terms, weights, offsets):
        terms = sp.csr_matrix(terms, dtype=float)
        weights = np.asarray(weights, dtype=float)
        offsets = np.asarray(offsets, dtype=np.int64)
        if weights.shape != (terms.shape[0],):
            raise ValueError("one weight per term row required")
        if np.any(weights < 0):
            raise ValueError("term weights must be nonnegative")
        if offsets[0] != 0 or offsets[-1] != terms.shape[0] or np.any(np.diff(offsets) < 1):
            raise ValueError("offsets must partition the term rows into nonempty groups")
        sums = np.add.reduceat(weights, offsets[:-1])
        if np.any(np.abs(sums - 1.0) > 1e-12):
            raise ValueError("weights within each output must sum to 1")
        self.terms = terms
        self.weights = weights
        self.offsets = offsets

    @classmethod
    def mean_of_rays(cls, matrix: SystemMatrix, group_sizes):
        """Uniform weights 1/N over each group of sub-rays."""
        group_sizes = np.asarray(group_sizes, dtype=np.int64)
        weights = np.concatenate([np.full(n, 1.0 / n) for n in group_sizes])
        offsets = np.concatenate([[0], np.cumsum(group_sizes)])
        return cls(matrix.tocsr(), weights, offsets)

    @property
    def n_outputs(self):
        return self.offsets.size - 1

    @property
    def n_cols(self):
        return self.terms.shape[1]

    def forward(self, f):
        f = np.asarray(f, dtype=float)
        if f.shape != (self.n_cols,):
            raise ValueError(f"expected vector of length {self.n_cols}, got {f.shape}")
        if np.isnan(f).any():
            raise ValueError("input contains NaN")
        y = -(self.terms @ f)
        ym = np.where(self.weights > 0, y, -np.inf)
        shift = np.maximum.reduceat(ym, self.offsets[:-1])
        seg = np.repeat(np.arange(self.n_outputs), np.diff(self.offsets))
        e = self.weights * np.exp(ym - shift[seg])
        return shift + np.log(np.add.reduceat(e, self.offsets[:-1]))


def _read_indexed_csv(path, prefix):
    """CSV with an energy_bin_index column followed by ``prefix``_* columns.
    Returns the value matrix with one row per named column, bins ordered
    by index."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [row for row in reader if row]
    header = [cell.strip() for cell in header]
    if not header or header[0] != "energy_bin_index":
        raise ValueError(f"{path}: first column must be energy_bin_index")
    for name in header[1:]:
        if not name.startswith(prefix):
            raise ValueError(f"{path}: unexpected column {name!r}")
    data = np.array([[float(cell) for cell in row] for row in rows])
    if data.size == 0:
        raise ValueError(f"{path}: no data rows")
    order = np.argsort(data[:, 0])
    return data[order, 1:].T


def load_spectra_csv(path):
    """Spectrum weights (n_spectra, M), renormalized on load.  Warns if a
    column was off normalization by more than 1e-9."""
    weights = _read_indexed_csv(path, "weight_")
    sums = weights.sum(axis=1)
    if np.any(sums <= 0):
        raise ValueError(f"{path}: a spectrum has nonpositive total weight")
    if np.any(np.abs(sums - 1.0) > 1e-9):
        warnings.warn(f"{path}: spectrum weights off normalization by up to "
                      f"{np.abs(sums - 1.0).max():.3g}; renormalizing")
    return weights / sums[:, None]


def load_materials_csv(path):
    """Decomposition coefficients (D, M)."""
    coeffs = _read_indexed_csv(path, "b_")
    if np.any(coeffs <= 0):
        raise ValueError(f"{path}: decomposition coefficients must be positive")
    return coeffs


def load_spectral_model(spectra_path, materials_path, ray_spectrum):
    return SpectralModel(load_spectra_csv(spectra_path),
                         load_materials_csv(materials_path),
                         ray_spectrum)
