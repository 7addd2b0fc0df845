"""Sparse linear operators for 2-D parallel-beam tomography.

Projector rows hold exact ray/pixel intersection lengths on a square
pixel grid.  The discrete image gradient and every adjoint are kept as
explicit sparse matrices so adjoint identities hold to rounding error.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

__all__ = [
    "GeometrySpec",
    "SystemMatrix",
    "GradientOperator",
    "build_parallel_projector",
    "operator_norm",
]

# first eight bytes of the binary matrix file, little-endian integer
_MAGIC = int.from_bytes(b"SPMATRX1", "little")

_TWO_PI = 2.0 * np.pi


@dataclass
class GeometrySpec:
    """Scan description for a 2-D parallel-beam acquisition.

    The image covers ``[-domain_extent, domain_extent]^2`` with
    ``n_side`` pixels per side, indexed row-major from the top-left
    corner.  The detector covers ``[-detector_half_width,
    detector_half_width]`` split into ``n_bins`` equal-width bins; rays
    pass through the bin centers.  Rays are enumerated view-major (all
    low-spectrum views first, then all high-spectrum views), bin-minor.
    """

    n_side: int
    n_bins: int
    view_angles_low: np.ndarray = field(default_factory=lambda: np.empty(0))
    view_angles_high: np.ndarray = field(default_factory=lambda: np.empty(0))
    domain_extent: float = 5.0
    detector_half_width: float = 7.05
    angular_gap: float = 0.0

    def __post_init__(self):
        self.view_angles_low = np.atleast_1d(np.asarray(self.view_angles_low, dtype=float))
        self.view_angles_high = np.atleast_1d(np.asarray(self.view_angles_high, dtype=float))
        if self.n_side < 1:
            raise ValueError(f"n_side must be >= 1, got {self.n_side}")
        if self.n_bins < 1:
            raise ValueError(f"n_bins must be >= 1, got {self.n_bins}")
        if self.domain_extent <= 0 or self.detector_half_width <= 0:
            raise ValueError("domain_extent and detector_half_width must be positive")
        for name, angles in (("view_angles_low", self.view_angles_low),
                             ("view_angles_high", self.view_angles_high)):
            if angles.size and (angles.min() < 0.0 or angles.max() >= _TWO_PI):
                raise ValueError(f"{name} must lie in [0, 2*pi)")

    @classmethod
    def dect(cls, n_side, n_views, angular_gap, n_bins=181,
             domain_extent=5.0, detector_half_width=7.05):
        """Two-spectrum scan: ``n_views`` uniform over [0, pi) per spectrum,
        high-spectrum views shifted by ``angular_gap``."""
        low = np.linspace(0.0, np.pi, n_views, endpoint=False)
        high = np.mod(low + angular_gap, _TWO_PI)
        return cls(n_side=n_side, n_bins=n_bins, view_angles_low=low,
                   view_angles_high=high, domain_extent=domain_extent,
                   detector_half_width=detector_half_width, angular_gap=angular_gap)

    @property
    def n_pixels(self):
        return self.n_side * self.n_side

    @property
    def pixel_size(self):
        return 2.0 * self.domain_extent / self.n_side

    @property
    def view_angles(self):
        """All view angles, low list first."""
        return np.concatenate([self.view_angles_low, self.view_angles_high])

    @property
    def n_views(self):
        return self.view_angles_low.size + self.view_angles_high.size

    @property
    def n_rays(self):
        return self.n_views * self.n_bins

    @property
    def bin_centers(self):
        w = 2.0 * self.detector_half_width / self.n_bins
        return -self.detector_half_width + w * (np.arange(self.n_bins) + 0.5)

    def ray_spectra(self):
        """Per-ray spectrum index: 0 for low-spectrum rays, 1 for high."""
        out = np.zeros(self.n_rays, dtype=np.int64)
        out[self.view_angles_low.size * self.n_bins:] = 1
        return out


class SystemMatrix:
    """Sparse ray matrix with an exact transpose for the adjoint."""

    def __init__(self, matrix):
        m = sp.csr_matrix(matrix, dtype=np.float64)
        m.sum_duplicates()
        self._csr = m
        self._csr_t = None

    @classmethod
    def from_triplets(cls, rows, cols, weights, shape):
        coo = sp.coo_matrix((weights, (rows, cols)), shape=shape, dtype=np.float64)
        return cls(coo)

    @property
    def n_rows(self):
        return self._csr.shape[0]

    @property
    def n_cols(self):
        return self._csr.shape[1]

    @property
    def nnz(self):
        return self._csr.nnz

    def _transpose(self):
        if self._csr_t is None:
            self._csr_t = self._csr.T.tocsr()
        return self._csr_t

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n_cols,):
            raise ValueError(f"expected vector of length {self.n_cols}, got shape {x.shape}")
        return self._csr @ x

    def apply_adjoint(self, y):
        y = np.asarray(y, dtype=float)
        if y.shape != (self.n_rows,):
            raise ValueError(f"expected vector of length {self.n_rows}, got shape {y.shape}")
        return self._transpose() @ y

    def apply_planes(self, planes):
        """Apply to several images at once: (D, n_cols) -> (n_rows, D)."""
        planes = np.asarray(planes, dtype=float)
        if planes.ndim != 2 or planes.shape[1] != self.n_cols:
            raise ValueError(f"expected (D, {self.n_cols}) array, got shape {planes.shape}")
        return self._csr @ planes.T

    def row_norms(self):
        sq = self._csr.multiply(self._csr)
        return np.sqrt(np.asarray(sq.sum(axis=1)).ravel())

    def to_dense(self):
        return self._csr.toarray()

    def tocsr(self):
        return self._csr

    def save(self, path):
        """Binary triplet file: int64 LE header (magic, n_rows, n_cols, nnz),
        then int64 row indices, int64 column indices, float64 weights."""
        coo = self._csr.tocoo()
        with open(path, "wb") as fh:
            np.array([_MAGIC, self.n_rows, self.n_cols, coo.nnz], dtype="<i8").tofile(fh)
            coo.row.astype("<i8").tofile(fh)
            coo.col.astype("<i8").tofile(fh)
            coo.data.astype("<f8").tofile(fh)

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            header = np.fromfile(fh, dtype="<i8", count=4)
            if header.size != 4 or header[0] != _MAGIC:
                raise ValueError(f"{path}: not a system matrix file")
            n_rows, n_cols, nnz = (int(v) for v in header[1:])
            rows = np.fromfile(fh, dtype="<i8", count=nnz)
            cols = np.fromfile(fh, dtype="<i8", count=nnz)
            weights = np.fromfile(fh, dtype="<f8", count=nnz)
        if rows.size != nnz or cols.size != nnz or weights.size != nnz:
            raise ValueError(f"{path}: truncated system matrix file")
        return cls.from_triplets(rows, cols, weights, (n_rows, n_cols))


def build_parallel_projector(geom):
    """Exact-intersection parallel-beam projector for ``geom``.

    One row per (view, bin) pair, view-major; weights are the chord
    lengths of the ray inside each pixel, so all weights are nonnegative
    and every row sum is at most the domain diameter.
    """
    n = geom.n_side
    extent = geom.domain_extent
    h = geom.pixel_size
    grid = -extent + h * np.arange(n + 1)  # shared x and y grid lines
    t = geom.bin_centers
    nb = geom.n_bins
    angles = geom.view_angles

    rows, cols, vals = [], [], []
    tiny = 1e-12
    for iv, phi in enumerate(angles):
        dx, dy = np.cos(phi), np.sin(phi)
        ox, oy = -np.sin(phi) * t, np.cos(phi) * t

        # entry/exit parameters against the bounding box (slab test)
        smin = np.full(nb, -np.inf)
        smax = np.full(nb, np.inf)
        cross = []
        for d, o in ((dx, ox), (dy, oy)):
            if abs(d) > tiny:
                s1 = (-extent - o) / d
                s2 = (extent - o) / d
                smin = np.maximum(smin, np.minimum(s1, s2))
                smax = np.minimum(smax, np.maximum(s1, s2))
                cross.append((grid[None, :] - o[:, None]) / d)
            else:
                miss = np.abs(o) > extent
                smin[miss], smax[miss] = 1.0, 0.0  # empty interval
        smax = np.maximum(smax, smin)  # misses collapse to zero length

        cross.append(smin[:, None])
        cross.append(smax[:, None])
        s = np.clip(np.concatenate(cross, axis=1), smin[:, None], smax[:, None])
        s.sort(axis=1)
        dl = np.diff(s, axis=1)
        mids = s[:, :-1] + 0.5 * dl
        mx = ox[:, None] + mids * dx
        my = oy[:, None] + mids * dy
        ci = np.floor((mx + extent) / h).astype(np.int64)
        ri = np.floor((extent - my) / h).astype(np.int64)
        keep = (dl > tiny * h) & (ci >= 0) & (ci < n) & (ri >= 0) & (ri < n)
        ray = iv * nb + np.broadcast_to(np.arange(nb)[:, None], dl.shape)
        rows.append(ray[keep])
        cols.append((ri * n + ci)[keep])
        vals.append(dl[keep])

    if rows:
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
    return SystemMatrix.from_triplets(rows, cols, vals, (geom.n_rays, geom.n_pixels))


def _forward_difference(n):
    # replicate (Neumann) boundary: last difference is zero
    main = -np.ones(n)
    main[-1] = 0.0
    return sp.diags([main, np.ones(n - 1)], [0, 1], shape=(n, n), format="csr")


@dataclass
class GradientOperator:
    """Stacked forward-difference gradient for D material images.

    Output layout per material: horizontal differences (N values) then
    vertical differences (N values); materials concatenated in order.
    Replicate boundary keeps constant images in the kernel and makes the
    adjoint the negative discrete divergence.
    """

    n_side: int
    n_materials: int = 1
    boundary: str = "replicate"

    def __post_init__(self):
        if self.boundary != "replicate":
            raise ValueError(f"unsupported boundary rule {self.boundary!r}")
        if self.n_side < 1 or self.n_materials < 1:
            raise ValueError("n_side and n_materials must be >= 1")
        n = self.n_side
        if n == 1:
            d1 = sp.csr_matrix((1, 1))
        else:
            d1 = _forward_difference(n)
        eye = sp.identity(n, format="csr")
        horiz = sp.kron(eye, d1, format="csr")  # differences along columns
        vert = sp.kron(d1, eye, format="csr")   # differences along rows
        per_material = sp.vstack([horiz, vert], format="csr")
        self._mat = sp.block_diag([per_material] * self.n_materials, format="csr")
        self._mat_t = self._mat.T.tocsr()

    @property
    def n_rows(self):
        return self._mat.shape[0]

    @property
    def n_cols(self):
        return self._mat.shape[1]

    def apply(self, f):
        f = np.asarray(f, dtype=float)
        if f.shape != (self.n_cols,):
            raise ValueError(f"expected vector of length {self.n_cols}, got shape {f.shape}")
        return self._mat @ f

    def apply_adjoint(self, p):
        p = np.asarray(p, dtype=float)
        if p.shape != (self.n_rows,):
            raise ValueError(f"expected vector of length {self.n_rows}, got shape {p.shape}")
        return self._mat_t @ p

    def to_dense(self):
        return self._mat.toarray()

    def tocsr(self):
        return self._mat


def _as_matvec_pair(op):
    if isinstance(op, np.ndarray):
        return (lambda x: op @ x), (lambda y: op.T @ y), op.shape[1]
    if sp.issparse(op):
        csr = op.tocsr()
        csr_t = csr.T.tocsr()
        return (lambda x: csr @ x), (lambda y: csr_t @ y), csr.shape[1]
    if hasattr(op, "apply") and hasattr(op, "apply_adjoint") and hasattr(op, "n_cols"):
        return op.apply, op.apply_adjoint, op.n_cols
    raise TypeError(f"cannot interpret {type(op).__name__} as a linear operator")


def operator_norm(op, iters=200, tol=1e-8, seed=0):
    """Largest singular value of ``op`` by power iteration on ``A^T A``.

    Deterministic for a fixed seed.  If the estimate has not stabilised
    to ``tol`` relative accuracy within ``iters`` iterations, the best
    estimate is returned with a RuntimeWarning.
    """
    matvec, rmatvec, n = _as_matvec_pair(op)
    if n == 0:
        return 0.0
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    x /= np.linalg.norm(x)
    sigma = 0.0
    for _ in range(max(iters, 1)):
        z = rmatvec(matvec(x))
        nz = np.linalg.norm(z)
        if nz == 0.0:
            return 0.0
        new = np.sqrt(nz)
        converged = abs(new - sigma) <= tol * max(new, 1e-300)
        sigma = new
        x = z / nz
        if converged:
            return sigma
    warnings.warn(f"operator norm estimate did not stabilise to {tol:g} "
                  f"within {iters} iterations; returning best estimate",
                  RuntimeWarning)
    return sigma
