"""Proximal maps used by every iteration scheme.

All three resolvents have closed forms: nonnegativity projection for
the primal constraint, an affine shrink for the quadratic fidelity
conjugate, and a box clamp for the TV dual.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["prox_nonneg", "FidelityProx", "TVDualProx", "conjugate_taylor_value"]


def prox_nonneg(x):
    """Projection onto the nonnegative orthant; independent of the step."""
    return np.maximum(np.asarray(x, dtype=float), 0.0)


@dataclass(frozen=True)
class FidelityProx:
    """Resolvent of the quadratic data-fit conjugate: (u - sigma*g)/(sigma + 1).

    Its subgradient map is strongly monotone with modulus exactly one.
    """

    data: np.ndarray
    sigma: float

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    def apply(self, u):
        u = np.asarray(u, dtype=float)
        if u.shape != self.data.shape:
            raise ValueError(f"expected shape {self.data.shape}, got {u.shape}")
        return (u - self.sigma * self.data) / (self.sigma + 1.0)


@dataclass(frozen=True)
class TVDualProx:
    """Resolvent of the box indicator: componentwise clamp to [-lam, lam]."""

    lam: float
    sigma: float

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lam must be nonnegative, got {self.lam}")

    def apply(self, v):
        return np.clip(np.asarray(v, dtype=float), -self.lam, self.lam)


def conjugate_taylor_value(op, f, fprime):
    """First-order expansion of the forward operator around ``fprime``,
    evaluated at ``f``.

    Equals the conjugate-pair value obtained by plugging the gradient at
    ``fprime`` into the biconjugate supremum, which is what the iteration
    schemes exploit; this evaluator exists for verification only.
    """
    f = np.asarray(f, dtype=float)
    fprime = np.asarray(fprime, dtype=float)
    lin = op.linearize(fprime)
    return lin.value + lin.jac_apply(f - fprime)
