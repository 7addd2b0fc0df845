import numpy as np
import pytest

from spectralpd import (GeometrySpec, GradientOperator, OperatorBundle,
                        SpectralForwardOp, SpectralModel, SystemMatrix,
                        build_parallel_projector, default_head_phantom,
                        default_model, generate_phantom)


def random_forward_op(rng, n_rays=12, n_pixels=8, n_materials=2, n_energies=4,
                      density=0.7):
    """Small random spectral operator with a strictly positive model."""
    mask = rng.uniform(size=(n_rays, n_pixels)) < density
    matrix = SystemMatrix(rng.uniform(0.1, 1.0, (n_rays, n_pixels)) * mask)
    weights = rng.uniform(0.05, 1.0, (2, n_energies))
    weights /= weights.sum(axis=1, keepdims=True)
    coeffs = rng.uniform(0.1, 0.8, (n_materials, n_energies))
    model = SpectralModel(weights, coeffs, rng.integers(0, 2, n_rays))
    return SpectralForwardOp(matrix, model)


class DeskProblem:
    """32x32 two-material scan shared by the heavy solver tests."""

    def __init__(self):
        self.geom = GeometrySpec.dect(32, 60, np.pi / 120, n_bins=45)
        self.matrix = build_parallel_projector(self.geom)
        self.model, self.table = default_model(self.geom)
        self.op = SpectralForwardOp(self.matrix, self.model)
        self.truth = generate_phantom(default_head_phantom(), 32, 2)
        self.grad = GradientOperator(32, 2)
        self.clean_data = self.op.forward(self.truth)

    def bundle(self, data=None):
        return OperatorBundle(forward=self.op, grad=self.grad,
                              data=self.clean_data if data is None else data)


@pytest.fixture(scope="session")
def desk():
    return DeskProblem()


@pytest.fixture(scope="session")
def small_problem():
    """8x8 instance small enough for the dense theory harness (474 dims)."""
    geom = GeometrySpec.dect(8, 5, np.pi / 120, n_bins=9)
    matrix = build_parallel_projector(geom)
    model, _ = default_model(geom)
    op = SpectralForwardOp(matrix, model)
    truth = generate_phantom(default_head_phantom(), 8, 2)
    grad = GradientOperator(8, 2)
    return geom, op, grad, truth
