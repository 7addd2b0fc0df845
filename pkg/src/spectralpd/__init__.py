"""Primal-dual reconstruction toolkit for spectral CT.

The forward model is a convex log-sum-exp of basis-material line
integrals; eight primal-dual iteration schemes solve the TV-regularized
nonnegative reconstruction problem, and a dense verification harness
checks the step-size certificates and metric bounds that back them.
"""

from .linops import (GeometrySpec, GradientOperator, SystemMatrix,
                     build_parallel_projector, operator_norm)
from .metrics import MetricReport, quality_metrics, relative_metrics
from .phantom import (EllipseSpec, MaterialTable, default_head_phantom,
                      default_material_table, default_model, default_spectra,
                      generate_phantom, material_planes, simulate_data,
                      synthesize_energy_image)
from .prox import FidelityProx, TVDualProx, conjugate_taylor_value, prox_nonneg
from .solver import (IterationReport, OperatorBundle, SchemeId, SolverConfig,
                     SolverDivergenceError, SolverState, StepSizeCertificate,
                     StepSizeError, initial_state, optimality_residual, run,
                     step, suggest_certified_steps, validate_step_sizes)
from .spectral import (GeneralizedLSEOp, LinearizationState, SpectralForwardOp,
                       SpectralModel, load_spectral_model)
from .theory import (NeighborhoodParams, assemble_metric, check_initial_condition,
                     check_metric_bounds, check_psd, implied_nonlinearity_constants,
                     metric_norm, verify_remainder_contraction)

__version__ = "0.1.0"
