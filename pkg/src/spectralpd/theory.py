"""Verification harness for the solver's checkable mathematics.

Small instances only: the weighted metric matrix is materialized densely
so its positive semidefiniteness and block lower bounds can be checked
with an eigensolver.  The remainder-contraction bound, the initial-point
condition and the nonlinearity diagnostics are sampled with a seeded
generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

__all__ = [
    "NeighborhoodParams",
    "MetricMatrix",
    "DimensionCapError",
    "assemble_metric",
    "check_psd",
    "check_metric_bounds",
    "metric_norm",
    "check_initial_condition",
    "InitialConditionReport",
    "verify_remainder_contraction",
    "RemainderReport",
    "implied_nonlinearity_constants",
    "write_verification_report",
]


class DimensionCapError(ValueError):
    """Dense harness instance exceeds the configured dimension cap."""


@dataclass
class NeighborhoodParams:
    """Constants describing the convergence neighborhood.

    rho_f, rho_u, rho_v   ball radii around the reference saddle point
    kappa, s              metric split parameters in (0, 1)
    gamma_fstar           strong-monotonicity modulus of the fidelity dual
    gamma_1, lambda_1     nonlinearity-restriction constants
    lipschitz_grad        Lipschitz constant of the gradient map
    grad_norm_bound       bound on the Jacobian norm over the ball
    ratio_constant        ratio-factor deviation constant
    remainder_factor      derived: rho_f * ratio_constant / (1 - rho_f * ratio_constant)
    curvature_margin      derived: grad_norm_bound + lipschitz_grad * rho_f / 2
    """

    rho_f: float
    rho_u: float
    rho_v: float
    kappa: float
    s: float
    gamma_fstar: float = 1.0
    gamma_1: float = 0.0
    lambda_1: float = 0.0
    lipschitz_grad: float = 0.0
    grad_norm_bound: float = 0.0
    ratio_constant: float = 0.0
    remainder_factor: float | None = None
    curvature_margin: float | None = None

    def __post_init__(self):
        if min(self.rho_f, self.rho_u, self.rho_v) <= 0:
            raise ValueError("all ball radii must be positive")
        if not (0 < self.kappa < 1 and 0 < self.s < 1):
            raise ValueError("kappa and s must lie in (0, 1)")
        derived_eta = self._derived_remainder()
        if self.remainder_factor is None:
            self.remainder_factor = derived_eta
        elif not math.isclose(self.remainder_factor, derived_eta,
                              rel_tol=1e-12, abs_tol=1e-12):
            raise ValueError(f"remainder_factor {self.remainder_factor!r} is "
                             f"inconsistent with rho_f and ratio_constant "
                             f"(derived {derived_eta!r})")
        derived_margin = self.grad_norm_bound + self.lipschitz_grad * self.rho_f / 2.0
        if self.curvature_margin is None:
            self.curvature_margin = derived_margin
        elif not math.isclose(self.curvature_margin, derived_margin,
                              rel_tol=1e-12, abs_tol=1e-12):
            raise ValueError(f"curvature_margin {self.curvature_margin!r} is "
                             f"inconsistent (derived {derived_margin!r})")

    def _derived_remainder(self):
        prod = self.rho_f * self.ratio_constant
        if not math.isfinite(prod) or prod >= 1.0:
            return math.inf
        return prod / (1.0 - prod)


@dataclass
class MetricMatrix:
    """Dense symmetric step-weighted metric evaluated at one image."""

    matrix: np.ndarray
    point: np.ndarray


def _dense_operator(oplike):
    if oplike is None:
        return None
    if hasattr(oplike, "to_dense"):
        return oplike.to_dense()
    return np.asarray(oplike, dtype=float)


def _dims(ops):
    n_f = ops.forward.n_image
    n_u = ops.forward.n_rays
    n_v = ops.grad.n_rows if ops.grad is not None else 0
    return n_f, n_u, n_v


def assemble_metric(f, cfg, ops, cap=2000):
    """Dense block metric at ``f``: inverse steps on the diagonal and the
    negated Jacobian / regularizer couplings off it."""
    n_f, n_u, n_v = _dims(ops)
    total = n_f + n_u + n_v
    if total > cap:
        raise DimensionCapError(f"metric dimension {total} exceeds cap {cap}")
    f = np.asarray(f, dtype=float)
    jac = ops.forward.linearize(f).to_dense()
    m = np.zeros((total, total))
    m[:n_f, :n_f] = np.eye(n_f) / cfg.tau
    m[n_f:n_f + n_u, n_f:n_f + n_u] = np.eye(n_u) / cfg.sigma_k
    m[:n_f, n_f:n_f + n_u] = -jac.T
    m[n_f:n_f + n_u, :n_f] = -jac
    if n_v:
        a = _dense_operator(ops.grad)
        m[n_f + n_u:, n_f + n_u:] = np.eye(n_v) / cfg.sigma_a
        m[:n_f, n_f + n_u:] = -a.T
        m[n_f + n_u:, :n_f] = -a
    return MetricMatrix(matrix=m, point=f.copy())


def check_psd(metric, tol=1e-10):
    """Minimum eigenvalue and whether it clears ``-tol``."""
    sym_err = np.abs(metric.matrix - metric.matrix.T).max()
    if sym_err > 1e-14 * max(1.0, np.abs(metric.matrix).max()):
        raise ValueError(f"metric is not symmetric (max asymmetry {sym_err:g})")
    eigmin = float(scipy.linalg.eigvalsh(metric.matrix)[0])
    return eigmin, eigmin >= -tol


def check_metric_bounds(f, cfg, params, ops, tol=1e-10, cap=2000):
    """Eigen-checks of the two diagonal lower bounds of the metric.

    Returns a dict with the minimum eigenvalue and pass flag for each of:
    the primal-weighted bound itself, metric minus that bound, the
    dual-weighted bound itself, and metric minus it.
    """
    metric = assemble_metric(f, cfg, ops, cap=cap)
    n_f, n_u, n_v = _dims(ops)
    jac = ops.forward.linearize(np.asarray(f, dtype=float)).to_dense()
    a = _dense_operator(ops.grad) if n_v else np.zeros((0, n_f))
    kappa, s = params.kappa, params.s

    b1 = np.zeros_like(metric.matrix)
    b1[:n_f, :n_f] = np.eye(n_f) * (kappa / cfg.tau)
    b1[n_f:n_f + n_u, n_f:n_f + n_u] = (np.eye(n_u) / cfg.sigma_k
                                        - cfg.tau / (s * (1 - kappa)) * (jac @ jac.T))
    if n_v:
        b1[n_f + n_u:, n_f + n_u:] = (np.eye(n_v) / cfg.sigma_a
                                      - cfg.tau / ((1 - s) * (1 - kappa)) * (a @ a.T))

    b2 = np.zeros_like(metric.matrix)
    b2[:n_f, :n_f] = (np.eye(n_f) / cfg.tau
                      - cfg.sigma_k / (1 - kappa) * (jac.T @ jac)
                      - cfg.sigma_a / (1 - kappa) * (a.T @ a))
    b2[n_f:n_f + n_u, n_f:n_f + n_u] = np.eye(n_u) * (kappa / cfg.sigma_k)
    if n_v:
        b2[n_f + n_u:, n_f + n_u:] = np.eye(n_v) * (kappa / cfg.sigma_a)

    out = {}
    for name, mat in (("primal_weighted_bound", b1),
                      ("metric_minus_primal_bound", metric.matrix - b1),
                      ("dual_weighted_bound", b2),
                      ("metric_minus_dual_bound", metric.matrix - b2)):
        eigmin = float(scipy.linalg.eigvalsh(mat)[0])
        out[name] = (eigmin, eigmin >= -tol)
    return out


def metric_norm(delta_f, delta_u, delta_v, f, cfg, ops):
    """Matrix-free weighted norm of a state difference under the metric
    evaluated at ``f``.  Tiny negative squares from rounding clamp to 0."""
    delta_f = np.asarray(delta_f, dtype=float)
    delta_u = np.asarray(delta_u, dtype=float)
    delta_v = np.asarray(delta_v, dtype=float)
    lin = ops.forward.linearize(np.asarray(f, dtype=float))
    sq = (float(delta_f @ delta_f) / cfg.tau
          + float(delta_u @ delta_u) / cfg.sigma_k
          - 2.0 * float(lin.jac_apply(delta_f) @ delta_u))
    if delta_v.size and ops.grad is not None:
        sq += (float(delta_v @ delta_v) / cfg.sigma_a
               - 2.0 * float(ops.grad.apply(delta_f) @ delta_v))
    return math.sqrt(max(sq, 0.0))


@dataclass
class InitialConditionReport:
    weighted_norm: float
    bound: float
    r_f: float
    r_u: float
    r_v: float
    passed: bool


def check_initial_condition(beta0, beta_hat, params, cfg, ops):
    """Initial-point condition: the metric distance from the start to the
    reference must not exceed the smallest scaled inner radius.

    Inner radii are derived from the ball radii by saturating the
    drift-constant inequalities: the primal drift bound is taken with
    equality, which maximizes the remaining slack.
    """
    from .linops import operator_norm

    c_k = params.grad_norm_bound
    norm_a = operator_norm(ops.grad) if ops.grad is not None else 0.0
    u_hat_norm = float(np.linalg.norm(beta_hat.u))

    if math.isinf(params.rho_f):
        r_f = r_u = r_v = math.inf
    else:
        r_u = params.rho_u - cfg.sigma_k * c_k * params.rho_f
        r_v = params.rho_v - cfg.sigma_a * norm_a * params.rho_f
        drift_f = cfg.tau * ((r_u + 2.0 * u_hat_norm) * c_k + norm_a * r_v)
        r_f = params.rho_f - 2.0 * drift_f

    dist = metric_norm(beta0.f - beta_hat.f, beta0.u - beta_hat.u,
                       beta0.v - beta_hat.v, beta0.f_theta, cfg, ops)
    if min(r_f, r_u, r_v) <= 0:
        return InitialConditionReport(dist, -math.inf, r_f, r_u, r_v, False)
    bound = min(r_f * math.sqrt(params.kappa / cfg.tau),
                r_u * math.sqrt(params.kappa / cfg.sigma_k),
                r_v * math.sqrt(params.kappa / cfg.sigma_a))
    return InitialConditionReport(dist, bound, r_f, r_u, r_v, dist <= bound)


@dataclass
class RemainderReport:
    worst_ratio: float
    contraction: float
    passed: bool


def verify_remainder_contraction(op, center, rho, trials=100, seed=0):
    """Sample image pairs in a ball on the nonnegative orthant and compare
    the first-order remainder of the forward operator against the
    contraction factor implied by the ratio constant."""
    c_r = op.ratio_lipschitz_constant()
    if c_r > 0 and rho >= 1.0 / c_r:
        raise ValueError(f"rho {rho} must stay below 1/ratio_constant "
                         f"({1.0 / c_r:g})")
    contraction = rho * c_r / (1.0 - rho * c_r) if c_r > 0 else 0.0
    center = np.asarray(center, dtype=float)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        pair = []
        for _ in range(2):
            d = rng.standard_normal(center.size)
            d *= rng.uniform(0, rho) / np.linalg.norm(d)
            pair.append(np.maximum(center + d, 0.0))
        f, f2 = pair
        base = op.forward(f) - op.forward(f2)
        denom = np.linalg.norm(base)
        if denom < 1e-13:
            continue
        remainder = np.linalg.norm(base - op.jacobian_apply(f2, f - f2))
        worst = max(worst, float(remainder / denom))
    return RemainderReport(worst, contraction, bool(worst <= contraction + 1e-9))


def implied_nonlinearity_constants(op, beta_hat, params, trials=100, seed=0):
    """Diagnostic search for the nonlinearity-restriction constants.

    The constants are existential, so this cannot certify them; it
    samples points in the neighborhood and reports the two extreme pairs
    that would make every sampled inequality hold: (gamma_1 with
    lambda_1 = 0, lambda_1 with gamma_1 = 0).
    """
    rng = np.random.default_rng(seed)
    f_hat = np.asarray(beta_hat.f, dtype=float)
    u_hat = np.asarray(beta_hat.u, dtype=float)
    lin_hat = op.linearize(f_hat)
    k_hat = lin_hat.value
    need_gamma = 0.0
    need_lambda = 0.0
    for _ in range(trials):
        def ball_point(center, radius):
            d = rng.standard_normal(center.size)
            d *= rng.uniform(0, radius) / np.linalg.norm(d)
            return center + d

        f = np.maximum(ball_point(f_hat, params.rho_f), 0.0)
        x = np.maximum(ball_point(f_hat, params.rho_f), 0.0)
        u = ball_point(u_hat, params.rho_u)
        lin_f = op.linearize(f)
        lin_x = op.linearize(x)
        term1 = float((lin_x.jac_apply(f - f_hat)
                       - lin_hat.jac_apply(f - f_hat)) @ u_hat)
        remainder = k_hat - lin_f.value - lin_f.jac_apply(f_hat - f)
        term2 = float(remainder @ (u - u_hat))
        gap = term1 + term2
        if gap >= 0:
            continue
        du = float(np.linalg.norm(u - u_hat) ** 2)
        dfx = float(np.linalg.norm(f - x) ** 2)
        if du > 0:
            need_gamma = max(need_gamma, -gap / du)
        if dfx > 0:
            need_lambda = max(need_lambda, -gap / dfx)
    return need_gamma, need_lambda


def write_verification_report(path, entries):
    """Structured text report: one ``key = value`` line per checked
    quantity; flags render as PASS/FAIL."""
    with open(path, "w") as fh:
        for key, value in entries.items():
            if isinstance(value, (bool, np.bool_)):
                fh.write(f"{key} = {'PASS' if value else 'FAIL'}\n")
            else:
                fh.write(f"{key} = {float(value)!r}\n")
