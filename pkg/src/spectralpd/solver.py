"""Primal-dual iteration engine.

Eight schemes share one update skeleton: a projected primal step using
the operator Jacobian frozen at a scheme-specific point, an
extrapolation step, a fidelity-conjugate dual step whose argument is
either an exact forward evaluation or a first-order expansion, and a
box-projected TV dual step.  With a linear forward operator every
scheme collapses to the classical convex primal-dual iteration.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import metrics as _metrics
from .linops import operator_norm
from .prox import FidelityProx, TVDualProx, prox_nonneg

__all__ = [
    "SchemeId",
    "SolverConfig",
    "SolverState",
    "OperatorBundle",
    "StepSizeCertificate",
    "IterationReport",
    "SolverDivergenceError",
    "StepSizeError",
    "initial_state",
    "step",
    "run",
    "optimality_residual",
    "validate_step_sizes",
    "suggest_certified_steps",
    "write_reports_csv",
]


class SolverDivergenceError(RuntimeError):
    """A non-finite value appeared in an iterate."""


class StepSizeError(RuntimeError):
    """Step sizes fail the certificate and the config does not force them."""


class SchemeId(str, Enum):
    EPD_EXACT = "epd-exact"
    EPD_LINEARIZED = "epd-linearized"
    EXACT_NL_PDHGM = "exact-nl-pdhgm"
    LINEARIZED_NL_PDHGM = "linearized-nl-pdhgm"
    VARIANT_V = "variant-v"
    VARIANT_VI = "variant-vi"
    NCPD = "ncpd"
    LINEAR_CP = "linear-cp"


# (primal linearization point, dual-step argument) per scheme.
# Points: "theta" extrapolated iterate, "f" plain iterate, "zero" origin.
# Dual arguments: "exact" evaluates the operator at the new extrapolated
# point; "expand-new"/"expand-old" expand around the new / previous
# iterate; "expand-zero" mixes the previous value with the constant
# origin Jacobian.
_SCHEME_TABLE = {
    SchemeId.EPD_EXACT: ("theta", "exact"),
    SchemeId.EPD_LINEARIZED: ("f", "expand-new"),
    SchemeId.EXACT_NL_PDHGM: ("f", "exact"),
    SchemeId.LINEARIZED_NL_PDHGM: ("f", "expand-old"),
    SchemeId.VARIANT_V: ("theta", "expand-new"),
    SchemeId.VARIANT_VI: ("theta", "expand-old"),
    SchemeId.NCPD: ("zero", "expand-zero"),
    SchemeId.LINEAR_CP: ("f", "exact"),
}


@dataclass
class SolverConfig:
    tau: float
    sigma_k: float
    sigma_a: float
    theta: float = 1.0
    lam: float = 0.0
    max_iters: int = 0
    log_every: int = 100
    seed: int = 0
    termination: float | None = None
    force_steps: bool = False

    def __post_init__(self):
        if min(self.tau, self.sigma_k, self.sigma_a) <= 0:
            raise ValueError("step sizes tau, sigma_k, sigma_a must be positive")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError(f"theta must lie in [0, 1], got {self.theta}")
        if self.lam < 0:
            raise ValueError(f"lam must be nonnegative, got {self.lam}")
        if self.max_iters < 0:
            raise ValueError("max_iters must be nonnegative")


@dataclass
class OperatorBundle:
    """Everything a scheme touches: the nonlinear forward operator, the
    sparse regularization operator (may be None), and the measured data."""

    forward: object
    grad: object | None
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.shape != (self.forward.n_rays,):
            raise ValueError(f"data must have one entry per ray "
                             f"({self.forward.n_rays}), got {self.data.shape}")


@dataclass
class SolverState:
    """Iterate triple plus extrapolation history.  ``f_theta`` always
    equals ``f + theta * (f - f_prev)`` after a step."""

    f: np.ndarray
    f_prev: np.ndarray
    f_theta: np.ndarray
    u: np.ndarray
    v: np.ndarray
    iter: int = 0
    _cache: dict = field(default_factory=dict, repr=False)


def initial_state(ops, f0=None, u0=None, v0=None):
    """Zero images and zero duals unless warm-start vectors are given."""
    n_image = ops.forward.n_image
    n_dual_v = ops.grad.n_rows if ops.grad is not None else 0
    f = np.zeros(n_image) if f0 is None else np.asarray(f0, dtype=float).copy()
    u = np.zeros(ops.forward.n_rays) if u0 is None else np.asarray(u0, dtype=float).copy()
    v = np.zeros(n_dual_v) if v0 is None else np.asarray(v0, dtype=float).copy()
    if f.shape != (n_image,):
        raise ValueError(f"f0 must have length {n_image}")
    return SolverState(f=f, f_prev=f, f_theta=f, u=u, v=v, iter=0)


def _lin_at(op, point, cache):
    hit = cache.get(id(point))
    if hit is not None and hit.point is point:
        return hit
    lin = op.linearize(point)
    cache[id(point)] = lin
    return lin


def step(state, scheme, ops, cfg):
    """One iteration of the selected scheme; returns a new state."""
    scheme = SchemeId(scheme)
    op = ops.forward
    if scheme is SchemeId.LINEAR_CP and not op.is_linear:
        raise ValueError("linear-cp requires a linear forward operator "
                         "(single energy bin)")
    point_kind, dual_kind = _SCHEME_TABLE[scheme]

    f0, ft0, u0, v0 = state.f, state.f_theta, state.u, state.v
    cache = state._cache
    use_tv = cfg.lam > 0 and ops.grad is not None

    if point_kind == "theta":
        lin_f = _lin_at(op, ft0, cache)
    elif point_kind == "f":
        lin_f = _lin_at(op, f0, cache)
    else:
        lin_f = op.linearize_zero()

    descent = lin_f.jac_transpose_apply(u0)
    if use_tv:
        descent = descent + ops.grad.apply_adjoint(v0)
    f1 = prox_nonneg(f0 - cfg.tau * descent)
    ft1 = f1 + cfg.theta * (f1 - f0)

    if dual_kind == "exact":
        dual_arg = _lin_at(op, ft1, cache).value
    elif dual_kind == "expand-new":
        lin1 = _lin_at(op, f1, cache)
        dual_arg = lin1.value + lin1.jac_apply(ft1 - f1)
    elif dual_kind == "expand-old":
        lin0 = _lin_at(op, f0, cache)
        dual_arg = lin0.value + lin0.jac_apply(ft1 - f0)
    else:  # expand-zero
        dual_arg = op.forward(f0) + lin_f.jac_apply(ft1 - f0)

    u1 = FidelityProx(ops.data, cfg.sigma_k).apply(u0 + cfg.sigma_k * dual_arg)
    if use_tv:
        v1 = TVDualProx(cfg.lam, cfg.sigma_a).apply(v0 + cfg.sigma_a * ops.grad.apply(ft1))
    else:
        v1 = v0

    new_cache = {id(arr): lin for arr, lin in
                 ((entry.point, entry) for entry in cache.values())
                 if arr is f1 or arr is ft1}
    return SolverState(f=f1, f_prev=f0, f_theta=ft1, u=u1, v=v1,
                       iter=state.iter + 1, _cache=new_cache)


def _first_nonfinite(state):
    for name, arr in (("f", state.f), ("u", state.u), ("v", state.v)):
        if not np.isfinite(arr).all():
            return name
    return None


@dataclass
class IterationReport:
    iter: int
    re: float
    rd: float
    rt: float
    residual: float
    wall_ms: float


def write_reports_csv(reports, fh):
    writer = csv.writer(fh)
    writer.writerow(["iter", "RE", "RD", "RT", "residual", "wall_ms"])
    for r in reports:
        writer.writerow([r.iter] + [repr(float(v)) for v in
                                    (r.re, r.rd, r.rt, r.residual, r.wall_ms)])


def optimality_residual(state, ops, cfg):
    """Prox fixed-point residual; zero exactly at a saddle point."""
    op = ops.forward
    lin = op.linearize(state.f)
    descent = lin.jac_transpose_apply(state.u)
    if ops.grad is not None:
        descent = descent + ops.grad.apply_adjoint(state.v)
    r_f = np.linalg.norm(state.f - prox_nonneg(state.f - cfg.tau * descent))
    u_prox = FidelityProx(ops.data, cfg.sigma_k)
    r_u = np.linalg.norm(state.u - u_prox.apply(state.u + cfg.sigma_k * lin.value))
    if ops.grad is not None:
        v_prox = TVDualProx(cfg.lam, cfg.sigma_a)
        r_v = np.linalg.norm(
            state.v - v_prox.apply(state.v + cfg.sigma_a * ops.grad.apply(state.f)))
    else:
        r_v = 0.0
    return float(r_f + r_u + r_v)


def run(scheme, ops, cfg, init=None, observer=None, certificate=None,
        f_truth=None):
    """Iterate a scheme for ``cfg.max_iters`` steps (or until the optional
    residual threshold), reporting metrics every ``log_every`` iterations.

    Returns the final state and the list of iteration reports.  Aborts
    with a diagnostic if any iterate stops being finite.
    """
    scheme = SchemeId(scheme)
    if certificate is None:
        certificate = validate_step_sizes(cfg, ops)
    if not certificate.holds_step_product and not cfg.force_steps:
        raise StepSizeError(
            "step sizes fail the product conditions "
            f"(margins {certificate.margins}); set force_steps to run anyway")
    state = initial_state(ops) if init is None else init

    tv_truth = None
    if f_truth is not None and ops.grad is not None:
        tv_truth = np.abs(ops.grad.apply(f_truth)).sum()

    reports = []
    start = time.perf_counter()
    for n in range(1, cfg.max_iters + 1):
        state = step(state, scheme, ops, cfg)
        bad = _first_nonfinite(state)
        if bad is not None:
            raise SolverDivergenceError(
                f"non-finite value in {bad} at iteration {n}")
        if cfg.log_every and (n % cfg.log_every == 0 or n == cfg.max_iters):
            if f_truth is not None:
                re, rd, rt = _metrics.relative_metrics(
                    state.f, f_truth, ops.data, ops.forward, ops.grad)
            else:
                rd = (np.linalg.norm(ops.forward.forward(state.f) - ops.data) ** 2
                      / max(float(ops.data @ ops.data), 1e-300))
                re, rt = math.nan, math.nan
            rep = IterationReport(
                iter=n, re=re, rd=rd, rt=rt,
                residual=optimality_residual(state, ops, cfg),
                wall_ms=(time.perf_counter() - start) * 1e3)
            reports.append(rep)
            if observer is not None:
                observer(rep, state)
            if cfg.termination is not None and rep.residual <= cfg.termination:
                break
    return state, reports


@dataclass
class StepSizeCertificate:
    """Measured constants and which step-size inequalities hold.

    holds_step_product     both products tau*sigma*norm^2 stay below their
                           split of (1 - kappa)
    holds_descent_exact    tau small enough for the exact scheme's descent
    holds_descent_linear   tau small enough for the linearized scheme's descent
    holds_vanishing_dual   the strengthened conditions used when the
                           optimal fidelity dual vanishes
    Flags that need neighborhood constants are None until params are given.
    """

    c_k: float
    norm_a: float
    kappa: float
    s: float
    holds_step_product: bool
    holds_descent_exact: bool | None
    holds_descent_linear: bool | None
    holds_vanishing_dual: bool | None
    margins: dict
    params: object | None = None

    def summary_lines(self):
        lines = [f"c_k = {self.c_k!r}", f"norm_a = {self.norm_a!r}",
                 f"kappa = {self.kappa!r}", f"s = {self.s!r}"]
        for key, val in self.margins.items():
            lines.append(f"{key} = {val!r}")
        for name in ("holds_step_product", "holds_descent_exact",
                     "holds_descent_linear", "holds_vanishing_dual"):
            lines.append(f"{name} = {getattr(self, name)}")
        return lines


def _grid_kappa_s(tau, sigma_k, sigma_a, c_k, norm_a):
    """Pick (kappa, s) on a coarse grid maximizing the smaller slack of
    the two product inequalities."""
    best = (0.5, 0.5, -math.inf)
    grid = np.arange(0.1, 0.95, 0.1)
    for kappa in grid:
        for s in grid:
            slack_k = s * (1 - kappa) - tau * sigma_k * c_k ** 2
            slack_a = (1 - s) * (1 - kappa) - tau * sigma_a * norm_a ** 2
            low = min(slack_k, slack_a)
            if low > best[2]:
                best = (float(kappa), float(s), low)
    return best[0], best[1]


def validate_step_sizes(cfg, ops, params=None):
    """Certificate for the current steps.  Computes the operator constants,
    picks (kappa, s) by grid search unless params supply them, and flags
    every inequality; failures are reported, never raised."""
    # longer power iterations than the library default: certificate
    # constants should be solid to many digits
    norm_a = (operator_norm(ops.grad, iters=2000, tol=1e-9)
              if ops.grad is not None else 0.0)
    matrix_norm = operator_norm(ops.forward.matrix, iters=2000, tol=1e-9)
    c_k = ops.forward.gradient_norm_bound(matrix_norm)
    if params is not None:
        kappa, s = params.kappa, params.s
    else:
        kappa, s = _grid_kappa_s(cfg.tau, cfg.sigma_k, cfg.sigma_a, c_k, norm_a)

    slack_k = float(s * (1 - kappa) - cfg.tau * cfg.sigma_k * c_k ** 2)
    slack_a = float((1 - s) * (1 - kappa) - cfg.tau * cfg.sigma_a * norm_a ** 2)
    margins = {"step_product_forward": slack_k, "step_product_regularizer": slack_a}
    holds_product = bool(slack_k > 0 and slack_a > 0)

    holds_exact = holds_linear = holds_vanishing = None
    if params is not None:
        l_rho_u = params.lipschitz_grad * params.rho_u
        denom_exact = 2.0 * (params.curvature_margin + 4.0 * params.lambda_1
                             + 3.0 * l_rho_u)
        bound_exact = params.kappa / denom_exact if denom_exact > 0 else math.inf
        margins["tau_descent_exact"] = float(bound_exact - cfg.tau)
        holds_exact = bool(cfg.tau < bound_exact)

        denom_linear = 2.0 * (params.lambda_1 + l_rho_u)
        bound_linear = params.kappa / denom_linear if denom_linear > 0 else math.inf
        margins["tau_descent_linearized"] = float(bound_linear - cfg.tau)
        holds_linear = bool(cfg.tau < bound_linear)

        eta = params.remainder_factor
        slack_v1 = (1 - eta) * s * (1 - kappa) - cfg.tau * cfg.sigma_k * c_k ** 2
        bound_v2 = kappa / (6.0 * l_rho_u) if l_rho_u > 0 else math.inf
        sigma_floor = eta / (2.0 * (1 - eta)) if eta < 1 else math.inf
        margins["vanishing_dual_product"] = float(slack_v1)
        margins["vanishing_dual_tau"] = float(bound_v2 - cfg.tau)
        margins["vanishing_dual_sigma"] = float(cfg.sigma_k - sigma_floor)
        holds_vanishing = bool(slack_v1 > 0 and cfg.tau < bound_v2
                               and cfg.sigma_k > sigma_floor)

    return StepSizeCertificate(
        c_k=float(c_k), norm_a=float(norm_a), kappa=float(kappa), s=float(s),
        holds_step_product=holds_product, holds_descent_exact=holds_exact,
        holds_descent_linear=holds_linear, holds_vanishing_dual=holds_vanishing,
        margins=margins, params=params)


def suggest_certified_steps(ops, kappa=0.5, s=0.5, margin=0.9):
    """Equal tau and sigma_k passing the product conditions with the given
    split, plus a matching sigma_a.  Returns (tau, sigma_k, sigma_a)."""
    c_k = ops.forward.gradient_norm_bound()
    norm_a = operator_norm(ops.grad) if ops.grad is not None else 0.0
    tau = sigma_k = margin * math.sqrt(s * (1 - kappa)) / c_k
    if norm_a > 0:
        sigma_a = margin ** 2 * (1 - s) * (1 - kappa) / (tau * norm_a ** 2)
    else:
        sigma_a = sigma_k
    return tau, sigma_k, sigma_a
