"""Acceptance suite: one test per shipped criterion.

Each test prints a single PASS/FAIL line (run with ``pytest -v -s`` to
see them) and pins its tolerance in place.  The desk-scale problem is a
32x32 two-material scan with 60+60 views at an angular gap of pi/120;
heavy runs share the session fixture.
"""

import math
import time

import numpy as np
import pytest
import scipy.optimize

from spectralpd import (GeometrySpec, GradientOperator, OperatorBundle,
                        SchemeId, SolverConfig, SpectralForwardOp,
                        SpectralModel, SystemMatrix, build_parallel_projector,
                        conjugate_taylor_value, initial_state, metric_norm,
                        run, step, validate_step_sizes,
                        verify_remainder_contraction)
from spectralpd import assemble_metric, check_psd, simulate_data
from spectralpd.cli import main as cli_main

from conftest import random_forward_op
from test_cli import write_config, write_fixtures


def _report(number, name, ok, detail):
    print(f"\nACCEPTANCE {number:02d} {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {number} ({name}): {detail}"


def test_criterion_01_adjoint_suite():
    start = time.perf_counter()
    geom = GeometrySpec.dect(64, 45, np.pi / 360, n_bins=181)  # 90 views total
    projector = build_parallel_projector(geom)
    gradient = GradientOperator(64, 2)
    rng = np.random.default_rng(0)
    worst = 0.0
    for op in (projector, gradient):
        for _ in range(100):
            x = rng.standard_normal(op.n_cols)
            y = rng.standard_normal(op.n_rows)
            ax, aty = op.apply(x), op.apply_adjoint(y)
            scale = (np.linalg.norm(ax) * np.linalg.norm(y)
                     + np.linalg.norm(x) * np.linalg.norm(aty))
            worst = max(worst, abs(ax @ y - x @ aty) / scale)
    elapsed = time.perf_counter() - start
    _report(1, "adjoint-suite", worst <= 1e-12 and elapsed < 30.0,
            f"max rel err {worst:.2e}, {elapsed:.1f}s")


def test_criterion_02_gradient_correctness():
    rng = np.random.default_rng(1)
    op = random_forward_op(rng, n_rays=24, n_pixels=16, n_materials=2,
                           n_energies=8)
    h = 1e-6
    worst = 0.0
    for _ in range(20):
        f = rng.uniform(0, 1, op.n_image)
        d = rng.standard_normal(op.n_image)
        u = rng.standard_normal(op.n_rays)
        fd = (op.forward(f + h * d) - op.forward(f - h * d)) / (2 * h)
        jac = op.jacobian_apply(f, d)
        worst = max(worst, np.abs(fd - jac).max() / max(np.abs(fd).max(), 1e-12))
        lhs = (u @ op.forward(f + h * d) - u @ op.forward(f - h * d)) / (2 * h)
        rhs = op.grad_transpose_apply(f, u) @ d
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), 1e-12))
    _report(2, "gradient-correctness", worst <= 1e-6, f"max rel err {worst:.2e}")


def test_criterion_03_convexity_and_lipschitz():
    rng = np.random.default_rng(2)
    op = random_forward_op(rng, n_rays=24, n_pixels=16, n_materials=2,
                           n_energies=8)
    h = 1e-3
    min_second = math.inf
    for _ in range(20):
        f = rng.uniform(0, 1, op.n_image)
        p = rng.standard_normal(op.n_image)
        second = (op.forward(f + h * p) - 2 * op.forward(f)
                  + op.forward(f - h * p)) / h ** 2
        min_second = min(min_second, second.min())
    analytic = op.lipschitz_estimate("analytic")
    empirical = op.lipschitz_estimate("empirical", samples=50, seed=3)
    ok = min_second >= -1e-8 and empirical <= analytic
    _report(3, "convexity-lipschitz", ok,
            f"min 2nd diff {min_second:.2e}, empirical {empirical:.3g} "
            f"<= analytic {analytic:.3g}")


def test_criterion_04_conjugate_taylor_identity():
    # two-dimensional image (two materials, one pixel), two rays
    op = SpectralForwardOp(
        SystemMatrix(np.array([[0.7], [1.3]])),
        SpectralModel(np.array([[0.3, 0.25, 0.25, 0.2],
                                [0.1, 0.4, 0.3, 0.2]]),
                      np.array([[0.5, 0.9, 1.4, 2.0],
                                [1.8, 1.1, 0.7, 0.4]]), [0, 1]))
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(10):
        f = rng.uniform(0, 1.5, 2)
        fp = rng.uniform(0, 1.5, 2)
        ctv = conjugate_taylor_value(op, f, fp)
        grad_rows = op.linearize(fp).to_dense()
        for j in range(2):
            w_bar = grad_rows[j]
            # independent oracle: numeric maximization of <x, w> - K_j(x)
            neg = lambda x: -(x @ w_bar - op.forward(x)[j])
            best = math.inf
            for x0 in (np.zeros(2), fp, rng.uniform(-1, 2, 2)):
                res = scipy.optimize.minimize(
                    neg, x0, method="Nelder-Mead",
                    options={"xatol": 1e-12, "fatol": 1e-15, "maxiter": 40000,
                             "maxfev": 40000})
                best = min(best, res.fun)
            conjugate = -best
            worst = max(worst, abs(f @ w_bar - conjugate - ctv[j]))
    _report(4, "conjugate-taylor", worst <= 1e-6, f"max abs err {worst:.2e}")


def test_criterion_05_linear_collapse():
    rng = np.random.default_rng(5)
    op = random_forward_op(rng, n_rays=16, n_pixels=9, n_energies=1)
    reg = GradientOperator(3, 2)
    ops = OperatorBundle(forward=op, grad=reg,
                         data=rng.standard_normal(16) * 0.3)
    cfg = SolverConfig(tau=0.05, sigma_k=0.05, sigma_a=0.05, lam=0.01)
    f0 = rng.uniform(0, 1, op.n_image)
    u0 = rng.standard_normal(op.n_rays) * 0.1
    v0 = np.clip(rng.standard_normal(reg.n_rows) * 0.005, -0.01, 0.01)
    finals = {}
    for scheme in SchemeId:
        state = initial_state(ops, f0=f0, u0=u0, v0=v0)
        for _ in range(50):
            state = step(state, scheme, ops, cfg)
        finals[scheme] = state
    ref = finals[SchemeId.LINEAR_CP]
    worst = max(max(np.abs(st.f - ref.f).max(), np.abs(st.u - ref.u).max(),
                    np.abs(st.v - ref.v).max()) for st in finals.values())
    _report(5, "linear-collapse", worst <= 1e-12,
            f"worst pairwise diff {worst:.2e} over 50 iterations, 8 schemes")


def test_criterion_06_metric_psd_soundness(small_problem):
    _, op, grad, truth = small_problem
    dims = op.n_image + op.n_rays + grad.n_rows
    ops = OperatorBundle(forward=op, grad=grad, data=op.forward(truth))
    cfg = SolverConfig(tau=0.2, sigma_k=0.2, sigma_a=0.2)
    cert = validate_step_sizes(cfg, ops)
    assert cert.holds_step_product
    rng = np.random.default_rng(6)
    eigmin = math.inf
    for _ in range(20):
        f = rng.uniform(0, 1, op.n_image)
        value, _ = check_psd(assemble_metric(f, cfg, ops))
        eigmin = min(eigmin, value)
    # constructed violation: product equals four times the split bound
    bad_tau = math.sqrt(4 * cert.s * (1 - cert.kappa)) / cert.c_k
    bad_cfg = SolverConfig(tau=bad_tau, sigma_k=bad_tau, sigma_a=0.2)
    bad_eig, _ = check_psd(assemble_metric(np.zeros(op.n_image), bad_cfg, ops))
    ok = dims <= 500 and eigmin >= -1e-10 and bad_eig < 0
    _report(6, "metric-psd", ok,
            f"dims {dims}, min eig {eigmin:.2e}, violation eig {bad_eig:.2e}")


def test_criterion_07_ratio_and_remainder_bounds():
    rng = np.random.default_rng(7)
    op = random_forward_op(rng, n_rays=20, n_pixels=12)
    c_r = op.ratio_lipschitz_constant()
    ok_ratio = True
    for _ in range(100):
        f = rng.uniform(0, 1.5, op.n_image)
        f2 = rng.uniform(0, 1.5, op.n_image)
        dev = np.abs(op.ratio_matrix(f, f2) - 1.0).max()
        ok_ratio &= dev <= c_r * np.linalg.norm(f - f2)
    center = rng.uniform(0.5, 1.0, op.n_image)
    rep = verify_remainder_contraction(op, center, 0.5 / c_r, trials=100, seed=8)
    ok = ok_ratio and rep.worst_ratio <= rep.contraction + 1e-9
    _report(7, "ratio-remainder", ok,
            f"worst remainder ratio {rep.worst_ratio:.2e} "
            f"<= contraction {rep.contraction:.3f}")


def test_criterion_08_noise_free_desk_run(desk):
    ops = desk.bundle()
    cfg = SolverConfig(tau=0.2, sigma_k=0.2, sigma_a=0.2, lam=0.0,
                       max_iters=20000)
    cert = validate_step_sizes(cfg, ops)
    assert cert.holds_step_product
    state = initial_state(ops)
    truth_norm = np.linalg.norm(desk.truth)
    res = np.empty(cfg.max_iters)
    for n in range(cfg.max_iters):
        state = step(state, SchemeId.EPD_EXACT, ops, cfg)
        res[n] = np.linalg.norm(state.f - desk.truth) / truth_norm
    rd = (np.linalg.norm(ops.forward.forward(state.f) - ops.data) ** 2
          / np.linalg.norm(ops.data) ** 2)
    window = np.lib.stride_tricks.sliding_window_view(res, 501)
    worst_rise = (window.max(axis=1) - res[:window.shape[0]]).max()
    ok = rd <= 1e-6 and res[-1] <= 5e-2 and worst_rise <= 1e-3
    _report(8, "noise-free-desk-run", ok,
            f"RD {rd:.2e}, RE {res[-1]:.2e}, worst 500-iter RE rise "
            f"{worst_rise:.2e}")


def test_criterion_09_noisy_desk_plateau(desk):
    noisy = simulate_data(desk.op, desk.truth, snr_db=27.0, seed=7)
    ops = desk.bundle(data=noisy)
    cfg = SolverConfig(tau=0.2, sigma_k=0.2, sigma_a=0.2, lam=1e-6,
                       max_iters=10000, log_every=1)
    final, reports = run(SchemeId.EPD_EXACT, ops, cfg, f_truth=desk.truth)
    series = np.array([[r.re, r.rd, r.rt] for r in reports])
    tail = series[-1000:]
    spans = tail.max(axis=0) - tail.min(axis=0)
    plateau = spans < 0.01 * np.abs(series[-1])
    dual_ok = np.abs(final.v).max() <= cfg.lam
    ok = plateau.all() and dual_ok
    _report(9, "noisy-desk-plateau", ok,
            "last-1000 spans RE/RD/RT = "
            + "/".join(f"{s:.1e}" for s in spans)
            + f", dual max {np.abs(final.v).max():.2e} <= {cfg.lam}")


def test_criterion_10_metric_descent(desk):
    ops = desk.bundle()
    cfg = SolverConfig(tau=0.2, sigma_k=0.2, sigma_a=0.2, lam=0.0,
                       max_iters=20000, log_every=0)
    cert = validate_step_sizes(cfg, ops)
    assert cert.holds_step_product
    # reference: same scheme run for ten times the checked budget
    reference, _ = run(SchemeId.EPD_LINEARIZED, ops, cfg, certificate=cert)
    state = initial_state(ops)
    previous = math.inf
    worst_rise = -math.inf
    for _ in range(2000):
        state = step(state, SchemeId.EPD_LINEARIZED, ops, cfg)
        q = metric_norm(state.f - reference.f, state.u - reference.u,
                        state.v - reference.v, state.f, cfg, ops)
        worst_rise = max(worst_rise, q - previous)
        previous = q
    _report(10, "metric-descent", worst_rise <= 1e-10,
            f"worst per-iteration rise {worst_rise:.2e} over 2000 iterations")


def test_criterion_11_reproducibility(tmp_path):
    write_fixtures(tmp_path)
    cfg = write_config(tmp_path, n_side=16, n_bins=15, n_views=8,
                       max_iters=200, snr_db=23.0, seed=12)
    blobs = {}
    for label in ("first", "second"):
        out = tmp_path / label
        assert cli_main(["simulate", "--config", str(cfg), "--out", str(out)]) == 0
        assert cli_main(["reconstruct", "--config", str(cfg), "--out", str(out)]) == 0
        blobs[label] = {name: (out / name).read_bytes()
                        for name in ("metrics.csv", "recon.raw", "truth.raw",
                                     "sinogram.raw")}
    same = {name: blobs["first"][name] == blobs["second"][name]
            for name in blobs["first"]}
    _report(11, "reproducibility", all(same.values()),
            "byte-identical: " + ", ".join(sorted(same)))
