"""Acceptance gate: one test per criterion, summarised at the end of the run."""

import math
import time

import numpy as np
import pytest

from fbsde_newton import (
    DerivativeBounds,
    RegressionConfig,
    TripleProcess,
    case_noise,
    catalog,
    estimate_s2_norm,
    evaluate_constants,
    evaluate_residual,
    gateaux_derivative,
    get_case,
    initial_iterate,
    linearize,
    oracle_solution,
    remainder,
    remainder_decomposition,
    run_forward_newton,
    run_newton,
    run_picard,
    simulate_euler,
    solve_linear_bsde,
)
from fbsde_newton.cli import cmd_solve
from fbsde_newton.forward import pre_floor_ratios_decreasing
from conftest import analytic_setup

EPS = 0.5
SLACK = 0.1


def _fmt(values):
    return "[" + ", ".join(f"{v:.4g}" for v in values) + "]"


@pytest.mark.criterion(1, "P-NL Newton pre-floor ratios <= 0.6, runtime <= 60 s")
def test_geometric_rate_on_the_nonlinear_case(detail):
    case = get_case("P-NL")
    start = time.perf_counter()
    grid = case.problem.grid(100)
    noise = case_noise(case, 42, 100, 5000)
    oracle = oracle_solution(case, grid, noise, cache=False)
    u0 = initial_iterate(case.problem, grid, noise)
    rec = run_newton(case.problem, u0, 5, grid, noise, case.regression, oracle, eps=EPS, strict=False)
    elapsed = time.perf_counter() - start
    ratios = rec.pre_floor_ratios()
    detail(f"errors {_fmt(rec.combined)}, floor {rec.floor:.4g}, pre-floor ratios {_fmt(ratios)}, "
           f"{elapsed:.1f} s")
    assert len(ratios) >= 1
    assert all(r <= EPS + SLACK for r in ratios)
    assert rec.first_violation(EPS, SLACK) is None
    assert elapsed <= 60.0


@pytest.mark.criterion(2, "P-AFF and P-AFFY: iterate 1 and later within 10x floor, runtime <= 20 s")
def test_affine_problems_are_solved_in_one_step(detail):
    start = time.perf_counter()
    parts, ok = [], True
    for case_id in ("P-AFF", "P-AFFY"):
        case, grid, noise, oracle = analytic_setup(case_id)
        u0 = initial_iterate(case.problem, grid, noise)
        rec = run_newton(case.problem, u0, 3, grid, noise, case.regression, oracle, strict=False)
        ok &= rec.combined[0] > 10 * rec.floor
        ok &= all(e <= 10 * rec.floor for e in rec.combined[1:])
        parts.append(f"{case_id} errors {_fmt(rec.combined)} floor {rec.floor:.4g}")
    elapsed = time.perf_counter() - start
    detail("; ".join(parts) + f"; {elapsed:.1f} s")
    assert ok
    assert elapsed <= 20.0


@pytest.mark.criterion(3, "Newton started at the reference stays within 10x floor")
def test_reference_is_a_fixed_point_of_the_iteration(detail, nl_setup):
    parts, ok = [], True
    setups = [analytic_setup("P-AFF"), analytic_setup("P-AFFY"), nl_setup]
    for case, grid, noise, oracle in setups:
        rec = run_newton(case.problem, oracle, 3, grid, noise, case.regression, oracle, strict=False)
        worst = max(rec.combined[1:])
        ok &= rec.combined[0] == 0.0 and worst <= 10 * rec.floor
        parts.append(f"{case.id} max {worst:.4g} floor {rec.floor:.4g}")
    detail("; ".join(parts))
    assert ok


@pytest.mark.criterion(4, "P-NL finite-difference error decays by a factor in [3, 30] per decade")
def test_directional_derivative_matches_finite_differences(detail, nl_setup):
    case, grid, noise, _ = nl_setup
    p = case.problem
    X = simulate_euler(p, grid, noise)
    u = TripleProcess(grid, X, 0.5 * np.tanh(X), 0.3 + 0.1 * X[..., None])
    rng = np.random.default_rng(1)
    hX = rng.standard_normal(X.shape)
    hX[0] = 0.0
    h = TripleProcess(grid, hX, rng.standard_normal(u.Y.shape), rng.standard_normal(u.Z.shape))
    F0 = evaluate_residual(p, u, noise)
    G = gateaux_derivative(p, u, h, noise)
    errs = [((evaluate_residual(p, u + h * d, noise) - F0) * (1.0 / d) - G).norm()
            for d in (1e-1, 1e-2, 1e-3)]
    factors = [errs[0] / errs[1], errs[1] / errs[2]]
    detail(f"errors {_fmt(errs)}, decay factors {_fmt(factors)}")
    assert all(3.0 <= f <= 30.0 for f in factors)


@pytest.mark.criterion(5, "driver remainder <= 2 |f'| |h| with zero violations; identity to 1e-10")
def test_remainder_bound_and_identity(detail):
    violations, worst_identity = {}, 0.0
    rng = np.random.default_rng(11)
    for case in catalog():
        p = case.problem
        n = 10_000
        U = 3.0 * rng.standard_normal((n, p.d + p.m + p.m * p.k))
        D = 3.0 * rng.standard_normal(U.shape)
        t = float(rng.uniform(0.0, p.horizon))
        R = remainder(lambda q: p.driver_flat(t, q), lambda q: p.driver_jac_flat(t, q), U, D)
        lhs = np.linalg.norm(R, axis=1)
        rhs = 2.0 * p.bounds.f * np.linalg.norm(D, axis=1)
        violations[case.id] = int(np.sum(lhs > rhs + 1e-12))

        grid = p.grid(20)
        noise = case_noise(case, 3, 20, 500)
        X = simulate_euler(p, grid, noise)
        u = TripleProcess(grid, X, 0.5 * np.tanh(X[..., :p.m]),
                          0.3 + 0.1 * np.broadcast_to(X[..., :1, None], X.shape[:2] + (p.m, p.k)))
        dX = rng.standard_normal(X.shape)
        dX[0] = 0.0
        du = TripleProcess(grid, dX, rng.standard_normal(u.Y.shape), rng.standard_normal(u.Z.shape))
        lhs_id = (evaluate_residual(p, u + du, noise) - evaluate_residual(p, u, noise)
                  - gateaux_derivative(p, u, du, noise))
        worst_identity = max(worst_identity, (lhs_id - remainder_decomposition(p, u, du, noise)).max_abs())
    detail(f"violations {violations}, worst identity gap {worst_identity:.3g}")
    assert all(v == 0 for v in violations.values())
    assert worst_identity <= 1e-10


@pytest.mark.criterion(6, "P-SDE forward errors within the factorial bound, pre-floor ratios decrease")
def test_forward_factorial_bound(detail, sde_setup):
    case, grid, noise, oracle = sde_setup
    X0 = np.broadcast_to(case.problem.x0, (grid.steps + 1, noise.paths, case.problem.d)).copy()
    rec = run_forward_newton(case.problem, X0, 4, oracle.X, grid, noise, strict=False)
    ratios = rec.pre_floor_ratios()
    detail(f"errors {_fmt(rec.combined)}, bounds {_fmt(rec.bound)}, floor {rec.floor:.4g}, "
           f"pre-floor ratios {_fmt(ratios)}")
    assert all(rec.combined[n] <= rec.bound[n] for n in range(1, len(rec)))
    assert len(ratios) >= 2 and pre_floor_ratios_decreasing(rec)


@pytest.mark.criterion(7, "constants: C0 = 8e^4, alpha = 894, zero bounds give zeros")
def test_constants_match_hand_values(detail):
    c0 = evaluate_constants(DerivativeBounds(1, 0, 0, 0), 1.0).C0
    alpha = evaluate_constants(DerivativeBounds(0, 0, 1, 0), 1.0, 0.5).alpha
    zero = evaluate_constants(DerivativeBounds(0, 0, 0, 0), 1.0)
    detail(f"C0 {c0!r}, alpha {alpha!r}, zero-bounds (c_bsigma, C0, alpha) "
           f"({zero.c_bsigma}, {zero.C0}, {zero.alpha})")
    assert abs(c0 - 8 * math.exp(4)) <= 1e-9 * 8 * math.exp(4)
    assert alpha == 894.0
    assert zero.c_bsigma == 0 and zero.C0 == 0 and zero.alpha == 0


@pytest.mark.criterion(8, "P-AFF linear solve: max Y error <= 0.02, Z S2 error <= 0.05")
def test_linear_backward_solver_accuracy(detail):
    case, grid, noise, oracle = analytic_setup("P-AFF")
    u0 = initial_iterate(case.problem, grid, noise)
    Y, Z = solve_linear_bsde(linearize(case.problem, u0), u0.X, grid, noise, RegressionConfig(degree=2))
    y_err = float(np.max(np.abs(Y - oracle.Y)))
    z_err = estimate_s2_norm(Z - oracle.Z)
    detail(f"max Y error {y_err:.4g}, Z S2 error {z_err:.4g}")
    assert y_err <= 0.02 and z_err <= 0.05


@pytest.mark.criterion(9, "solve output is byte-identical across repeats at workers 1 and 4")
def test_solve_is_deterministic_across_worker_counts(detail, tmp_path):
    outputs = {}
    for workers in (1, 4):
        cfg = tmp_path / f"w{workers}.cfg"
        cfg.write_text(f"benchmark = P-AFFY\nN = 20\nM = 10000\niters = 2\nseed = 7\n"
                       f"workers = {workers}\n", encoding="utf-8")
        for run in ("a", "b"):
            out = tmp_path / f"w{workers}{run}"
            assert cmd_solve(cfg, out) == 0
            outputs[workers, run] = (out / "record.csv").read_bytes()
    repeat = all(outputs[w, "a"] == outputs[w, "b"] for w in (1, 4))
    across = outputs[1, "a"] == outputs[4, "a"]
    detail(f"repeat identical {repeat}, workers 1 vs 4 identical {across}, "
           f"{len(outputs[1, 'a'])} bytes")
    assert repeat and across


@pytest.mark.criterion(10, "P-AFFY-A4: Newton error <= Picard error at every pre-floor index")
def test_newton_beats_picard_on_a_stiff_driver(detail):
    case, grid, noise, oracle = analytic_setup("P-AFFY-A4")
    u0 = initial_iterate(case.problem, grid, noise)
    newton = run_newton(case.problem, u0, 6, grid, noise, case.regression, oracle, strict=False)
    picard = run_picard(case.problem, u0, 6, grid, noise, case.regression, oracle, strict=False)
    indices = sorted(set(newton.pre_floor()) | set(picard.pre_floor()))
    detail(f"newton {_fmt(newton.combined)}, picard {_fmt(picard.combined)}, compared at {indices}")
    assert indices
    assert all(newton.combined[n] <= picard.combined[n] for n in indices)
