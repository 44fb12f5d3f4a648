import math

import numpy as np
import pytest

from fbsde_newton import (
    DerivativeBounds,
    InvalidArgumentError,
    NumericalBlowupError,
    RateViolationError,
    estimate_s2_norm,
    evaluate_constants,
    forward_newton_step,
    get_case,
    case_noise,
    make_noise,
    run_forward_newton,
    simulate_euler,
)
from fbsde_newton.forward import pre_floor_ratios_decreasing
from conftest import scalar_problem

unit_noise = lambda t, x: np.ones((x.shape[0], 1, 1))


def test_euler_without_coefficients_stays_at_the_initial_value():
    p = scalar_problem(x0=1.5)
    grid = p.grid(10)
    X = simulate_euler(p, grid, make_noise(0, grid, 7, 1))
    assert X.shape == (11, 7, 1)
    assert np.all(X == 1.5)


def test_euler_integrates_a_constant_drift_exactly():
    p = scalar_problem(drift=lambda t, x: np.ones_like(x))
    grid = p.grid(64)  # dt = 2**-6 keeps every partial sum exact
    X = simulate_euler(p, grid, make_noise(0, grid, 3, 1))
    assert np.all(X[-1] == 1.0)


def test_euler_terminal_variance_matches_brownian_motion():
    p = scalar_problem(diffusion=unit_noise)
    grid = p.grid(50)
    M = 10_000
    X_T = simulate_euler(p, grid, make_noise(12, grid, M, 1))[-1, :, 0]
    se = grid.horizon * math.sqrt(2.0 / (M - 1))
    assert abs(X_T.var(ddof=1) - grid.horizon) <= 5 * se


def test_euler_reports_the_node_of_a_blowup():
    p = scalar_problem(drift=lambda t, x: np.full_like(x, np.inf if t > 0.5 else 0.0))
    grid = p.grid(10)
    with pytest.raises(NumericalBlowupError, match="node 7"):
        simulate_euler(p, grid, make_noise(0, grid, 3, 1))


def test_euler_rejects_noise_of_the_wrong_dimension():
    p = scalar_problem()
    grid = p.grid(5)
    with pytest.raises(InvalidArgumentError):
        simulate_euler(p, grid, make_noise(0, grid, 3, 2))


def test_euler_is_independent_of_worker_count():
    case = get_case("P-NL")
    grid = case.problem.grid(20)
    noise = case_noise(case, 3, 20, 9000)
    a = simulate_euler(case.problem, grid, noise, workers=1)
    b = simulate_euler(case.problem, grid, noise, workers=3)
    assert a.tobytes() == b.tobytes()


def _affine_sde():
    return scalar_problem(
        drift=lambda t, x: 0.5 * x + 1.0,
        drift_jac=lambda t, x: np.full((x.shape[0], 1, 1), 0.5),
        diffusion=lambda t, x: (0.3 * x + 1.0)[:, :, None],
        diffusion_jac=lambda t, x: np.full((x.shape[0], 1, 1, 1), 0.3),
        bounds=DerivativeBounds(0.5, 0.3, 0.0, 0.0),
    )


def test_newton_step_for_affine_coefficients_is_the_euler_solution():
    p = _affine_sde()
    grid = p.grid(40)
    noise = make_noise(4, grid, 500, 1)
    rng = np.random.default_rng(0)
    X0 = rng.standard_normal((41, 500, 1))
    X0[0] = 0.0
    X1 = forward_newton_step(p, X0, grid, noise)
    assert np.allclose(X1, simulate_euler(p, grid, noise), rtol=0, atol=1e-12)


def test_euler_solution_is_a_fixed_point_of_the_forward_newton_map():
    case = get_case("P-NL")
    grid = case.problem.grid(50)
    noise = case_noise(case, 1, 50, 1000)
    X = simulate_euler(case.problem, grid, noise)
    assert np.max(np.abs(forward_newton_step(case.problem, X, grid, noise) - X)) <= 1e-12


def test_forward_newton_step_requires_the_initial_value():
    case = get_case("P-SDE")
    grid = case.problem.grid(10)
    noise = case_noise(case, 0, 10, 20)
    X = simulate_euler(case.problem, grid, noise) + 0.1
    with pytest.raises(InvalidArgumentError, match="initial value"):
        forward_newton_step(case.problem, X, grid, noise)
    with pytest.raises(InvalidArgumentError):
        forward_newton_step(case.problem, X[:, :10], grid, noise)


def test_every_forward_iterate_starts_at_the_initial_value(sde_setup):
    case, grid, noise, _ = sde_setup
    X = np.zeros((grid.steps + 1, noise.paths, 1))
    for _ in range(3):
        X = forward_newton_step(case.problem, X, grid, noise)
        assert np.all(X[0] == case.problem.x0)


def test_affine_forward_errors_drop_to_the_floor_in_one_step():
    p = _affine_sde()
    grid = p.grid(20)
    fine_noise = make_noise(9, grid.refine(16), 2000, 1)
    noise = fine_noise.coarsen(16)
    oracle = simulate_euler(p, fine_noise.grid, fine_noise)[::16]
    X0 = np.zeros((21, 2000, 1))
    rec = run_forward_newton(p, X0, 3, oracle, grid, noise)
    assert rec.combined[0] > 10 * rec.floor
    assert all(e == pytest.approx(rec.floor, rel=1e-9) for e in rec.combined[1:])


def test_sde_forward_newton_errors_decay_with_decreasing_ratios(sde_setup):
    case, grid, noise, oracle = sde_setup
    X0 = np.zeros((grid.steps + 1, noise.paths, 1))
    rec = run_forward_newton(case.problem, X0, 4, oracle.X, grid, noise)
    assert len(rec.pre_floor_ratios()) >= 2
    assert pre_floor_ratios_decreasing(rec)
    assert rec.combined[-1] == pytest.approx(rec.floor, rel=1e-3)
    assert rec.meta["C0"] == pytest.approx(8 * math.exp(4), rel=1e-12)


def test_forward_run_started_at_the_reference_stays_at_the_floor(sde_setup):
    case, grid, noise, oracle = sde_setup
    rec = run_forward_newton(case.problem, oracle.X, 4, oracle.X, grid, noise)
    assert rec.combined[0] == 0.0
    assert all(e <= rec.floor * (1 + 1e-9) for e in rec.combined)


def test_forward_bound_violation_is_reported_with_the_record():
    p = scalar_problem(diffusion=unit_noise)  # C0 = 0: the bound demands exact convergence
    grid = p.grid(10)
    noise = make_noise(0, grid, 200, 1)
    X0 = np.zeros((11, 200, 1))
    shifted = simulate_euler(p, grid, noise) + 5.0 * (np.arange(11) > 0)[:, None, None]
    with pytest.raises(RateViolationError) as info:
        run_forward_newton(p, X0, 3, shifted, grid, noise, floor=0.0)
    assert len(info.value.record) >= 2


def test_forward_bound_uses_the_factorial_formula(sde_setup):
    case, grid, noise, oracle = sde_setup
    X0 = np.zeros((grid.steps + 1, noise.paths, 1))
    rec = run_forward_newton(case.problem, X0, 3, oracle.X, grid, noise)
    C0 = evaluate_constants(case.problem.bounds, 1.0).C0
    e0 = estimate_s2_norm(X0 - oracle.X)
    for n in range(1, 4):
        assert rec.bound[n] == pytest.approx(math.sqrt(C0**n / math.factorial(n)) * e0, rel=1e-12)
