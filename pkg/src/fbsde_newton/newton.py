"""Newton-Kantorovich iteration for decoupled FBSDEs and the Picard baseline.

Each Newton step freezes the coefficients along the previous iterate
``u_n = (X_n, Y_n, Z_n)``,

    b_n(t, x)          = b(t, X_n) + b_x(t, X_n) (x - X_n)
    sigma_n(t, x)      = sigma(t, X_n) + sigma_x(t, X_n) (x - X_n)
    f_n(t, x, y, z)    = f(t, u_n) + f'(t, u_n) (x - X_n, y - Y_n, z - Z_n)
    phi_n(x)           = phi(X_n(T)) + phi_x(X_n(T)) (x - X_n(T)),

simulates the affine forward SDE on the shared noise and solves the resulting
linear BSDE by regression.  All iterates share one Brownian bundle, so the
error processes ``u - u_n`` are compared path by path.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .constants import ConstantsReport, evaluate_constants
from .core import (
    BrownianBundle,
    FbsdeProblem,
    TimeGrid,
    TripleProcess,
    combined_distance,
    combined_norm,
    estimate_h2_norm,
    estimate_s2_norm,
    estimate_weighted_norm,
)
from .errors import InvalidArgumentError, RateViolationError
from .forward import forward_newton_step, simulate_euler
from .linear_bsde import RegressionConfig, solve_linear_bsde
from .operator import evaluate_residual
from .record import ConvergenceRecord

__all__ = [
    "LinearizedProblem",
    "ConvergenceRecord",
    "ConstantsReport",
    "evaluate_constants",
    "linearize",
    "initial_iterate",
    "newton_step",
    "picard_step",
    "run_newton",
    "run_picard",
]

DEFAULT_EPS = 0.5
DEFAULT_ITERS = 6
RATE_SLACK = 0.1


class LinearizedProblem:
    """Affine coefficients frozen along a reference iterate.

    With ``mode="picard"`` the driver is frozen at the reference (zero
    derivative) and the terminal condition is kept exact.
    """

    def __init__(self, problem: FbsdeProblem, reference: TripleProcess, mode: str = "newton"):
        if mode not in ("newton", "picard"):
            raise InvalidArgumentError(f"unknown linearisation mode {mode!r}")
        if reference.X.shape[2] != problem.d or reference.Y.shape[2] != problem.m \
                or reference.Z.shape[3] != problem.k:
            raise InvalidArgumentError("reference iterate does not match the problem dimensions")
        self.problem = problem
        self.reference = reference
        self.mode = mode
        self.grid = reference.grid

    def _ref(self, i):
        u = self.reference
        return u.X[i], u.Y[i], u.Z[i]

    def drift(self, i: int, x: np.ndarray) -> np.ndarray:
        t, ref = self.grid.time(i), self.reference.X[i]
        p = self.problem
        return p.drift(t, ref) + np.einsum("pde,pe->pd", p.drift_jac(t, ref), x - ref)

    def diffusion(self, i: int, x: np.ndarray) -> np.ndarray:
        t, ref = self.grid.time(i), self.reference.X[i]
        p = self.problem
        return p.diffusion(t, ref) + np.einsum("pdke,pe->pdk", p.diffusion_jac(t, ref), x - ref)

    def driver_coefficients(self, i: int):
        """``(a, A_x, A_y, A_z)`` with ``f_n(t_i, x, y, z) = a + A_x x + A_y y + A_z z``."""
        p = self.problem
        t = self.grid.time(i)
        xn, yn, zn = self._ref(i)
        value = p.driver(t, xn, yn, zn)
        M, m = value.shape
        if self.mode == "picard":
            return (value, np.zeros((M, m, p.d)), np.zeros((M, m, m)), np.zeros((M, m, m, p.k)))
        Ax = p.driver_jac_x(t, xn, yn, zn)
        Ay = p.driver_jac_y(t, xn, yn, zn)
        Az = p.driver_jac_z(t, xn, yn, zn)
        offset = (value - np.einsum("pmd,pd->pm", Ax, xn) - np.einsum("pmn,pn->pm", Ay, yn)
                  - np.einsum("pmnk,pnk->pm", Az, zn))
        return offset, Ax, Ay, Az

    def driver(self, i: int, x, y, z) -> np.ndarray:
        a, Ax, Ay, Az = self.driver_coefficients(i)
        return (a + np.einsum("pmd,pd->pm", Ax, x) + np.einsum("pmn,pn->pm", Ay, y)
                + np.einsum("pmnk,pnk->pm", Az, z))

    def terminal(self, x: np.ndarray) -> np.ndarray:
        p = self.problem
        if self.mode == "picard":
            return p.terminal(x)
        ref = self.reference.X[-1]
        return p.terminal(ref) + np.einsum("pmd,pd->pm", p.terminal_jac(ref), x - ref)


def linearize(problem: FbsdeProblem, u_n: TripleProcess) -> LinearizedProblem:
    return LinearizedProblem(problem, u_n, "newton")


def initial_iterate(problem: FbsdeProblem, grid: TimeGrid, noise: BrownianBundle,
                    workers: int = 1) -> TripleProcess:
    """Default start: Euler forward paths with ``Y = 0`` and ``Z = 0``."""
    X = simulate_euler(problem, grid, noise, workers)
    return TripleProcess.zeros_like_backward(X, grid, problem.m, problem.k)


def newton_step(problem: FbsdeProblem, u_n: TripleProcess, grid: TimeGrid, noise: BrownianBundle,
                reg: RegressionConfig = RegressionConfig(), workers: int = 1) -> TripleProcess:
    X_next = forward_newton_step(problem, u_n.X, grid, noise, workers)
    Y, Z = solve_linear_bsde(linearize(problem, u_n), X_next, grid, noise, reg)
    return TripleProcess(grid, X_next, Y, Z)


def picard_step(problem: FbsdeProblem, u_n: TripleProcess, grid: TimeGrid, noise: BrownianBundle,
                reg: RegressionConfig = RegressionConfig()) -> TripleProcess:
    """Solve the BSDE with the driver frozen at ``(X, Y_n, Z_n)``; ``X`` is not updated."""
    Y, Z = solve_linear_bsde(LinearizedProblem(problem, u_n, "picard"), u_n.X, grid, noise, reg)
    return TripleProcess(grid, u_n.X, Y, Z)


def _check_start(problem, u, grid, noise, oracle):
    if u.grid != grid or oracle.grid != grid or noise.grid != grid:
        raise InvalidArgumentError("iterate, oracle and noise must share one grid")
    if u.paths != noise.paths or oracle.paths != noise.paths:
        raise InvalidArgumentError("iterate, oracle and noise must share one path set")
    if not np.array_equal(u.X[0], np.broadcast_to(problem.x0, u.X[0].shape)):
        raise InvalidArgumentError("starting iterate must satisfy X_0(0) = x0")


def _iterate(step, u0, iters, oracle, alpha, problem, noise, floor, floor_iters, floor_tol):
    """Run ``iters`` recorded steps, then continue until stationary to locate the floor."""
    grid = u0.grid
    rows, iterates_diff = [], []
    u = u0
    for n in range(iters + 1):
        if n:
            u_next = step(u)
            iterates_diff.append(combined_distance(u_next, u))
            u = u_next
        e = u - oracle
        rows.append(dict(
            err_X=estimate_s2_norm(e.X), err_Y=estimate_s2_norm(e.Y),
            err_Z=estimate_h2_norm(e.Z, grid),
            weighted_alpha=estimate_weighted_norm(e.Y, e.Z, alpha, grid, normalize=True),
            residual=evaluate_residual(problem, u, noise).norm(),
            succ_diff=iterates_diff[-1] if n else math.nan,
        ))
    if floor is None:
        last_diff = iterates_diff[-1] if iterates_diff else math.inf
        for _ in range(floor_iters):
            if last_diff <= floor_tol * max(1.0, combined_norm(u)):
                break
            u_next = step(u)
            last_diff = combined_distance(u_next, u)
            u = u_next
        floor = combined_distance(u, oracle)
    return rows, float(floor)


def _run(method, step, problem, u_0, iters, grid, noise, reg, oracle, eps, floor, strict,
         stop_at_floor, floor_iters, floor_tol):
    _check_start(problem, u_0, grid, noise, oracle)
    if iters < 0:
        raise InvalidArgumentError("iteration budget must be nonnegative")
    consts = evaluate_constants(problem.bounds, problem.horizon, eps)
    rows, floor = _iterate(step, u_0, iters, oracle, consts.alpha, problem, noise, floor,
                           floor_iters, floor_tol)
    record = ConvergenceRecord(method=method, floor=floor, meta={
        "problem": problem.name, "seed": noise.seed, "N": grid.steps, "M": noise.paths,
        "eps": eps, "alpha": consts.alpha, "degree": reg.degree, "ridge": reg.ridge,
        "features": reg.features, "weighted_alpha_log_scale": 0.5 * consts.alpha * grid.horizon,
    })
    for n, row in enumerate(rows):
        record.append(**row)
        if stop_at_floor and n and record.combined[n] < floor:
            break
    if strict:
        msg = record.first_violation(eps, RATE_SLACK)
        if msg:
            raise RateViolationError(msg, record)
    return record


def run_newton(problem: FbsdeProblem, u_0: TripleProcess, iters: int, grid: TimeGrid,
               noise: BrownianBundle, reg: RegressionConfig, oracle: TripleProcess,
               eps: float = DEFAULT_EPS, floor: Optional[float] = None, strict: bool = True,
               stop_at_floor: bool = False, workers: int = 1, floor_iters: int = 30,
               floor_tol: float = 1e-8) -> ConvergenceRecord:
    """Newton iterates ``u_0 .. u_iters`` measured against ``oracle``.

    ``floor`` defaults to the error of the stationary point of the discrete
    iteration (found by iterating past the budget until successive iterates
    agree to ``floor_tol``).  With ``strict`` every ratio whose predecessor
    error exceeds ten times the floor must be at most ``eps + 0.1``;
    otherwise :class:`RateViolationError` is raised with the record attached.
    """
    return _run("newton", lambda u: newton_step(problem, u, grid, noise, reg, workers), problem,
                u_0, iters, grid, noise, reg, oracle, eps, floor, strict, stop_at_floor,
                floor_iters, floor_tol)


def run_picard(problem: FbsdeProblem, u_0: TripleProcess, iters: int, grid: TimeGrid,
               noise: BrownianBundle, reg: RegressionConfig, oracle: TripleProcess,
               eps: float = DEFAULT_EPS, floor: Optional[float] = None, strict: bool = False,
               stop_at_floor: bool = False, workers: int = 1, floor_iters: int = 60,
               floor_tol: float = 1e-8) -> ConvergenceRecord:
    """Picard baseline: the forward paths are the Euler solution throughout."""
    X = simulate_euler(problem, grid, noise, workers)
    start = TripleProcess(grid, X, u_0.Y, u_0.Z)
    return _run("picard", lambda u: picard_step(problem, u, grid, noise, reg), problem, start,
                iters, grid, noise, reg, oracle, eps, floor, strict, stop_at_floor,
                floor_iters, floor_tol)
