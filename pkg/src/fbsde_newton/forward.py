"""Euler-Maruyama simulation and the forward-only Newton iteration."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .constants import evaluate_constants, factorial_bound
from .core import BrownianBundle, FbsdeProblem, TimeGrid, estimate_s2_norm, map_path_chunks
from .errors import InvalidArgumentError, NumericalBlowupError, RateViolationError
from .record import FLOOR_MULTIPLE, ConvergenceRecord

__all__ = ["simulate_euler", "forward_newton_step", "run_forward_newton"]


def _check_noise(problem: FbsdeProblem, grid: TimeGrid, noise: BrownianBundle):
    if noise.grid != grid:
        raise InvalidArgumentError(f"noise grid {noise.grid} differs from {grid}")
    if noise.k != problem.k:
        raise InvalidArgumentError(f"noise has {noise.k} Wiener components, problem needs {problem.k}")


def _euler(grid, noise, x0, step, workers):
    N, dt = grid.steps, grid.dt

    def block(lo, hi):
        dW = noise.increments[:, lo:hi]
        X = np.empty((N + 1, hi - lo, x0.shape[-1]))
        X[0] = x0
        for i in range(N):
            drift, diff = step(i, lo, hi, X[i])
            X[i + 1] = X[i] + drift * dt + np.einsum("pdk,pk->pd", diff, dW[i])
            if not np.all(np.isfinite(X[i + 1])):
                raise NumericalBlowupError(
                    f"non-finite state at node {i + 1} (t = {grid.time(i + 1):.6g})"
                )
        return X

    return map_path_chunks(block, noise.paths, workers, axis=1)


def simulate_euler(problem: FbsdeProblem, grid: TimeGrid, noise: BrownianBundle,
                   workers: int = 1) -> np.ndarray:
    """Explicit Euler paths ``X[i, m]`` of the forward SDE, shape ``(N + 1, M, d)``."""
    _check_noise(problem, grid, noise)

    def step(i, lo, hi, x):
        t = grid.time(i)
        return problem.drift(t, x), problem.diffusion(t, x)

    return _euler(grid, noise, problem.x0, step, workers)


def forward_newton_step(problem: FbsdeProblem, X_n: np.ndarray, grid: TimeGrid,
                        noise: BrownianBundle, workers: int = 1) -> np.ndarray:
    """Euler solution of the SDE whose coefficients are linearised along ``X_n``.

    ``b_n(t, x) = b(t, X_n) + b_x(t, X_n) (x - X_n)`` and likewise for sigma.
    """
    _check_noise(problem, grid, noise)
    X_n = np.asarray(X_n, dtype=float)
    if X_n.shape != (grid.steps + 1, noise.paths, problem.d):
        raise InvalidArgumentError(f"iterate shape {X_n.shape} does not match noise and grid")
    if not np.array_equal(X_n[0], np.broadcast_to(problem.x0, X_n[0].shape)):
        raise InvalidArgumentError("iterate does not start at the initial value x0")

    def step(i, lo, hi, x):
        t = grid.time(i)
        ref = X_n[i, lo:hi]
        dx = x - ref
        drift = problem.drift(t, ref) + np.einsum("pde,pe->pd", problem.drift_jac(t, ref), dx)
        diff = problem.diffusion(t, ref) + np.einsum("pdke,pe->pdk", problem.diffusion_jac(t, ref), dx)
        return drift, diff

    return _euler(grid, noise, problem.x0, step, workers)


def run_forward_newton(problem: FbsdeProblem, X_0: np.ndarray, iters: int, oracle: np.ndarray,
                       grid: TimeGrid, noise: BrownianBundle, floor: Optional[float] = None,
                       strict: bool = True, workers: int = 1) -> ConvergenceRecord:
    """Iterate :func:`forward_newton_step` and measure S2 errors against ``oracle``.

    The factorial bound ``|X - X_n|^2 <= C0^n / n! |X - X_0|^2`` (squared
    norms, ``C0`` from the declared derivative bounds) is recorded per
    iteration.  ``floor`` defaults to the error of the plain Euler solution on
    this grid, i.e. the fixed point the iteration converges to.  No iterate
    can beat that floor, so ``strict`` checks ``err_n <= bound_n + floor``.
    """
    oracle = np.asarray(oracle, dtype=float)
    if floor is None:
        floor = estimate_s2_norm(simulate_euler(problem, grid, noise, workers) - oracle)
    consts = evaluate_constants(problem.bounds, problem.horizon, 0.5)
    record = ConvergenceRecord(method="forward-newton", floor=float(floor),
                               meta={"N": grid.steps, "M": noise.paths, "seed": noise.seed,
                                     "C0": consts.C0, "C0_proof": consts.C0_proof})
    X = np.asarray(X_0, dtype=float)
    e0 = estimate_s2_norm(X - oracle)
    record.append(err_X=e0, bound=e0)
    for n in range(1, iters + 1):
        X_next = forward_newton_step(problem, X, grid, noise, workers)
        err = estimate_s2_norm(X_next - oracle)
        bound_sq = factorial_bound(consts.C0, n) * e0 * e0
        record.append(err_X=err, succ_diff=estimate_s2_norm(X_next - X), bound=float(np.sqrt(bound_sq)))
        X = X_next
    if strict:
        for n in range(1, len(record)):
            if record.combined[n] > record.bound[n] + record.floor:
                raise RateViolationError(
                    f"forward error {record.combined[n]:.4g} at iteration {n} exceeds the "
                    f"factorial bound {record.bound[n]:.4g} plus floor {record.floor:.4g}", record)
    return record


def pre_floor_ratios_decreasing(record: ConvergenceRecord, multiple: float = FLOOR_MULTIPLE) -> bool:
    r = record.pre_floor_ratios(multiple)
    return all(b < a for a, b in zip(r, r[1:]))
