"""Built-in problem instances and their reference solutions.

Analytic cases evaluate ``(Y*, Z*)`` along the Euler paths of the forward
SDE.  Fine-grid cases rebuild the same Brownian paths on a 16x finer grid,
solve there and keep every 16th node of the first ``M`` paths.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .core import BrownianBundle, DerivativeBounds, FbsdeProblem, TimeGrid, TripleProcess, \
    combined_distance, make_noise
from .errors import InvalidArgumentError, OracleError
from .forward import simulate_euler
from .linear_bsde import RegressionConfig

__all__ = [
    "BenchmarkCase",
    "catalog",
    "get_case",
    "case_noise",
    "oracle_solution",
    "REFINEMENT",
]

# fine-grid oracle recipe: time refinement, path multiplier, basis degree, tolerance
REFINEMENT = 16
PATH_FACTOR = 4
ORACLE_DEGREE = 3
ORACLE_TOL = 1e-4
ORACLE_MAX_ITERS = 12


@dataclass(frozen=True, eq=False)
class BenchmarkCase:
    """A problem together with the recipe for its reference solution.

    ``solution`` maps ``(t, x)`` with ``x`` of shape ``(M, d)`` to
    ``(Y (M, m), Z (M, m, k))`` for analytic cases.  ``regression`` is the
    recommended backward-solver configuration at ``(steps, paths)``.
    """

    id: str
    problem: FbsdeProblem
    oracle: str  # "analytic" or "fine-grid"
    solution: Optional[Callable] = None
    steps: int = 100
    paths: int = 10_000
    substeps: int = 1
    regression: RegressionConfig = RegressionConfig()
    description: str = ""
    params: Dict[str, float] = field(default_factory=dict)

    @property
    def forward_only(self) -> bool:
        return self.params.get("forward_only", 0.0) == 1.0


def _problem(name, d, m, k, drift, diffusion, driver, terminal, drift_jac, diffusion_jac,
             jac_x, jac_y, jac_z, terminal_jac, bounds):
    return FbsdeProblem(d=d, m=m, k=k, x0=np.zeros(d), horizon=1.0, drift=drift,
                        diffusion=diffusion, driver=driver, terminal=terminal,
                        drift_jac=drift_jac, diffusion_jac=diffusion_jac, driver_jac_x=jac_x,
                        driver_jac_y=jac_y, driver_jac_z=jac_z, terminal_jac=terminal_jac,
                        bounds=bounds, name=name)


def _paths(x):
    return x.shape[0]


def _scalar_problem(name, drift, drift_jac, driver, jac_x, jac_y, jac_z, terminal, terminal_jac,
                    bounds):
    """``d = m = k = 1`` with unit additive noise."""
    return _problem(
        name, 1, 1, 1,
        drift=drift,
        diffusion=lambda t, x: np.ones((_paths(x), 1, 1)),
        driver=driver,
        terminal=terminal,
        drift_jac=drift_jac,
        diffusion_jac=lambda t, x: np.zeros((_paths(x), 1, 1, 1)),
        jac_x=jac_x, jac_y=jac_y, jac_z=jac_z,
        terminal_jac=terminal_jac,
        bounds=bounds,
    )


_zero_drift = lambda t, x: np.zeros_like(x)
_zero_drift_jac = lambda t, x: np.zeros((_paths(x), 1, 1))
_zero_jac_x = lambda t, x, y, z: np.zeros((_paths(x), 1, 1))
_zero_jac_y = lambda t, x, y, z: np.zeros((_paths(x), 1, 1))
_zero_jac_z = lambda t, x, y, z: np.zeros((_paths(x), 1, 1, 1))


def _zero_case() -> BenchmarkCase:
    problem = _scalar_problem(
        "P-ZERO", _zero_drift, _zero_drift_jac,
        driver=lambda t, x, y, z: np.zeros((_paths(x), 1)),
        jac_x=_zero_jac_x, jac_y=_zero_jac_y, jac_z=_zero_jac_z,
        terminal=lambda x: np.zeros((_paths(x), 1)),
        terminal_jac=lambda x: np.zeros((_paths(x), 1, 1)),
        bounds=DerivativeBounds(0.0, 0.0, 0.0, 0.0),
    )
    sol = lambda t, x: (np.zeros((_paths(x), 1)), np.zeros((_paths(x), 1, 1)))
    return BenchmarkCase("P-ZERO", problem, "analytic", sol, steps=20, paths=1000,
                         description="b = 0, sigma = 1, f = 0, phi = 0; Y = Z = 0")


def _affine_case() -> BenchmarkCase:
    problem = _scalar_problem(
        "P-AFF", _zero_drift, _zero_drift_jac,
        driver=lambda t, x, y, z: np.ones((_paths(x), 1)),
        jac_x=_zero_jac_x, jac_y=_zero_jac_y, jac_z=_zero_jac_z,
        terminal=lambda x: x.copy(),
        terminal_jac=lambda x: np.ones((_paths(x), 1, 1)),
        bounds=DerivativeBounds(0.0, 0.0, 0.0, 1.0),
    )
    sol = lambda t, x: (x + (1.0 - t), np.ones((_paths(x), 1, 1)))
    return BenchmarkCase("P-AFF", problem, "analytic", sol,
                         description="b = 0, sigma = 1, f = 1, phi(x) = x; Y = x + 1 - t, Z = 1")


def _affine_y_case(a: float, case_id: str) -> BenchmarkCase:
    problem = _scalar_problem(
        case_id, _zero_drift, _zero_drift_jac,
        driver=lambda t, x, y, z: a * y,
        jac_x=_zero_jac_x,
        jac_y=lambda t, x, y, z: np.full((_paths(x), 1, 1), a),
        jac_z=_zero_jac_z,
        terminal=lambda x: x.copy(),
        terminal_jac=lambda x: np.ones((_paths(x), 1, 1)),
        bounds=DerivativeBounds(0.0, 0.0, abs(a), 1.0),
    )

    def sol(t, x):
        g = math.exp(a * (1.0 - t))
        return g * x, np.full((_paths(x), 1, 1), g)

    return BenchmarkCase(case_id, problem, "analytic", sol, params={"a": a},
                         description=f"f = {a:g} y, phi(x) = x; Y = exp({a:g}(1 - t)) x")


def _sine_drift(t, x):
    return np.sin(x)


def _sine_drift_jac(t, x):
    return np.cos(x)[:, :, None]


def _nonlinear_case() -> BenchmarkCase:
    problem = _scalar_problem(
        "P-NL", _sine_drift, _sine_drift_jac,
        driver=lambda t, x, y, z: np.cos(y) + 0.5 * np.sin(z[:, :, 0]),
        jac_x=_zero_jac_x,
        jac_y=lambda t, x, y, z: -np.sin(y)[:, :, None],
        jac_z=lambda t, x, y, z: 0.5 * np.cos(z)[:, :, None, :],
        terminal=lambda x: np.tanh(x),
        terminal_jac=lambda x: (1.0 / np.cosh(x) ** 2)[:, :, None],
        bounds=DerivativeBounds(1.0, 0.0, math.sqrt(1.25), 1.0),
    )
    # The catalog's forward iterates stay on the Euler paths, so the node
    # state alone is Markov; the cubic basis matches the reference recipe.
    reg = RegressionConfig(degree=ORACLE_DEGREE, features="current-iterate-state")
    return BenchmarkCase("P-NL", problem, "fine-grid", steps=100, paths=5000,
                         substeps=REFINEMENT, regression=reg,
                         description="b = sin x, sigma = 1, f = cos y + sin(z)/2, phi = tanh")


def _sde_case() -> BenchmarkCase:
    problem = _scalar_problem(
        "P-SDE", _sine_drift, _sine_drift_jac,
        driver=lambda t, x, y, z: np.zeros((_paths(x), 1)),
        jac_x=_zero_jac_x, jac_y=_zero_jac_y, jac_z=_zero_jac_z,
        terminal=lambda x: np.zeros((_paths(x), 1)),
        terminal_jac=lambda x: np.zeros((_paths(x), 1, 1)),
        bounds=DerivativeBounds(1.0, 0.0, 0.0, 0.0),
    )
    return BenchmarkCase("P-SDE", problem, "fine-grid", steps=100, paths=5000,
                         substeps=REFINEMENT, params={"forward_only": 1.0},
                         description="b = sin x, sigma = 1, f = 0, phi = 0; forward SDE only")


def _smoke_2d_case() -> BenchmarkCase:
    problem = _problem(
        "P-SMOKE2D", 2, 1, 2,
        drift=lambda t, x: np.zeros_like(x),
        diffusion=lambda t, x: np.broadcast_to(np.eye(2), (_paths(x), 2, 2)).copy(),
        driver=lambda t, x, y, z: np.zeros((_paths(x), 1)),
        terminal=lambda x: x.sum(axis=1, keepdims=True),
        drift_jac=lambda t, x: np.zeros((_paths(x), 2, 2)),
        diffusion_jac=lambda t, x: np.zeros((_paths(x), 2, 2, 2)),
        jac_x=lambda t, x, y, z: np.zeros((_paths(x), 1, 2)),
        jac_y=lambda t, x, y, z: np.zeros((_paths(x), 1, 1)),
        jac_z=lambda t, x, y, z: np.zeros((_paths(x), 1, 1, 2)),
        terminal_jac=lambda x: np.ones((_paths(x), 1, 2)),
        bounds=DerivativeBounds(0.0, 0.0, 0.0, math.sqrt(2.0)),
    )
    sol = lambda t, x: (x.sum(axis=1, keepdims=True), np.ones((_paths(x), 1, 2)))
    return BenchmarkCase("P-SMOKE2D", problem, "analytic", sol, steps=20, paths=2000,
                         description="d = 2, k = 2, phi = x1 + x2; Y = x1 + x2, Z = (1, 1)")


def catalog() -> List[BenchmarkCase]:
    return [
        _zero_case(),
        _affine_case(),
        _affine_y_case(1.0, "P-AFFY"),
        _affine_y_case(2.0, "P-AFFY-A2"),
        _affine_y_case(4.0, "P-AFFY-A4"),
        _nonlinear_case(),
        _sde_case(),
        _smoke_2d_case(),
    ]


def get_case(case_id: str) -> BenchmarkCase:
    for case in catalog():
        if case.id == case_id:
            return case
    known = ", ".join(c.id for c in catalog())
    raise InvalidArgumentError(f"unknown benchmark {case_id!r}; known: {known}")


def case_noise(case: BenchmarkCase, seed: int, steps: Optional[int] = None,
               paths: Optional[int] = None, workers: int = 1) -> BrownianBundle:
    """Noise for ``case``; fine-grid cases aggregate ``REFINEMENT`` substeps per step."""
    grid = case.problem.grid(steps or case.steps)
    return make_noise(seed, grid, paths or case.paths, case.problem.k,
                      substeps=case.substeps, workers=workers)


# ---------------------------------------------------------------------------
# reference solutions

_ORACLE_CACHE: Dict[Tuple, TripleProcess] = {}


def _analytic_oracle(case: BenchmarkCase, grid: TimeGrid, noise: BrownianBundle,
                     workers: int) -> TripleProcess:
    X = simulate_euler(case.problem, grid, noise, workers)
    n, M = X.shape[:2]
    Y = np.empty((n, M, case.problem.m))
    Z = np.empty((n, M, case.problem.m, case.problem.k))
    for i in range(n):
        Y[i], Z[i] = case.solution(grid.time(i), X[i])
    return TripleProcess(grid, X, Y, Z)


def _fine_noise(noise: BrownianBundle, paths: int, workers: int) -> BrownianBundle:
    if noise.substeps % REFINEMENT:
        raise OracleError(
            f"fine-grid oracle needs noise with a multiple of {REFINEMENT} substeps per step, "
            f"got {noise.substeps}; build it with case_noise"
        )
    fine = noise.refined(REFINEMENT, paths=paths, workers=workers)
    check = fine.take_paths(noise.paths).coarsen(REFINEMENT)
    if not np.array_equal(check.increments, noise.increments):
        raise OracleError("refined increments do not aggregate to the given noise")
    return fine


def _fine_grid_oracle(case: BenchmarkCase, grid: TimeGrid, noise: BrownianBundle,
                      workers: int, tol: float, max_iters: int) -> TripleProcess:
    from .newton import initial_iterate, newton_step

    problem = case.problem
    M = noise.paths
    if case.forward_only:
        fine = _fine_noise(noise, M, workers)
        X = simulate_euler(problem, fine.grid, fine, workers)[::REFINEMENT]
        return TripleProcess.zeros_like_backward(X, grid, problem.m, problem.k)

    fine = _fine_noise(noise, PATH_FACTOR * M, workers)
    reg = RegressionConfig(degree=ORACLE_DEGREE, features="current-iterate-state")
    u = initial_iterate(problem, fine.grid, fine, workers)
    diff = math.inf
    for _ in range(max_iters):
        u_next = newton_step(problem, u, fine.grid, fine, reg, workers)
        diff = combined_distance(u_next, u)
        u = u_next
        if diff < tol:
            return u.downsample(REFINEMENT).take_paths(M)
    raise OracleError(
        f"fine-grid reference for {case.id} did not converge: successive difference "
        f"{diff:.3g} after {max_iters} Newton steps (tolerance {tol:g})"
    )


def oracle_solution(case: BenchmarkCase, grid: TimeGrid, noise: BrownianBundle, workers: int = 1,
                    tol: float = ORACLE_TOL, max_iters: int = ORACLE_MAX_ITERS,
                    cache: bool = True) -> TripleProcess:
    """Reference triple on ``grid`` along the paths of ``noise``.

    Fine-grid results are memoised per (case, seed, grid, paths) because the
    16x-resolution solve dominates the cost of a run.
    """
    if noise.grid != grid:
        raise InvalidArgumentError("noise must live on the requested grid")
    if grid.horizon != case.problem.horizon:
        raise InvalidArgumentError("grid horizon differs from the problem horizon")
    if case.oracle == "analytic":
        return _analytic_oracle(case, grid, noise, workers)
    digest = hashlib.sha1(noise.increments.tobytes()).hexdigest()
    key = (case.id, digest, grid.steps, noise.paths, noise.substeps, tol)
    if cache and key in _ORACLE_CACHE:
        return _ORACLE_CACHE[key]
    result = _fine_grid_oracle(case, grid, noise, workers, tol, max_iters)
    if cache:
        _ORACLE_CACHE[key] = result
    return result
