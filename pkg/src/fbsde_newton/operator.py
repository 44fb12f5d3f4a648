"""The residual map of the FBSDE, its Gateaux derivative, and Lagrange remainders.

For a triple ``u = (x, y, z)`` sampled on a grid the discrete residual has a
forward row

    r_X(t_i) = x_i - x_0 - sum_{j<i} b(t_j, x_j) dt - sum_{j<i} sigma(t_j, x_j) dW_j

and a backward row

    r_Y(t_i) = y_i - phi(x_N) - sum_{j>=i} f(t_j, u_j) dt + sum_{j>=i} z_j dW_j.

Both rows are exact functions of the node values, so the derivative below is
the exact Jacobian-vector product of the discrete map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import BrownianBundle, FbsdeProblem, TripleProcess, estimate_s2_norm
from .errors import InvalidArgumentError

__all__ = [
    "ResidualProcess",
    "evaluate_residual",
    "gateaux_derivative",
    "remainder",
    "remainder_decomposition",
]


@dataclass(frozen=True, eq=False)
class ResidualProcess:
    r_X: np.ndarray
    r_Y: np.ndarray

    def norm(self) -> float:
        """Combined S2 norm of the two rows."""
        return float(np.hypot(estimate_s2_norm(self.r_X), estimate_s2_norm(self.r_Y)))

    def max_abs(self) -> float:
        return float(max(np.max(np.abs(self.r_X)), np.max(np.abs(self.r_Y))))

    def __sub__(self, other: "ResidualProcess") -> "ResidualProcess":
        return ResidualProcess(self.r_X - other.r_X, self.r_Y - other.r_Y)

    def __add__(self, other: "ResidualProcess") -> "ResidualProcess":
        return ResidualProcess(self.r_X + other.r_X, self.r_Y + other.r_Y)

    def __mul__(self, c: float) -> "ResidualProcess":
        return ResidualProcess(c * self.r_X, c * self.r_Y)

    __rmul__ = __mul__


def _check_shapes(problem: FbsdeProblem, u: TripleProcess, noise: BrownianBundle):
    n, M, d = u.X.shape
    if noise.grid.steps != u.grid.steps or noise.paths != M:
        raise InvalidArgumentError(
            f"process has {M} paths on {u.grid.steps} steps; noise has "
            f"{noise.paths} paths on {noise.grid.steps} steps"
        )
    if d != problem.d or u.Y.shape[2] != problem.m or u.Z.shape[2:] != (problem.m, problem.k) \
            or noise.k != problem.k:
        raise InvalidArgumentError("process dimensions do not match the problem")


def _forward_sum(drift_terms: np.ndarray, diff_terms: np.ndarray, dW: np.ndarray, dt: float):
    """Running sums ``sum_{j<i} (a_j dt + s_j dW_j)`` for ``i = 0..N``."""
    inc = drift_terms * dt + np.einsum("npdk,npk->npd", diff_terms, dW)
    out = np.zeros((inc.shape[0] + 1,) + inc.shape[1:])
    np.cumsum(inc, axis=0, out=out[1:])
    return out


def _backward_sum(inc: np.ndarray) -> np.ndarray:
    """Tail sums ``sum_{j>=i} inc_j`` for ``i = 0..N`` (zero at ``i = N``)."""
    out = np.zeros((inc.shape[0] + 1,) + inc.shape[1:])
    out[:-1] = np.cumsum(inc[::-1], axis=0)[::-1]
    return out


def _stochastic_integrand(z: np.ndarray, dW: np.ndarray) -> np.ndarray:
    return np.einsum("npmk,npk->npm", z[:-1], dW)


def evaluate_residual(problem: FbsdeProblem, u: TripleProcess, noise: BrownianBundle) -> ResidualProcess:
    _check_shapes(problem, u, noise)
    grid, dW = u.grid, noise.increments
    N = grid.steps
    x, y, z = u.X, u.Y, u.Z
    drift = np.stack([problem.drift(grid.time(j), x[j]) for j in range(N)], axis=0)
    diff = np.stack([problem.diffusion(grid.time(j), x[j]) for j in range(N)], axis=0)
    r_X = x - x[:1] - _forward_sum(drift, diff, dW, grid.dt)

    f = np.stack([problem.driver(grid.time(j), x[j], y[j], z[j]) for j in range(N)], axis=0)
    tail = _backward_sum(f * grid.dt - _stochastic_integrand(z, dW))
    r_Y = y - problem.terminal(x[N])[None] - tail
    return ResidualProcess(r_X, r_Y)


def gateaux_derivative(problem: FbsdeProblem, u: TripleProcess, h: TripleProcess,
                       noise: BrownianBundle) -> ResidualProcess:
    """Directional derivative of :func:`evaluate_residual` at ``u`` along ``h``."""
    _check_shapes(problem, u, noise)
    _check_shapes(problem, h, noise)
    if h.grid != u.grid:
        raise InvalidArgumentError("direction and base point live on different grids")
    grid, dW = u.grid, noise.increments
    N = grid.steps
    x, y, z = u.X, u.Y, u.Z
    hx, hy, hz = h.X, h.Y, h.Z

    bx = np.stack([np.einsum("pde,pe->pd", problem.drift_jac(grid.time(j), x[j]), hx[j])
                   for j in range(N)], axis=0)
    sx = np.stack([np.einsum("pdke,pe->pdk", problem.diffusion_jac(grid.time(j), x[j]), hx[j])
                   for j in range(N)], axis=0)
    d_X = hx - hx[:1] - _forward_sum(bx, sx, dW, grid.dt)

    def f_dir(j):
        t = grid.time(j)
        args = (t, x[j], y[j], z[j])
        return (np.einsum("pmd,pd->pm", problem.driver_jac_x(*args), hx[j])
                + np.einsum("pmn,pn->pm", problem.driver_jac_y(*args), hy[j])
                + np.einsum("pmnk,pnk->pm", problem.driver_jac_z(*args), hz[j]))

    fd = np.stack([f_dir(j) for j in range(N)], axis=0)
    phi_dir = np.einsum("pmd,pd->pm", problem.terminal_jac(x[N]), hx[N])
    d_Y = hy - phi_dir[None] - _backward_sum(fd * grid.dt - _stochastic_integrand(hz, dW))
    return ResidualProcess(d_X, d_Y)


def remainder(g, g_jac, base: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """First-order Taylor remainder ``g(base + delta) - g(base) - g'(base) delta``.

    ``base`` and ``delta`` carry the input vector on their last axis;
    ``g_jac(base)`` returns the Jacobian with shape ``(..., q, p)``.
    """
    base = np.asarray(base, dtype=float)
    delta = np.asarray(delta, dtype=float)
    lin = np.einsum("...qp,...p->...q", g_jac(base), delta)
    return g(base + delta) - g(base) - lin


def remainder_decomposition(problem: FbsdeProblem, u: TripleProcess, du: TripleProcess,
                            noise: BrownianBundle) -> ResidualProcess:
    """Aggregate the coefficient remainders into the two residual rows.

    Equals ``F(u + du) - F(u) - F'(u) du`` node by node.
    """
    _check_shapes(problem, u, noise)
    grid, dW = u.grid, noise.increments
    N = grid.steps
    x, dx = u.X, du.X
    Rb = np.stack([remainder(lambda p, t=grid.time(j): problem.drift(t, p),
                             lambda p, t=grid.time(j): problem.drift_jac(t, p), x[j], dx[j])
                   for j in range(N)], axis=0)
    Rs = np.stack([remainder(lambda p, t=grid.time(j): problem.diffusion_flat(t, p),
                             lambda p, t=grid.time(j): problem.diffusion_jac_flat(t, p),
                             x[j], dx[j]).reshape(-1, problem.d, problem.k)
                   for j in range(N)], axis=0)
    r_X = -_forward_sum(Rb, Rs, dW, grid.dt)

    U = problem.join_state(u.X, u.Y, u.Z)
    dU = problem.join_state(du.X, du.Y, du.Z)
    Rf = np.stack([remainder(lambda p, t=grid.time(j): problem.driver_flat(t, p),
                             lambda p, t=grid.time(j): problem.driver_jac_flat(t, p), U[j], dU[j])
                   for j in range(N)], axis=0)
    Rphi = remainder(problem.terminal, problem.terminal_jac, x[N], dx[N])
    r_Y = -Rphi[None] - _backward_sum(Rf * grid.dt)
    return ResidualProcess(r_X, r_Y)
