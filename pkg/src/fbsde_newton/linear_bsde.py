"""Least-squares Monte Carlo solver for the linear BSDE of one Newton step.

Conditional expectations ``E[. | F_{t_i}]`` are replaced by ridge regressions
on a total-degree polynomial basis ``B`` of a per-node feature vector.  At
each node a single least-squares fit

    Y_{i+1} ~ B(x) c + (B(x) dW_i / sqrt(dt)) g

yields both ``E_i[Y_{i+1} - Z_i dW_i] = B c`` and
``Z_i = E_i[Y_{i+1} dW_i^T] / dt = B g / sqrt(dt)``.  The minimiser targets
the same conditional moments as the martingale-increment estimator
``E_i[Y_{i+1} dW_i^T] / dt`` but without its ``Z^2 (dW^2 - dt) / dt`` noise.
The driver is affine in ``y``, so ``Y_i`` comes from the implicit step
``(I - dt A_y) Y_i = E_i[Y_{i+1} - Z_i dW_i] + dt (a + A_x x + A_z Z_i)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import List, Optional, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .core import BrownianBundle, TimeGrid
from .errors import InvalidArgumentError, SingularRegressionError, StepSizeError

__all__ = [
    "RegressionConfig",
    "RegressionFit",
    "BackwardSolution",
    "regress",
    "solve_linear_bsde",
    "fit_linear_bsde",
]

FEATURE_MAPS = ("joint-state", "current-iterate-state")


@dataclass(frozen=True)
class RegressionConfig:
    degree: int = 2
    features: str = "joint-state"
    ridge: float = 1e-8
    bound: Optional[float] = None  # None: 10x the spread of the terminal values

    def __post_init__(self):
        if int(self.degree) != self.degree or self.degree < 0:
            raise InvalidArgumentError(f"degree must be a nonnegative integer, got {self.degree}")
        if self.features not in FEATURE_MAPS:
            raise InvalidArgumentError(f"feature map must be one of {FEATURE_MAPS}")
        if not (np.isfinite(self.ridge) and self.ridge >= 0):
            raise InvalidArgumentError(f"ridge must be >= 0, got {self.ridge}")
        if self.bound is not None and not (np.isfinite(self.bound) and self.bound > 0):
            raise InvalidArgumentError(f"truncation bound must be finite and > 0, got {self.bound}")


def _monomials(n_features: int, degree: int) -> List[Tuple[int, ...]]:
    exps = []
    for deg in range(degree + 1):
        for combo in combinations_with_replacement(range(n_features), deg):
            e = [0] * n_features
            for j in combo:
                e[j] += 1
            exps.append(tuple(e))
    return exps


def _basis(z: np.ndarray, exponents, degree: int) -> np.ndarray:
    M, p = z.shape
    powers = np.ones((degree + 1, M, p))
    for e in range(1, degree + 1):
        powers[e] = powers[e - 1] * z
    A = np.empty((M, len(exponents)))
    for c, exps in enumerate(exponents):
        col = np.ones(M)
        for j, e in enumerate(exps):
            if e:
                col = col * powers[e, :, j]
        A[:, c] = col
    return A


def _as_matrix(features) -> np.ndarray:
    features = np.asarray(features, dtype=float)
    return features[:, None] if features.ndim == 1 else features


class _Design:
    """Standardised polynomial design matrix with a cached ridge factorisation."""

    def __init__(self, features: np.ndarray, degree: int, ridge: float, linear: int = 0,
                 increments: Optional[np.ndarray] = None):
        features = _as_matrix(features)
        M, n_feat = features.shape
        if not 0 <= linear <= n_feat:
            raise InvalidArgumentError("more linear-only features than features")
        mean = features.mean(axis=0)
        scale = features.std(axis=0)
        keep = []
        for j in range(n_feat):
            if scale[j] <= 1e-12 * (1.0 + abs(mean[j])):
                continue
            if any(np.array_equal(features[:, j], features[:, i]) for i in keep):
                continue
            keep.append(j)
        self.keep = np.array(keep, dtype=int)
        self.mean = mean[self.keep]
        self.scale = scale[self.keep]
        self.degree = degree
        n_poly = sum(1 for j in keep if j < n_feat - linear)
        self.n_poly = n_poly
        # the trailing ``linear`` features only enter as first-order terms
        self.exponents = _monomials(n_poly, degree)
        self.A = self.basis(features)
        # with increments the basis is doubled by B * dW_j columns (see module doc)
        self.D = self.A if increments is None else np.concatenate(
            [self.A] + [self.A * increments[:, j:j + 1] for j in range(increments.shape[1])],
            axis=1)
        P = self.D.shape[1]
        if M < 10 * P:
            raise InvalidArgumentError(
                f"{M} paths are too few for a {P}-function basis (need >= {10 * P})"
            )
        G = self.D.T @ self.D / M
        if ridge == 0.0:
            ev = np.linalg.eigvalsh(G)
            if ev[0] <= 1e-12 * max(ev[-1], 1e-300):
                raise SingularRegressionError(
                    "normal equations are rank deficient; use a ridge parameter > 0"
                )
        # the intercept (column 0, the empty monomial) is not penalised, so
        # constants pass through the regression unshrunk
        G[np.arange(1, P), np.arange(1, P)] += ridge
        try:
            self.factor = cho_factor(G, lower=True, check_finite=True)
        except (LinAlgError, ValueError) as exc:
            raise SingularRegressionError(
                f"normal equations could not be factorised ({exc}); use a ridge parameter > 0"
            ) from exc

    def standardise(self, features: np.ndarray) -> np.ndarray:
        return (_as_matrix(features)[:, self.keep] - self.mean) / self.scale

    def solve(self, targets: np.ndarray) -> np.ndarray:
        return cho_solve(self.factor, self.D.T @ targets / self.D.shape[0])

    def basis(self, features: np.ndarray) -> np.ndarray:
        z = self.standardise(features)
        A = _basis(z[:, :self.n_poly], self.exponents, self.degree)
        if z.shape[1] == self.n_poly:
            return A
        return np.concatenate([A, z[:, self.n_poly:]], axis=1)


@dataclass(frozen=True, eq=False)
class RegressionFit:
    """A fitted conditional-expectation map, evaluable at arbitrary features."""

    design: _Design = field(repr=False)
    coef: np.ndarray
    bound: float = np.inf
    squeeze: bool = False

    def __call__(self, features: np.ndarray) -> np.ndarray:
        out = np.clip(self.design.basis(features) @ self.coef, -self.bound, self.bound)
        return out[:, 0] if self.squeeze else out

    def in_sample(self) -> np.ndarray:
        out = np.clip(self.design.A @ self.coef, -self.bound, self.bound)
        return out[:, 0] if self.squeeze else out


def regress(targets: np.ndarray, features: np.ndarray,
            config: RegressionConfig = RegressionConfig()) -> RegressionFit:
    """Ridge least-squares projection of ``targets`` on a polynomial basis of ``features``."""
    targets = np.asarray(targets, dtype=float)
    squeeze = targets.ndim == 1
    t2 = targets[:, None] if squeeze else targets.reshape(targets.shape[0], -1)
    design = _Design(features, config.degree, config.ridge)
    bound = np.inf if config.bound is None else config.bound
    return RegressionFit(design, design.solve(t2), bound, squeeze)


# ---------------------------------------------------------------------------
# backward sweep


@dataclass(frozen=True, eq=False)
class _NodeFit:
    design: _Design
    coef_mean: np.ndarray
    coef_z: np.ndarray


@dataclass(frozen=True, eq=False)
class BackwardSolution:
    Y: np.ndarray
    Z: np.ndarray
    fits: List[Optional[_NodeFit]]
    bound: float
    config: RegressionConfig

    def replay(self, lin, X_next: np.ndarray, grid: TimeGrid, i: int):
        """Recompute ``(Y_i, Z_i)`` from the stored node-``i`` coefficients.

        Only node-``i`` data of ``X_next`` and of the linearisation point
        enter, which is what makes the solution adapted.
        """
        if i == grid.steps:
            return lin.terminal(X_next[i]), None
        fit = self.fits[i]
        feats = node_features(lin, X_next, i, self.config)
        B = fit.design.basis(feats)
        m, k = self.Y.shape[2], self.Z.shape[3]
        Zi = np.clip(B @ fit.coef_z, -self.bound, self.bound).reshape(-1, m, k)
        mean = np.clip(B @ fit.coef_mean, -self.bound, self.bound)
        return _implicit_step(lin, i, X_next[i], mean, Zi, grid.dt), Zi


def node_features(lin, X_next: np.ndarray, i: int, config: RegressionConfig) -> np.ndarray:
    """Regression inputs at node ``i``; see :func:`linear_feature_count`."""
    if config.features == "current-iterate-state":
        return X_next[i]
    ref = lin.reference
    return np.concatenate([X_next[i], ref.X[i], ref.Y[i]], axis=1)


def linear_feature_count(lin, config: RegressionConfig) -> int:
    """Trailing feature columns that enter the basis only linearly.

    The previous ``Y`` iterate is itself a regression output on the previous
    state, so raising it to powers would compound the basis degree from one
    Newton step to the next and the iteration would never settle.
    """
    return 0 if config.features == "current-iterate-state" else lin.reference.Y.shape[2]


def _implicit_step(lin, i, x, mean, Zi, dt):
    offset, Ax, Ay, Az = lin.driver_coefficients(i)
    rhs = mean + dt * (offset + np.einsum("pmd,pd->pm", Ax, x) + np.einsum("pmnk,pnk->pm", Az, Zi))
    m = rhs.shape[1]
    lhs = np.eye(m) - dt * Ay
    if m == 1:
        det = lhs[:, 0, 0]
        if np.any(np.abs(det) < 1e-10):
            raise StepSizeError("1 - dt * f_y vanishes on some path; increase the number of steps N")
        return rhs / det[:, None]
    det = np.linalg.det(lhs)
    if np.any(np.abs(det) < 1e-10):
        raise StepSizeError("I - dt * f_y is singular on some path; increase the number of steps N")
    return np.linalg.solve(lhs, rhs[..., None])[..., 0]


def fit_linear_bsde(lin, X_next: np.ndarray, grid: TimeGrid, noise: BrownianBundle,
                    config: RegressionConfig = RegressionConfig()) -> BackwardSolution:
    """Backward induction for the linear BSDE with driver ``lin.driver_coefficients``."""
    X_next = np.asarray(X_next, dtype=float)
    n, M, _ = X_next.shape
    N, dt = grid.steps, grid.dt
    if n != N + 1 or noise.grid != grid or noise.paths != M:
        raise InvalidArgumentError("forward iterate, grid and noise disagree in shape")
    ref = lin.reference
    if ref.X.shape[1] != M or ref.grid != grid:
        raise InvalidArgumentError("linearisation point lives on a different grid or path set")
    m, k = ref.Y.shape[2], ref.Z.shape[3]

    Y = np.empty((N + 1, M, m))
    Z = np.zeros((N + 1, M, m, k))
    Y[N] = lin.terminal(X_next[N])
    if config.bound is not None:
        bound = float(config.bound)
    else:
        term = Y[N]
        bound = 10.0 * max(float(np.ptp(term)), float(np.max(np.abs(term))), 1.0)

    fits: List[Optional[_NodeFit]] = [None] * (N + 1)
    n_linear = linear_feature_count(lin, config)
    sqrt_dt = np.sqrt(dt)
    for i in range(N - 1, -1, -1):
        dW = noise.increments[i]
        design = _Design(node_features(lin, X_next, i, config), config.degree, config.ridge,
                         n_linear, increments=dW / sqrt_dt)
        coef = design.solve(Y[i + 1])
        P = design.A.shape[1]
        coef_mean = coef[:P]
        coef_z = (coef[P:].reshape(k, P, m).transpose(1, 2, 0) / sqrt_dt).reshape(P, m * k)
        Zi = np.clip(design.A @ coef_z, -bound, bound).reshape(M, m, k)
        mean = np.clip(design.A @ coef_mean, -bound, bound)
        Y[i] = _implicit_step(lin, i, X_next[i], mean, Zi, dt)
        Z[i] = Zi
        # replay rebuilds the basis; keeping M x P per node is too costly
        design.A = design.D = None
        fits[i] = _NodeFit(design, coef_mean, coef_z)
    Z[N] = Z[N - 1]
    return BackwardSolution(Y, Z, fits, bound, config)


def solve_linear_bsde(lin, X_next: np.ndarray, grid: TimeGrid, noise: BrownianBundle,
                      config: RegressionConfig = RegressionConfig()) -> Tuple[np.ndarray, np.ndarray]:
    """Return ``(Y, Z)`` paths of the linear BSDE defined by ``lin``."""
    sol = fit_linear_bsde(lin, X_next, grid, noise, config)
    return sol.Y, sol.Z
