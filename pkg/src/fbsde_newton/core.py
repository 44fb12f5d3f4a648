"""Time grids, reproducible Brownian noise, problem definitions and norm estimators.

Array conventions used throughout the package (``M`` paths, ``N`` steps):

* forward state ``X``: ``(N + 1, M, d)``
* backward value ``Y``: ``(N + 1, M, m)``
* control ``Z``: ``(N + 1, M, m, k)``; the last node is carried for shape
  symmetry but never enters an integral (left-endpoint sums stop at ``N - 1``)
* Brownian increments ``dW``: ``(N, M, k)``

Arrays are node-major so that the cross-sectional slice ``X[i]`` used by the
time-stepping and regression loops is contiguous.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import ndtri

from .errors import InvalidArgumentError, NumericalBlowupError

__all__ = [
    "TimeGrid",
    "BrownianBundle",
    "DerivativeBounds",
    "FbsdeProblem",
    "TripleProcess",
    "NormReport",
    "make_noise",
    "estimate_s2_norm",
    "estimate_h2_norm",
    "estimate_weighted_norm",
    "norm_report",
    "combined_norm",
    "combined_distance",
]


def _readonly(a, dtype=float) -> np.ndarray:
    view = np.asarray(a, dtype=dtype).view()
    view.flags.writeable = False
    return view


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_i = i T / N`` on ``[0, T]``."""

    horizon: float
    steps: int

    def __post_init__(self):
        if not np.isfinite(self.horizon) or self.horizon <= 0:
            raise InvalidArgumentError(f"horizon must be positive, got {self.horizon}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise InvalidArgumentError(f"steps must be a positive integer, got {self.steps}")
        object.__setattr__(self, "horizon", float(self.horizon))
        object.__setattr__(self, "steps", int(self.steps))

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt

    def time(self, i: int) -> float:
        return i * self.dt

    def refine(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.horizon, self.steps * int(factor))


# ---------------------------------------------------------------------------
# counter-based normal generator
#
# Each standard normal is a pure function of (seed, path, fine step, component):
# a SplitMix64 stream keyed per path, indexed by the counter
# ``fine_step * 2**16 + component``, mapped to (0, 1) and through the normal
# inverse CDF.  No state is carried between draws, so chunking and ordering
# cannot change a single bit.

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_SEED_SALT = np.uint64(0xD1B54A32D192ED03)
_MAX_COMPONENTS = 1 << 16
_MASK64 = (1 << 64) - 1


def _mix64(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * _MIX1
    z = z ^ (z >> np.uint64(27))
    z = z * _MIX2
    return z ^ (z >> np.uint64(31))


def _path_keys(seed: int, paths: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        base = _mix64(np.array([seed], dtype=np.uint64) ^ _SEED_SALT)
        return _mix64(base + (paths.astype(np.uint64) + np.uint64(1)) * _GOLDEN)


def _standard_normals(seed: int, path_lo: int, path_hi: int, fine_steps: int, k: int) -> np.ndarray:
    keys = _path_keys(seed, np.arange(path_lo, path_hi, dtype=np.uint64))
    counter = (
        np.arange(fine_steps, dtype=np.uint64)[:, None] * np.uint64(_MAX_COMPONENTS)
        + np.arange(k, dtype=np.uint64)[None, :]
        + np.uint64(1)
    )
    with np.errstate(over="ignore"):
        z = _mix64(keys[:, None, None] + counter[None, :, :] * _GOLDEN)
    u = ((z >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(u)


_CHUNK_PATHS = 4096


def _chunks(total: int):
    return [(lo, min(total, lo + _CHUNK_PATHS)) for lo in range(0, total, _CHUNK_PATHS)]


def map_path_chunks(fn: Callable[[int, int], np.ndarray], paths: int, workers: int = 1,
                    axis: int = 0) -> np.ndarray:
    """Evaluate ``fn(lo, hi)`` over contiguous path ranges and join them along ``axis``.

    ``fn`` must be elementwise in the path index; the output is then identical
    for every worker count.
    """
    spans = _chunks(paths)
    if workers <= 1 or len(spans) == 1:
        parts = [fn(lo, hi) for lo, hi in spans]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda s: fn(*s), spans))
    return np.concatenate(parts, axis=axis)


def _aggregate(inc: np.ndarray, factor: int) -> np.ndarray:
    """Sum consecutive blocks of ``factor`` steps, always in ascending order."""
    if factor == 1:
        return np.ascontiguousarray(inc)
    blocks = inc.reshape((inc.shape[0] // factor, factor) + inc.shape[1:])
    acc = blocks[:, 0].copy()
    for j in range(1, factor):
        acc += blocks[:, j]
    return acc


@dataclass(frozen=True, eq=False)
class BrownianBundle:
    """Brownian increments on ``grid`` for ``paths`` independent paths.

    ``substeps`` records how many counter-level increments were summed into
    each step; a bundle built with ``substeps=16`` is exactly the 16-fold
    aggregation of the bundle on the 16x finer grid with the same seed.
    """

    seed: int
    grid: TimeGrid
    increments: np.ndarray
    substeps: int = 1

    def __post_init__(self):
        inc = _readonly(self.increments)
        if inc.ndim != 3 or inc.shape[0] != self.grid.steps:
            raise InvalidArgumentError(
                f"increments must have shape ({self.grid.steps}, M, k), got {inc.shape}"
            )
        object.__setattr__(self, "increments", inc)

    @property
    def paths(self) -> int:
        return self.increments.shape[1]

    @property
    def k(self) -> int:
        return self.increments.shape[2]

    def brownian_paths(self) -> np.ndarray:
        """Cumulative sums ``W(t_i)`` with ``W(0) = 0``, shape ``(N + 1, M, k)``."""
        W = np.zeros((self.grid.steps + 1, self.paths, self.k))
        np.cumsum(self.increments, axis=0, out=W[1:])
        return W

    def coarsen(self, factor: int) -> "BrownianBundle":
        factor = int(factor)
        if factor < 1 or self.grid.steps % factor:
            raise InvalidArgumentError(f"cannot coarsen {self.grid.steps} steps by {factor}")
        N = self.grid.steps
        return BrownianBundle(self.seed, TimeGrid(self.grid.horizon, N // factor),
                              _aggregate(self.increments, factor), self.substeps * factor)

    def take_paths(self, paths: int) -> "BrownianBundle":
        if not 1 <= paths <= self.paths:
            raise InvalidArgumentError(f"cannot take {paths} of {self.paths} paths")
        return BrownianBundle(self.seed, self.grid, self.increments[:, :paths], self.substeps)

    def refined(self, factor: int, paths: Optional[int] = None, workers: int = 1) -> "BrownianBundle":
        """Regenerate the bundle on a ``factor``-times finer grid from its keys.

        Only possible when the bundle was aggregated from at least ``factor``
        substeps.  The first ``self.paths`` paths of the result coarsen back to
        ``self``, bit for bit when ``factor`` equals ``self.substeps``.
        """
        factor = int(factor)
        if factor < 1 or self.substeps % factor:
            raise InvalidArgumentError(
                f"bundle has {self.substeps} substeps per step; cannot refine by {factor}"
            )
        return make_noise(self.seed, self.grid.refine(factor), paths or self.paths, self.k,
                          substeps=self.substeps // factor, workers=workers)


def make_noise(seed: int, grid: TimeGrid, paths: int, k: int, substeps: int = 1,
               workers: int = 1) -> BrownianBundle:
    """Draw i.i.d. ``N(0, dt)`` increments keyed by (seed, path, step, component)."""
    if int(paths) != paths or paths < 1:
        raise InvalidArgumentError(f"paths must be >= 1, got {paths}")
    if int(k) != k or not 1 <= k < _MAX_COMPONENTS:
        raise InvalidArgumentError(f"wiener dimension must be >= 1, got {k}")
    if int(substeps) != substeps or substeps < 1:
        raise InvalidArgumentError(f"substeps must be >= 1, got {substeps}")
    if int(seed) != seed or not 0 <= seed <= _MASK64:
        raise InvalidArgumentError(f"seed must be an unsigned 64-bit integer, got {seed}")
    seed, paths, k, substeps = int(seed), int(paths), int(k), int(substeps)
    N = grid.steps
    scale = np.sqrt(grid.horizon / (N * substeps))

    def block(lo, hi):
        z = _standard_normals(seed, lo, hi, N * substeps, k) * scale
        return _aggregate(z.transpose(1, 0, 2), substeps)

    return BrownianBundle(seed, grid, map_path_chunks(block, paths, workers, axis=1), substeps)


# ---------------------------------------------------------------------------
# problem definition


@dataclass(frozen=True)
class DerivativeBounds:
    """Declared sup-norms (Frobenius) of the coefficient Jacobians."""

    b: float
    sigma: float
    f: float
    phi: float

    def __post_init__(self):
        for name in ("b", "sigma", "f", "phi"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise InvalidArgumentError(f"derivative bound {name} must be finite and >= 0")


@dataclass(frozen=True, eq=False)
class FbsdeProblem:
    """Decoupled FBSDE with coefficients that are deterministic in ``(t, state)``.

    All callables are vectorised over a leading path axis: ``drift(t, x)``
    takes ``x`` of shape ``(M, d)`` and returns ``(M, d)``;
    ``diffusion -> (M, d, k)``; ``driver(t, x, y, z) -> (M, m)`` with
    ``z`` of shape ``(M, m, k)``; ``terminal(x) -> (M, m)``.  Jacobians:
    ``drift_jac -> (M, d, d)``, ``diffusion_jac -> (M, d, k, d)``,
    ``driver_jac_x -> (M, m, d)``, ``driver_jac_y -> (M, m, m)``,
    ``driver_jac_z -> (M, m, m, k)``, ``terminal_jac -> (M, m, d)``.
    """

    d: int
    m: int
    k: int
    x0: np.ndarray
    horizon: float
    drift: Callable
    diffusion: Callable
    driver: Callable
    terminal: Callable
    drift_jac: Callable
    diffusion_jac: Callable
    driver_jac_x: Callable
    driver_jac_y: Callable
    driver_jac_z: Callable
    terminal_jac: Callable
    bounds: DerivativeBounds
    name: str = "problem"

    def __post_init__(self):
        for dim in ("d", "m", "k"):
            if int(getattr(self, dim)) < 1:
                raise InvalidArgumentError(f"dimension {dim} must be positive")
        x0 = _readonly(np.atleast_1d(self.x0))
        if x0.shape != (self.d,):
            raise InvalidArgumentError(f"x0 must have shape ({self.d},), got {x0.shape}")
        object.__setattr__(self, "x0", x0)
        if not self.horizon > 0:
            raise InvalidArgumentError("horizon must be positive")

    def grid(self, steps: int) -> TimeGrid:
        return TimeGrid(self.horizon, steps)

    # flattened views used by the remainder machinery: u = (x, y, vec z)

    def split_state(self, u: np.ndarray):
        d, m, k = self.d, self.m, self.k
        return u[..., :d], u[..., d:d + m], u[..., d + m:].reshape(u.shape[:-1] + (m, k))

    def join_state(self, x, y, z) -> np.ndarray:
        return np.concatenate([x, y, z.reshape(z.shape[:-2] + (-1,))], axis=-1)

    def driver_flat(self, t: float, u: np.ndarray) -> np.ndarray:
        return self.driver(t, *self.split_state(u))

    def driver_jac_flat(self, t: float, u: np.ndarray) -> np.ndarray:
        x, y, z = self.split_state(u)
        jz = self.driver_jac_z(t, x, y, z)
        return np.concatenate(
            [self.driver_jac_x(t, x, y, z), self.driver_jac_y(t, x, y, z),
             jz.reshape(jz.shape[:-2] + (-1,))],
            axis=-1,
        )

    def diffusion_flat(self, t, x):
        s = self.diffusion(t, x)
        return s.reshape(s.shape[0], -1)

    def diffusion_jac_flat(self, t, x):
        j = self.diffusion_jac(t, x)
        return j.reshape(j.shape[0], -1, self.d)

    def check_derivatives(self, samples: int = 10_000, seed: int = 0, scale: float = 3.0,
                          rtol: float = 1e-5, fd_step: float = 1e-5) -> dict:
        """Spot-check Jacobians against central differences and the declared bounds.

        Returns the largest sampled Frobenius norm per coefficient and the
        worst finite-difference mismatch; raises ``InvalidArgumentError`` if
        either check fails.
        """
        rng = np.random.default_rng(seed)
        d, m, k = self.d, self.m, self.k
        t = rng.uniform(0.0, self.horizon)
        x = scale * rng.standard_normal((samples, d))
        u = scale * rng.standard_normal((samples, d + m + m * k))

        def fd_jac(g, point):
            cols = []
            for j in range(point.shape[1]):
                e = np.zeros(point.shape[1])
                e[j] = fd_step
                cols.append((g(point + e) - g(point - e)) / (2 * fd_step))
            return np.stack(cols, axis=-1)

        cases = {
            "b": (lambda p: self.drift(t, p), lambda p: self.drift_jac(t, p), x, self.bounds.b),
            "sigma": (lambda p: self.diffusion_flat(t, p), lambda p: self.diffusion_jac_flat(t, p),
                      x, self.bounds.sigma),
            "f": (lambda p: self.driver_flat(t, p), lambda p: self.driver_jac_flat(t, p),
                  u, self.bounds.f),
            "phi": (self.terminal, self.terminal_jac, x, self.bounds.phi),
        }
        report = {}
        for name, (g, jac, point, bound) in cases.items():
            J = jac(point).reshape(samples, -1, point.shape[1])
            fd = fd_jac(lambda p: g(p).reshape(samples, -1), point)
            mismatch = np.max(np.abs(fd - J) / np.maximum(1.0, np.abs(J)))
            sup = float(np.max(np.sqrt(np.sum(J**2, axis=(1, 2)))))
            if mismatch > rtol:
                raise InvalidArgumentError(
                    f"{self.name}: Jacobian of {name} disagrees with central differences ({mismatch:.3g})"
                )
            if sup > bound * (1 + 1e-12):
                raise InvalidArgumentError(
                    f"{self.name}: sampled |{name}'| = {sup:.6g} exceeds declared bound {bound}"
                )
            report[name] = {"sup_norm": sup, "fd_mismatch": float(mismatch)}
        grid = self.grid(16)
        zero_x = np.zeros((1, d))
        for t_i in grid.nodes:
            vals = (self.drift(t_i, zero_x), self.diffusion(t_i, zero_x),
                    self.driver(t_i, zero_x, np.zeros((1, m)), np.zeros((1, m, k))))
            if not all(np.all(np.isfinite(v)) for v in vals):
                raise InvalidArgumentError(f"{self.name}: coefficients at the origin are not finite")
        return report


# ---------------------------------------------------------------------------
# sampled processes


@dataclass(frozen=True, eq=False)
class TripleProcess:
    """Sampled ``(X, Y, Z)`` on a common grid and path set."""

    grid: TimeGrid
    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray

    def __post_init__(self):
        X, Y, Z = _readonly(self.X), _readonly(self.Y), _readonly(self.Z)
        n = self.grid.steps + 1
        if X.ndim != 3 or Y.ndim != 3 or Z.ndim != 4:
            raise InvalidArgumentError("expected X (N+1,M,d), Y (N+1,M,m), Z (N+1,M,m,k)")
        if not (X.shape[:2] == Y.shape[:2] == Z.shape[:2] == (n, X.shape[1])):
            raise InvalidArgumentError(
                f"path/node axes disagree: X{X.shape} Y{Y.shape} Z{Z.shape} for {n} nodes"
            )
        if Z.shape[2] != Y.shape[2]:
            raise InvalidArgumentError("Z rows must match the dimension of Y")
        for name, a in (("X", X), ("Y", Y), ("Z", Z)):
            if not np.all(np.isfinite(a)):
                raise NumericalBlowupError(f"non-finite entries in {name}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "Z", Z)

    @property
    def paths(self) -> int:
        return self.X.shape[1]

    def _check_compatible(self, other):
        if self.grid != other.grid or self.X.shape != other.X.shape or \
                self.Y.shape != other.Y.shape or self.Z.shape != other.Z.shape:
            raise InvalidArgumentError("triple processes live on different grids or shapes")

    def __add__(self, other: "TripleProcess") -> "TripleProcess":
        self._check_compatible(other)
        return TripleProcess(self.grid, self.X + other.X, self.Y + other.Y, self.Z + other.Z)

    def __sub__(self, other: "TripleProcess") -> "TripleProcess":
        self._check_compatible(other)
        return TripleProcess(self.grid, self.X - other.X, self.Y - other.Y, self.Z - other.Z)

    def __mul__(self, c: float) -> "TripleProcess":
        return TripleProcess(self.grid, c * self.X, c * self.Y, c * self.Z)

    __rmul__ = __mul__

    def take_paths(self, paths: int) -> "TripleProcess":
        return TripleProcess(self.grid, self.X[:, :paths], self.Y[:, :paths], self.Z[:, :paths])

    def downsample(self, factor: int) -> "TripleProcess":
        """Keep every ``factor``-th node (the grid must divide evenly)."""
        if self.grid.steps % factor:
            raise InvalidArgumentError(f"cannot downsample {self.grid.steps} steps by {factor}")
        grid = TimeGrid(self.grid.horizon, self.grid.steps // factor)
        return TripleProcess(grid, self.X[::factor], self.Y[::factor], self.Z[::factor])

    @classmethod
    def zeros_like_backward(cls, X: np.ndarray, grid: TimeGrid, m: int, k: int) -> "TripleProcess":
        n, M, _ = X.shape
        return cls(grid, X, np.zeros((n, M, m)), np.zeros((n, M, m, k)))


# ---------------------------------------------------------------------------
# norm estimators


def _squared_pointwise(proc: np.ndarray) -> np.ndarray:
    proc = np.asarray(proc, dtype=float)
    if proc.ndim < 2 or proc.shape[0] == 0 or proc.shape[1] == 0:
        raise InvalidArgumentError("process must be indexed by (node, path, ...) and non-empty")
    sq = proc * proc
    return sq.reshape(proc.shape[0], proc.shape[1], -1).sum(axis=2)


def _left_endpoint(sq: np.ndarray, grid: TimeGrid) -> np.ndarray:
    n = sq.shape[0]
    if n == grid.steps + 1:
        return sq[:-1]
    if n == grid.steps:
        return sq
    raise InvalidArgumentError(f"process has {n} nodes; grid has {grid.steps} steps")


def estimate_s2_norm(proc: np.ndarray) -> float:
    """``sqrt(E[max_i |Y(t_i)|^2])`` with the sup taken over grid nodes."""
    sq = _squared_pointwise(proc)
    return float(np.sqrt(np.mean(np.max(sq, axis=0))))


def estimate_h2_norm(proc: np.ndarray, grid: TimeGrid) -> float:
    """``sqrt(E[sum_i |Z(t_i)|^2 dt])`` over the left endpoints ``i < N``."""
    sq = _left_endpoint(_squared_pointwise(proc), grid)
    return float(np.sqrt(np.mean(np.sum(sq, axis=0)) * grid.dt))


def estimate_weighted_norm(Y: np.ndarray, Z: np.ndarray, alpha: float, grid: TimeGrid,
                           normalize: bool = False) -> float:
    """Exponentially weighted S2/H2 norm of ``(Y, Z)`` with weight ``exp(alpha t)``.

    With ``normalize=True`` the result is divided by the square root of the
    largest weight on the grid, which keeps it representable when
    ``alpha * T`` is in the hundreds; ratios between processes are unchanged.
    """
    if not np.isfinite(alpha):
        raise InvalidArgumentError(f"alpha must be finite, got {alpha}")
    t = grid.nodes
    shift = float(np.max(alpha * t))
    # shift the weights only when needed: unshifted weights keep the estimate
    # exactly monotone in alpha
    if not normalize and shift < 700.0:
        shift = 0.0
    w = np.exp(alpha * t - shift)
    sy = _squared_pointwise(Y)
    sz = _left_endpoint(_squared_pointwise(Z), grid)
    if sy.shape[0] != t.size:
        raise InvalidArgumentError("Y must be sampled on every grid node")
    total = (np.mean(np.max(w[:, None] * sy, axis=0))
             + np.mean(np.sum(w[:-1, None] * sz, axis=0)) * grid.dt)
    if normalize:
        return float(np.sqrt(total))
    return float(np.sqrt(total) * np.exp(0.5 * shift))


@dataclass(frozen=True)
class NormReport:
    s2_X: float
    s2_Y: float
    h2_Z: float
    alpha: float
    weighted_YZ: float


def norm_report(Y: np.ndarray, Z: np.ndarray, alpha: float, grid: TimeGrid,
                X: Optional[np.ndarray] = None) -> NormReport:
    return NormReport(
        s2_X=estimate_s2_norm(X) if X is not None else 0.0,
        s2_Y=estimate_s2_norm(Y),
        h2_Z=estimate_h2_norm(Z, grid),
        alpha=float(alpha),
        weighted_YZ=estimate_weighted_norm(Y, Z, alpha, grid),
    )


def combined_norm(u: TripleProcess) -> float:
    """``sqrt(|X|_S2^2 + |Y|_S2^2 + |Z|_H2^2)``."""
    return float(np.sqrt(estimate_s2_norm(u.X) ** 2 + estimate_s2_norm(u.Y) ** 2
                         + estimate_h2_norm(u.Z, u.grid) ** 2))


def combined_distance(a: TripleProcess, b: TripleProcess) -> float:
    """``combined_norm(a - b)`` without materialising the difference triple."""
    a._check_compatible(b)
    return float(np.sqrt(estimate_s2_norm(a.X - b.X) ** 2 + estimate_s2_norm(a.Y - b.Y) ** 2
                         + estimate_h2_norm(a.Z - b.Z, a.grid) ** 2))
