"""Closed-form constants of the convergence rate bounds.

C1 and C3 contain ``exp(alpha T + C0 / eps)`` and overflow double precision
for moderate derivative bounds, so they are carried in log-space as well.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from .core import DerivativeBounds
from .errors import InvalidArgumentError

__all__ = ["ConstantsReport", "evaluate_constants", "BDG_CONSTANT", "factorial_bound"]

# explicit upper bound on the Burkholder-Davis-Gundy constant
BDG_CONSTANT = 3.0


def _exp_or_inf(v: float) -> float:
    try:
        return math.exp(v)
    except OverflowError:
        return math.inf


@dataclass(frozen=True)
class ConstantsReport:
    c_bsigma: float
    C0: float
    alpha: float
    C1: float
    C3: float
    log_C0: float
    log_C1: float
    log_C3: float
    C0_proof: float
    b_bound: float
    sigma_bound: float
    f_bound: float
    phi_bound: float
    T: float
    eps: float

    def as_dict(self) -> dict:
        return asdict(self)


def evaluate_constants(bounds: DerivativeBounds, T: float, eps: float = 0.5) -> ConstantsReport:
    """Evaluate ``c_{b,sigma}``, ``C0``, ``alpha``, ``C1`` and ``C3``.

    ``C0`` is ``8 c T exp(4 c T)``.  A Gronwall argument that keeps ``T``
    inside the factorial bound instead gives ``8 c exp(4 c T)``, reported as
    ``C0_proof``.  The two agree for ``T = 1``.
    """
    if not (0.0 < eps < 1.0):
        raise InvalidArgumentError(f"eps must lie in (0, 1), got {eps}")
    if not (math.isfinite(T) and T > 0):
        raise InvalidArgumentError(f"T must be positive, got {T}")
    nb, ns, nf, nphi = bounds.b, bounds.sigma, bounds.f, bounds.phi
    c0sq4 = 1.0 + 4.0 * BDG_CONSTANT**2  # 1 + 4 c0^2 = 37

    c = nb + 2.0 * BDG_CONSTANT**2 * ns + ns**2
    if c > 0:
        log_C0 = math.log(8.0 * c * T) + 4.0 * c * T
        C0 = _exp_or_inf(log_C0)
        C0_proof = _exp_or_inf(math.log(8.0 * c) + 4.0 * c * T)
    else:
        log_C0, C0, C0_proof = -math.inf, 0.0, 0.0

    alpha = 2.0 * nf + 4.0 * nf**2 + 12.0 * nf * c0sq4 * max(1.0, T) / eps

    # (C0 T) and C0 / eps enter exponents; an infinite C0 gives infinite logs
    poly = 1.0 + (1.0 + 4.0 * (2.0 + T * C0) * nphi**2) * c0sq4
    log_C1 = -math.log(eps) + math.log(poly) + alpha * T + C0 / eps
    C1 = _exp_or_inf(log_C1)
    log_C3 = max(_logaddexp(log_C1, C0 * T / eps), alpha * T)
    C3 = _exp_or_inf(log_C3)
    return ConstantsReport(
        c_bsigma=c, C0=C0, alpha=alpha, C1=C1, C3=C3,
        log_C0=log_C0, log_C1=log_C1, log_C3=log_C3, C0_proof=C0_proof,
        b_bound=nb, sigma_bound=ns, f_bound=nf, phi_bound=nphi, T=float(T), eps=float(eps),
    )


def _logaddexp(a: float, b: float) -> float:
    if math.isinf(a) and a > 0 or math.isinf(b) and b > 0:
        return math.inf
    hi, lo = max(a, b), min(a, b)
    return hi + math.log1p(math.exp(lo - hi))


def factorial_bound(C0: float, n: int) -> float:
    """``C0**n / n!`` evaluated in log-space."""
    if C0 == 0.0:
        return 1.0 if n == 0 else 0.0
    return _exp_or_inf(n * math.log(C0) - math.lgamma(n + 1))
