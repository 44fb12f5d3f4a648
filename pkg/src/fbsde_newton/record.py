"""Per-iteration convergence bookkeeping shared by the forward and Newton loops."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

__all__ = ["ConvergenceRecord", "CSV_COLUMNS", "FLOOR_MULTIPLE"]

CSV_COLUMNS = ("iter", "err_X", "err_Y", "err_Z", "combined", "weighted_alpha", "ratio",
               "residual", "succ_diff")

# A ratio e_n / e_{n-1} is "pre-floor" when e_{n-1} exceeds this multiple of
# the floor; the floor then perturbs the ratio by at most 1 / FLOOR_MULTIPLE.
FLOOR_MULTIPLE = 10.0

_NAN = float("nan")


@dataclass
class ConvergenceRecord:
    """Error history of an iteration measured against an oracle.

    Index ``n`` refers to the iterate ``u_n``; entry 0 is the starting point.
    ``weighted_alpha`` holds the alpha-weighted norm of ``(Y - Y_n, Z - Z_n)``
    normalised by ``exp(alpha T / 2)`` (see ``core.estimate_weighted_norm``).
    """

    method: str
    err_X: List[float] = field(default_factory=list)
    err_Y: List[float] = field(default_factory=list)
    err_Z: List[float] = field(default_factory=list)
    combined: List[float] = field(default_factory=list)
    weighted_alpha: List[float] = field(default_factory=list)
    residual: List[float] = field(default_factory=list)
    succ_diff: List[float] = field(default_factory=list)
    bound: List[float] = field(default_factory=list)
    floor: float = _NAN
    meta: Dict[str, object] = field(default_factory=dict)

    def append(self, *, err_X, err_Y=_NAN, err_Z=_NAN, combined=None, weighted_alpha=_NAN,
               residual=_NAN, succ_diff=_NAN, bound=_NAN):
        if combined is None:
            parts = [e for e in (err_X, err_Y, err_Z) if not math.isnan(e)]
            combined = math.sqrt(sum(e * e for e in parts))
        self.err_X.append(float(err_X))
        self.err_Y.append(float(err_Y))
        self.err_Z.append(float(err_Z))
        self.combined.append(float(combined))
        self.weighted_alpha.append(float(weighted_alpha))
        self.residual.append(float(residual))
        self.succ_diff.append(float(succ_diff))
        self.bound.append(float(bound))

    def __len__(self):
        return len(self.combined)

    @property
    def ratio(self) -> List[float]:
        out = [_NAN]
        for prev, cur in zip(self.combined, self.combined[1:]):
            out.append(cur / prev if prev > 0 else _NAN)
        return out

    @property
    def combined_sq(self) -> List[float]:
        return [e * e for e in self.combined]

    def pre_floor(self, multiple: float = FLOOR_MULTIPLE) -> List[int]:
        """Iteration indices ``n >= 1`` whose predecessor error is above ``multiple * floor``."""
        floor = 0.0 if math.isnan(self.floor) else self.floor
        return [n for n in range(1, len(self)) if self.combined[n - 1] > multiple * floor]

    def pre_floor_ratios(self, multiple: float = FLOOR_MULTIPLE) -> List[float]:
        r = self.ratio
        return [r[n] for n in self.pre_floor(multiple)]

    def rows(self):
        r = self.ratio
        for n in range(len(self)):
            yield (n, self.err_X[n], self.err_Y[n], self.err_Z[n], self.combined[n],
                   self.weighted_alpha[n], r[n], self.residual[n], self.succ_diff[n])

    def to_dict(self) -> dict:
        out = asdict(self)
        out["ratio"] = self.ratio
        out["combined_sq"] = self.combined_sq
        out["pre_floor"] = self.pre_floor()
        return out

    def long_format(self) -> List[dict]:
        """Tidy ``(iter, metric, value)`` rows for plotting tools."""
        rows = []
        r = self.ratio
        for n in range(len(self)):
            for name in CSV_COLUMNS[1:]:
                value = r[n] if name == "ratio" else getattr(self, name)[n]
                rows.append({"method": self.method, "iter": n, "metric": name, "value": value})
        return rows

    def first_violation(self, eps: float, slack: float = 0.1,
                        multiple: float = FLOOR_MULTIPLE) -> Optional[str]:
        r = self.ratio
        for n in self.pre_floor(multiple):
            if not r[n] <= eps + slack:
                return (f"{self.method}: ratio {r[n]:.4f} at iteration {n} exceeds "
                        f"{eps + slack:.4f} (error {self.combined[n - 1]:.4g} -> "
                        f"{self.combined[n]:.4g}, floor {self.floor:.4g})")
        return None
