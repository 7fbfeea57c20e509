"""The additive clock ``Gamma(t) = int_0^t vol(s)**-2 ds`` and its inverse ``A``.

Two representations share one interface:

* ``"piecewise"``: built from a :class:`~volstop.chain.ChainPath`; ``Gamma`` is
  piecewise linear and both directions are closed form.
* ``"sampled"``: built from volatility samples on a uniform grid; ``Gamma`` is
  the cumulative trapezoid rule and ``A`` is linear interpolation of the table.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .chain import ChainPath
from .errors import HorizonExceeded, NonpositiveSample, RangeExceeded, ValidationError


@dataclass(frozen=True)
class TimeChangePath:
    kind: str
    knots: np.ndarray  # times on the volatility path's own clock
    gamma_knots: np.ndarray  # Gamma (original clock) at the knots
    vol: np.ndarray  # per-segment level (piecewise) or per-knot sample (sampled)

    @property
    def horizon(self) -> float:
        return float(self.knots[-1])

    @property
    def gamma_max(self) -> float:
        return float(self.gamma_knots[-1])

    def gamma(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0) or np.any(t > self.horizon):
            raise HorizonExceeded(f"time change covers t in [0, {self.horizon}]")
        if self.kind == "sampled":
            return np.interp(t, self.knots, self.gamma_knots)
        k = np.clip(np.searchsorted(self.knots, t, side="right") - 1, 0, self.vol.size - 1)
        return self.gamma_knots[k] + (t - self.knots[k]) / self.vol[k] ** 2

    def inverse(self, s):
        """``A(s)``: the path-clock time at which ``Gamma`` reaches ``s``."""
        s = np.asarray(s, dtype=float)
        if np.any(s < 0) or np.any(s > self.gamma_max):
            raise RangeExceeded(f"inverse covers s in [0, {self.gamma_max}]")
        if self.kind == "sampled":
            return np.interp(s, self.gamma_knots, self.knots)
        k = np.clip(np.searchsorted(self.gamma_knots, s, side="right") - 1, 0, self.vol.size - 1)
        return self.knots[k] + (s - self.gamma_knots[k]) * self.vol[k] ** 2

    def volatility(self, t):
        """Volatility level in force at path-clock time ``t``."""
        t = np.asarray(t, dtype=float)
        if np.any(t < 0) or np.any(t > self.horizon):
            raise HorizonExceeded(f"time change covers t in [0, {self.horizon}]")
        if self.kind == "sampled":
            return np.interp(t, self.knots, self.vol)
        k = np.clip(np.searchsorted(self.knots, t, side="right") - 1, 0, self.vol.size - 1)
        return self.vol[k]


def _ro(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def gamma_from_chain(path: ChainPath, states) -> TimeChangePath:
    states = np.asarray(states, dtype=float)
    levels = states[path.state_indices]
    knots = np.append(path.jump_times, path.horizon)
    gk = np.concatenate(([0.0], np.cumsum(np.diff(knots) / levels**2)))
    return TimeChangePath("piecewise", _ro(knots), _ro(gk), _ro(levels))


def gamma_from_samples(xi_values, dt: float) -> TimeChangePath:
    xi = np.asarray(xi_values, dtype=float).ravel()
    if not dt > 0:
        raise ValidationError("dt must be positive")
    if xi.size < 2:
        raise ValidationError("need at least two samples")
    bad = np.flatnonzero(~(xi > 0))
    if bad.size:
        raise NonpositiveSample(f"sample {bad[0]} is {xi[bad[0]]!r}")
    inv2 = xi**-2
    gk = np.concatenate(([0.0], np.cumsum(0.5 * dt * (inv2[:-1] + inv2[1:]))))
    knots = dt * np.arange(xi.size)
    return TimeChangePath("sampled", _ro(knots), _ro(gk), _ro(xi))


def gamma_table_from_samples(xi: np.ndarray, dt: float) -> np.ndarray:
    """Vectorised trapezoid clock for a batch of paths (rows), no validation."""
    inv2 = xi**-2
    out = np.zeros_like(xi)
    np.cumsum(0.5 * dt * (inv2[..., :-1] + inv2[..., 1:]), axis=-1, out=out[..., 1:])
    return out


@dataclass(frozen=True)
class ComparisonReport:
    passed: bool
    max_violation: float
    location: float | None
    n_points: int


def compare(lower_tc: TimeChangePath, upper_tc: TimeChangePath, grid, tol: float = 0.0) -> ComparisonReport:
    """Check ``Gamma_lower >= Gamma_upper`` on ``grid``; violations are data."""
    grid = np.asarray(grid, dtype=float)
    gap = upper_tc.gamma(grid) - lower_tc.gamma(grid)
    k = int(np.argmax(gap))
    worst = float(max(gap[k], 0.0))
    return ComparisonReport(
        passed=bool(worst <= tol),
        max_violation=worst,
        location=float(grid[k]) if worst > 0 else None,
        n_points=int(grid.size),
    )
