"""Grid solvers for the value function and free boundary under chain volatility.

The pair ``(log x, volatility state)`` is approximated by a continuous-time
Markov chain on a uniform log grid: nearest-neighbour moves in ``log x`` with
rates matching the local mean and variance, plus the volatility chain's own
jumps.  The perpetual problem ``v = max(g, continuation)`` is solved by policy
iteration (one sparse solve per policy), which converges in a handful of
iterations even on fine grids.

Edges: Dirichlet ``v = g`` at the low end and ``v = 0`` at the high end for the
put; general gains supply their own edge values.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .chain import ChainModel
from .errors import GridTooCoarse, NoContact, NoConvergence, NotSkipFree, SolverError, ValidationError


@dataclass(frozen=True)
class GainFunction:
    """Gain ``g(x)`` with declared shape properties.

    ``edge`` maps ``(x_lo, x_hi)`` to Dirichlet values for the grid solvers;
    by default the low edge is ``g(x_lo)`` and the high edge ``max(g(x_hi), 0)``.
    """

    fn: Callable[[np.ndarray], np.ndarray]
    name: str = "custom"
    decreasing: bool = False
    bounded_below: bool = False
    bounded: bool = False
    continuous: bool = True
    nonnegative: bool = False
    strike: float | None = None
    edge: Callable[[float, float], tuple[float, float]] | None = None

    def __call__(self, x):
        return self.fn(np.asarray(x, dtype=float))

    @classmethod
    def put(cls, strike: float) -> "GainFunction":
        if not strike > 0:
            raise ValidationError("strike must be positive")
        return cls(
            fn=lambda x: np.maximum(0.0, strike - x),
            name="put",
            decreasing=True,
            bounded_below=True,
            bounded=True,
            nonnegative=True,
            strike=float(strike),
            edge=lambda lo, hi: (max(0.0, strike - lo), 0.0),
        )

    @classmethod
    def constant(cls, c: float) -> "GainFunction":
        c = float(c)
        # sup over finite stopping times: stop now if c > 0, otherwise wait forever
        sup = max(c, 0.0)
        return cls(
            fn=lambda x: np.full(np.shape(x), c),
            name="constant",
            decreasing=True,
            bounded_below=True,
            bounded=True,
            nonnegative=c >= 0,
            edge=lambda lo, hi: (sup, sup),
        )

    def edge_values(self, x_lo: float, x_hi: float) -> tuple[float, float]:
        if self.edge is not None:
            return self.edge(x_lo, x_hi)
        return float(self(x_lo)), max(float(self(x_hi)), 0.0)

    def check_properties(self, probe=None) -> list[str]:
        """Spot-check declared properties; returns the names that fail."""
        x = np.geomspace(1e-3, 1e3, 2001) * (self.strike or 1.0) if probe is None else np.asarray(probe)
        g = self(x)
        failed = []
        if self.decreasing and np.any(np.diff(g) > 0):
            failed.append("decreasing")
        if self.nonnegative and np.any(g < 0):
            failed.append("nonnegative")
        return failed


@dataclass(frozen=True)
class StoppingProblem:
    """Optimal stopping of ``dX = X Y dB`` with discounting at ``rate``.

    ``form="plain"`` pays ``exp(-rate*tau) g(X_tau)``; ``form="pricing"`` pays
    ``exp(-rate*tau) g(exp(rate*tau) X_tau)`` (``X`` the discounted price).
    """

    model: object
    gain: GainFunction
    rate: float
    horizon: float = math.inf
    form: str = "pricing"

    def __post_init__(self):
        if not self.rate > 0:
            raise ValidationError("rate must be positive")
        if not self.horizon >= 0:
            raise ValidationError("horizon must be nonnegative")
        if self.form not in ("plain", "pricing"):
            raise ValidationError(f"unknown form {self.form!r}")
        if self.form == "pricing" and not self.gain.decreasing:
            raise ValidationError("pricing form needs a decreasing gain for the monotonicity result")
        bad = self.gain.check_properties()
        if bad:
            raise ValidationError(f"gain fails declared properties: {bad}")

    @property
    def integrability_ok(self) -> bool:
        return self.gain.bounded

    def assumptions(self) -> list[str]:
        """Conditions the solver cannot check and must take on trust."""
        notes = []
        if not self.integrability_ok:
            notes.append("integrability of the discounted gain is asserted by the user")
        if not self.gain.nonnegative:
            notes.append("optimum attainable by stopping at nonnegative gain is asserted by the user")
        return notes


def log_grid(strike: float, n: int = 2000, span: float = 1e3) -> np.ndarray:
    """``n`` log-spaced asset levels on ``[strike/span, strike*span]``."""
    return np.geomspace(strike / span, strike * span, n)


@dataclass(frozen=True)
class ValueSurface:
    x_grid: np.ndarray
    states: np.ndarray
    values: np.ndarray  # shape (m, n)
    gain_values: np.ndarray  # g on x_grid
    iterations: int
    residual: float
    tol: float
    stop_mask: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def value(self, x, i: int):
        """Interpolate ``v(x, y_i)`` linearly in ``log x``."""
        return np.interp(np.log(x), np.log(self.x_grid), self.values[i])


@dataclass(frozen=True)
class _Operator:
    """Sparse continuation operator ``M`` with ``(M v)_n = 0`` on continuation nodes."""

    matrix: sp.csr_matrix
    diag: np.ndarray  # rate + total outflow at each node
    offdiag: sp.csr_matrix  # nonnegative neighbour rates
    gain: np.ndarray  # flattened (m*n,)
    interior: np.ndarray  # bool (m*n,)
    edge: np.ndarray  # Dirichlet values on boundary nodes (m*n,)
    m: int
    n: int


def _build_operator(problem: StoppingProblem, x_grid: np.ndarray) -> _Operator:
    model = problem.model
    if not isinstance(model, ChainModel):
        raise ValidationError("grid solvers need a chain volatility model")
    x = np.asarray(x_grid, dtype=float)
    z = np.log(x)
    dz = np.diff(z)
    n, m = x.size, model.m
    if n < 5 or not np.allclose(dz, dz[0], rtol=1e-8):
        raise ValidationError("x_grid must be log-uniform with at least 5 points")
    dz = float(dz.mean())
    y2 = model.states**2
    mu = (problem.rate if problem.form == "pricing" else 0.0) - 0.5 * y2
    diff = y2 / (2 * dz * dz)
    up, down = diff + mu / (2 * dz), diff - mu / (2 * dz)
    # upwind the drift where central differencing would give negative rates
    bad = (up < 0) | (down < 0)
    up = np.where(bad, diff + np.maximum(mu, 0) / dz, up)
    down = np.where(bad, diff + np.maximum(-mu, 0) / dz, down)

    q = model.generator
    idx = np.arange(m * n).reshape(m, n)
    interior = np.zeros((m, n), bool)
    interior[:, 1:-1] = True
    rows, cols, vals = [], [], []
    for i in range(m):
        r = idx[i, 1:-1]
        rows += [r, r]
        cols += [idx[i, 2:], idx[i, :-2]]
        vals += [np.full(n - 2, up[i]), np.full(n - 2, down[i])]
        for k in range(m):
            if k != i and q[i, k] > 0:
                rows.append(r)
                cols.append(idx[k, 1:-1])
                vals.append(np.full(n - 2, q[i, k]))
    rows, cols, vals = map(np.concatenate, (rows, cols, vals))
    off = sp.csr_matrix((vals, (rows, cols)), shape=(m * n, m * n))
    outflow = np.zeros((m, n))
    outflow[:, 1:-1] = (up + down - np.diag(q))[:, None]
    diag = (problem.rate + outflow).ravel()
    diag[~interior.ravel()] = 1.0
    matrix = (sp.diags(diag) - off).tocsr()

    g = np.broadcast_to(problem.gain(x), (m, n)).ravel().copy()
    lo, hi = problem.gain.edge_values(float(x[0]), float(x[-1]))
    edge = np.zeros((m, n))
    edge[:, 0], edge[:, -1] = lo, hi
    return _Operator(matrix, diag, off, g, interior.ravel(), edge.ravel(), m, n)


def _continuation(op: _Operator, v: np.ndarray) -> np.ndarray:
    return (op.offdiag @ v) / op.diag


def _solve_policy(op: _Operator, stop: np.ndarray) -> np.ndarray:
    """Value of the policy that stops exactly on ``stop`` (interior nodes)."""
    fixed = stop | ~op.interior
    keep = sp.diags((~fixed).astype(float))
    a = (keep @ op.matrix + sp.diags(fixed.astype(float))).tocsc()
    rhs = np.where(~op.interior, op.edge, np.where(stop, op.gain, 0.0))
    return spla.spsolve(a, rhs)


def _howard(op: _Operator, tol: float, max_iters: int, stop=None):
    v = np.where(op.interior, op.gain, op.edge)
    if stop is None:
        stop = op.interior & (op.gain > _continuation(op, v))
    it = 0
    for it in range(1, max_iters + 1):
        v = _solve_policy(op, stop)
        cont = _continuation(op, v)
        new_stop = op.interior & (op.gain > cont)
        if np.array_equal(new_stop, stop):
            target = np.where(op.interior, np.maximum(op.gain, cont), op.edge)
            return v, stop, it, float(np.max(np.abs(v - target)))
        stop = new_stop
    target = np.where(op.interior, np.maximum(op.gain, _continuation(op, v)), op.edge)
    raise NoConvergence(max_iters, float(np.max(np.abs(v - target))))


def _solve_multilevel(problem: StoppingProblem, x_grid: np.ndarray, tol: float, max_iters: int,
                      coarsest: int = 250):
    """Howard iteration seeded from the solution on a grid of half the size.

    Policy iteration moves the free boundary by about one node per sweep, so a
    good starting policy matters more than anything else on fine grids.
    """
    op = _build_operator(problem, x_grid)
    stop = None
    n = x_grid.size
    if n > 2 * coarsest:
        coarse = np.geomspace(x_grid[0], x_grid[-1], n // 2)
        _, c_stop, _, _ = _solve_multilevel(problem, coarse, tol, max_iters, coarsest)
        nearest = np.rint(np.interp(np.log(x_grid), np.log(coarse), np.arange(coarse.size))).astype(int)
        stop = c_stop.reshape(op.m, -1)[:, nearest].ravel() & op.interior
    v, stop, iters, res = _howard(op, tol, max_iters, stop)
    return op, stop, iters, (v, res)


def _check_stop_region(problem: StoppingProblem, stop: np.ndarray, g_lo: float, n: int):
    if not problem.gain.decreasing:
        return
    for i, row in enumerate(stop):
        interior = np.flatnonzero(row)
        if interior.size == 0:
            if g_lo > 0:
                raise GridTooCoarse(f"state {i}: stopping boundary at the low grid edge")
            continue
        last = int(interior[-1])
        if interior.size != last:  # stop nodes must be exactly 1..last
            raise SolverError(f"state {i}: stopping set is not down-connected")
        if last <= 2 or last >= n - 3:
            raise GridTooCoarse(f"state {i}: stopping boundary within 2 cells of the grid edge")


def solve_value_iteration(problem: StoppingProblem, x_grid=None, tol: float = 1e-10,
                          max_iters: int = 200) -> ValueSurface:
    """Perpetual value surface on ``x_grid`` (default: 2000-point log grid around the strike)."""
    if x_grid is None:
        x_grid = log_grid(problem.gain.strike or 1.0)
    x_grid = np.asarray(x_grid, dtype=float)
    op, stop, iters, (v, res) = _solve_multilevel(problem, x_grid, tol, max_iters)
    if res > tol:
        raise NoConvergence(iters, res)
    m, n = op.m, op.n
    stop = stop.reshape(m, n)
    _check_stop_region(problem, stop, float(problem.gain(x_grid[0])), n)
    return ValueSurface(
        x_grid=x_grid,
        states=np.asarray(problem.model.states),
        values=v.reshape(m, n),
        gain_values=np.asarray(problem.gain(x_grid)),
        iterations=iters,
        residual=res,
        tol=tol,
        stop_mask=stop,
        meta={"method": "policy_iteration", "n_grid": n},
    )


@dataclass(frozen=True)
class ThresholdVector:
    b: np.ndarray
    indices: np.ndarray
    contact_tol: float


def extract_thresholds(surface: ValueSurface, gain: GainFunction | None = None,
                       contact_tol: float | None = None) -> ThresholdVector:
    """Per state, the largest grid level of the contact run ``v - g <= contact_tol``
    that starts at the low edge."""
    tol = 10 * surface.tol if contact_tol is None else contact_tol
    g = surface.gain_values if gain is None else np.asarray(gain(surface.x_grid))
    gap = surface.values - g
    idx = np.empty(surface.values.shape[0], dtype=int)
    for i, row in enumerate(gap):
        above = np.flatnonzero(row > tol)
        j = (above[0] if above.size else row.size) - 1
        if j < 1:
            raise NoContact(f"state {i} has an empty stopping set on the grid")
        idx[i] = j
    return ThresholdVector(surface.x_grid[idx], idx, tol)


@dataclass(frozen=True)
class MonotonicityReport:
    passed: bool
    max_violation: float
    worst: tuple[int, int] | None
    tol: float


def check_monotone_surface(surface: ValueSurface, tol: float | None = None) -> MonotonicityReport:
    """Worst ``v[i, j] - v[i+1, j]`` over adjacent states; passes if ``<= tol``."""
    tol = surface.tol if tol is None else tol
    v = surface.values
    if v.shape[0] < 2:
        return MonotonicityReport(True, 0.0, None, tol)
    drop = v[:-1] - v[1:]
    i, j = np.unravel_index(int(np.argmax(drop)), drop.shape)
    worst = float(drop[i, j])
    return MonotonicityReport(worst <= tol, worst, (int(i), int(j)) if worst > 0 else None, tol)


class _ThresholdPolicies:
    """Values of threshold policies ``stop iff x_j <= x_{idx[i]}``, memoised."""

    def __init__(self, op: _Operator):
        self.op = op
        self.g = op.gain.reshape(op.m, op.n)
        self._cache: dict[tuple[int, ...], np.ndarray] = {}

    def value(self, idx) -> np.ndarray:
        key = tuple(int(j) for j in idx)
        if key not in self._cache:
            stop = np.zeros((self.op.m, self.op.n), bool)
            for i, j in enumerate(key):
                stop[i, 1 : j + 1] = True
            self._cache[key] = _solve_policy(self.op, stop.ravel()).reshape(self.op.m, self.op.n)
        return self._cache[key]

    def late_enough(self, idx, i: int) -> bool:
        """True when stopping no later is useless: ``v >= g`` just above the threshold."""
        j = int(idx[i]) + 1
        return bool(self.value(idx)[i, j] >= self.g[i, j])

    @property
    def solves(self) -> int:
        return len(self._cache)


def _smallest_ok(pol: _ThresholdPolicies, idx: np.ndarray, i: int, lo: int, hi: int) -> int:
    """Smallest ``j`` in ``[lo, hi]`` with ``late_enough`` (``hi`` if none).

    Gallops outward from the current position, then bisects.
    """
    trial = idx.copy()

    def ok(j):
        trial[i] = j
        return pol.late_enough(trial, i)

    j = min(max(int(idx[i]), lo), hi)
    if ok(j):
        good, step = j, 1
        while good > lo:
            cand = max(good - step, lo)
            if not ok(cand):
                bad = cand
                break
            good, step = cand, 2 * step
        else:
            return lo
    else:
        bad, step = j, 1
        while True:
            if bad >= hi:
                return hi
            cand = min(bad + step, hi)
            if ok(cand):
                good = cand
                break
            bad, step = cand, 2 * step
    while good - bad > 1:
        mid = (good + bad) // 2
        if ok(mid):
            good = mid
        else:
            bad = mid
    return good


def _search_one_ordering(pol: _ThresholdPolicies, order: tuple[int, ...], max_sweeps: int = 100):
    """Coordinate-wise threshold search subject to ``idx[order[0]] >= idx[order[1]] >= ...``."""
    m, n = pol.op.m, pol.op.n
    rank = {state: p for p, state in enumerate(order)}
    g = pol.g
    # start every state at the last node with positive gain
    start = max(int(np.flatnonzero(g[0] > 0)[-1]) if np.any(g[0] > 0) else 1, 1)
    idx = np.full(m, min(start, n - 2))
    for _ in range(max_sweeps):
        before = idx.copy()
        for i in order:
            p = rank[i]
            lo = int(idx[order[p + 1]]) if p + 1 < m else 1
            hi = int(idx[order[p - 1]]) if p > 0 else n - 2
            idx[i] = _smallest_ok(pol, idx, i, lo, hi)
        if np.array_equal(idx, before):
            break
    return idx, pol.value(idx)


def ordered_threshold_search(problem: StoppingProblem, mode: str = "monotone", x_grid=None):
    """Threshold search over candidate orderings of ``b``.

    ``"exhaustive"`` tries all ``m!`` orderings and keeps the one whose policy
    value is largest; ``"monotone"`` only tries ``b[0] >= ... >= b[m-1]``, which
    the monotonicity of ``v`` in the volatility state justifies for skip-free
    chains.  Within an ordering, each threshold in turn is moved to the lowest
    grid position at which the policy value just above it is at least the
    gain (a monotone test, located by galloping plus bisection inside the
    bounds set by its neighbours in the ordering); sweeps repeat until no
    threshold moves.

    Returns ``(ThresholdVector, orderings_examined)``.
    """
    model = problem.model
    if mode not in ("monotone", "exhaustive"):
        raise ValidationError(f"unknown mode {mode!r}")
    if mode == "monotone" and not model.skip_free:
        raise NotSkipFree("monotone ordering is only justified for skip-free chains")
    if x_grid is None:
        x_grid = log_grid(problem.gain.strike or 1.0)
    x_grid = np.asarray(x_grid, dtype=float)
    pol = _ThresholdPolicies(_build_operator(problem, x_grid))
    orders = [tuple(range(model.m))] if mode == "monotone" else list(itertools.permutations(range(model.m)))
    best = None
    for order in orders:
        idx, v = _search_one_ordering(pol, order)
        score = float(np.sum(v))
        if best is None or score > best[0]:
            best = (score, idx)
    idx = best[1]
    return ThresholdVector(x_grid[idx], idx, 0.0), len(orders)


def finite_horizon_value(problem: StoppingProblem, x_grid=None, t_steps: int | None = None,
                         dt: float | None = None) -> ValueSurface:
    """Backward induction: implicit Euler step of the continuation operator, then
    ``max`` with the gain.  Give either ``t_steps`` or ``dt``."""
    T = problem.horizon
    if not math.isfinite(T):
        raise ValidationError("finite_horizon_value needs a finite horizon")
    if x_grid is None:
        x_grid = log_grid(problem.gain.strike or 1.0)
    x_grid = np.asarray(x_grid, dtype=float)
    op = _build_operator(problem, x_grid)
    m, n = op.m, op.n
    v = np.where(op.interior, op.gain, op.edge)
    if T == 0:
        steps, h = 0, 0.0
    elif dt is not None:
        steps = int(round(T / dt))
        if not math.isclose(steps * dt, T, rel_tol=1e-9):
            raise ValidationError("horizon must be a multiple of dt")
        h = dt
    else:
        steps = int(t_steps or 1000)
        h = T / steps
    if steps:
        interior = op.interior.astype(float)
        a = sp.diags(1.0 - interior) + sp.diags(interior) @ (sp.identity(m * n) + h * op.matrix)
        lu = spla.splu(a.tocsc())
        for _ in range(steps):
            w = lu.solve(np.where(op.interior, v, op.edge))
            v = np.where(op.interior, np.maximum(op.gain, w), op.edge)
    return ValueSurface(
        x_grid=x_grid,
        states=np.asarray(problem.model.states),
        values=v.reshape(m, n),
        gain_values=np.asarray(problem.gain(x_grid)),
        iterations=steps,
        residual=0.0,
        tol=0.0,
        meta={"method": "backward_induction", "dt": h, "horizon": T},
    )
