"""Finite-state volatility chains: validation, time scaling, coupling, simulation.

States are sorted positive volatility levels ``y_1 < ... < y_m``.  A generator
(Q-matrix) is *skip-free* when it is tridiagonal, i.e. the chain only moves to
neighbouring levels.  Indices are 0-based throughout.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadGenerator,
    EmptyStates,
    HorizonExceeded,
    NotSkipFree,
    NotTridiagonal,
    StartOrderViolated,
    ValidationError,
)

ROW_SUM_TOL = 1e-12


def _frozen(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


def validate_states(states) -> np.ndarray:
    y = np.asarray(states, dtype=float).ravel()
    if y.size == 0:
        raise EmptyStates("volatility state list is empty")
    if not np.all(np.isfinite(y)) or np.any(y <= 0):
        raise ValidationError("volatility states must be finite and strictly positive")
    if np.any(np.diff(y) <= 0):
        raise ValidationError("volatility states must be strictly increasing")
    return _frozen(y)


def validate_generator(q, m: int | None = None) -> np.ndarray:
    """Check Q-matrix structure: square, nonnegative off-diagonal, zero row sums."""
    q = np.asarray(q, dtype=float)
    if q.ndim != 2 or q.shape[0] != q.shape[1]:
        raise BadGenerator(f"generator must be square, got shape {q.shape}")
    if m is not None and q.shape[0] != m:
        raise BadGenerator(f"generator is {q.shape[0]}x{q.shape[0]} but there are {m} states")
    if not np.all(np.isfinite(q)):
        raise BadGenerator("generator has non-finite entries")
    off = q - np.diag(np.diag(q))
    if np.any(off < 0):
        i, j = map(int, np.argwhere(off < 0)[0])
        raise BadGenerator(f"negative off-diagonal rate q[{i},{j}] = {q[i, j]!r}")
    sums = q.sum(axis=1)
    if np.any(np.abs(sums) > ROW_SUM_TOL):
        i = int(np.argmax(np.abs(sums)))
        raise BadGenerator(f"row {i} sums to {sums[i]!r}, expected 0")
    return _frozen(q)


def is_tridiagonal(q: np.ndarray) -> bool:
    q = np.asarray(q)
    return not np.any(np.triu(q, 2)) and not np.any(np.tril(q, -2))


@dataclass(frozen=True)
class ChainModel:
    """Volatility levels with an arbitrary (validated) generator."""

    states: np.ndarray
    generator: np.ndarray

    @property
    def m(self) -> int:
        return self.states.size

    @property
    def skip_free(self) -> bool:
        return is_tridiagonal(self.generator)


@dataclass(frozen=True)
class SkipFreeChainModel(ChainModel):
    """Chain model whose generator is known to be tridiagonal."""


def validate_chain(states, q) -> ChainModel:
    """Validate any chain; returns a :class:`SkipFreeChainModel` when tridiagonal."""
    y = validate_states(states)
    gen = validate_generator(q, y.size)
    return SkipFreeChainModel(y, gen) if is_tridiagonal(gen) else ChainModel(y, gen)


def validate_skip_free(states, q) -> SkipFreeChainModel:
    y = validate_states(states)
    q = np.asarray(q, dtype=float)
    if q.ndim != 2 or q.shape != (y.size, y.size):
        raise BadGenerator(f"generator shape {q.shape} does not match {y.size} states")
    bad = np.argwhere((np.abs(np.subtract.outer(np.arange(y.size), np.arange(y.size))) > 1) & (q != 0))
    if bad.size:
        i, j = map(int, bad[0])
        raise NotTridiagonal(i, j, float(q[i, j]))
    return SkipFreeChainModel(y, validate_generator(q, y.size))


def time_scaled_generator(model: ChainModel) -> np.ndarray:
    """Generator of the chain run on the clock ``Gamma``: row i divided by ``y_i**2``."""
    return _frozen(model.generator / model.states[:, None] ** 2)


def pair_index(i: int, k: int, m: int) -> int:
    return i * m + k


def coupling_generator(model: SkipFreeChainModel) -> np.ndarray:
    """Generator on ordered pairs ``(i, k)`` (flattened as ``i*m + k``).

    Off the diagonal the two coordinates jump independently with the
    time-scaled rates; once equal they jump together.
    """
    qs = time_scaled_generator(model)
    m = model.m
    out = np.zeros((m * m, m * m))
    for i in range(m):
        for k in range(m):
            row = pair_index(i, k, m)
            if i == k:
                for j in range(m):
                    if j != i:
                        out[row, pair_index(j, j, m)] = qs[i, j]
                out[row, row] = qs[i, i]
                continue
            for j in range(m):
                if j != i:
                    out[row, pair_index(j, k, m)] += qs[i, j]
                if j != k:
                    out[row, pair_index(i, j, m)] += qs[k, j]
            out[row, row] = qs[i, i] + qs[k, k]
    return _frozen(out)


@dataclass(frozen=True)
class ChainPath:
    """Right-continuous piecewise-constant path.

    Segment ``n`` occupies ``[jump_times[n], jump_times[n+1])``; the last one
    runs to ``horizon``.  An absorbing state simply yields a long last segment.
    """

    jump_times: np.ndarray
    state_indices: np.ndarray
    horizon: float

    def __post_init__(self):
        if self.jump_times.size != self.state_indices.size or self.jump_times.size == 0:
            raise ValidationError("jump_times and state_indices must be nonempty and equal length")
        if self.jump_times[0] != 0.0 or np.any(np.diff(self.jump_times) <= 0):
            raise ValidationError("jump_times must start at 0 and increase strictly")
        if np.any(np.diff(self.state_indices) == 0):
            raise ValidationError("consecutive segments must have different states")

    def state_at(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0) or np.any(t > self.horizon):
            raise HorizonExceeded(f"path covers [0, {self.horizon}]")
        k = np.searchsorted(self.jump_times, t, side="right") - 1
        return self.state_indices[k]

    @property
    def final_state(self) -> int:
        return int(self.state_indices[-1])


@dataclass(frozen=True)
class _JumpTable:
    """Exit rates and cumulative embedded-jump probabilities, as Python lists
    for fast scalar stepping."""

    rates: list
    cdf: list

    @classmethod
    def of(cls, q: np.ndarray) -> "_JumpTable":
        rates = np.abs(np.diag(q))
        p = np.clip(q, 0.0, None)
        np.fill_diagonal(p, 0.0)
        cdf = np.cumsum(p / np.where(rates > 0, rates, 1.0)[:, None], axis=1)
        return cls(rates.tolist(), [row.tolist() for row in cdf])

    def step(self, state: int, rng: np.random.Generator) -> tuple[float, int]:
        rate = self.rates[state]
        if rate <= 0:
            return math.inf, state
        return rng.exponential(1.0 / rate), _jump_to(self, state, rng)


def _jump_to(table: _JumpTable, state: int, rng: np.random.Generator) -> int:
    row = table.cdf[state]
    return min(bisect.bisect_right(row, rng.random() * row[-1]), len(row) - 1)


def _run(table: _JumpTable, state, t0, horizon, rng, times, states):
    t = t0
    while True:
        hold, nxt = table.step(state, rng)
        t += hold
        if not t <= horizon:
            return
        times.append(t)
        states.append(nxt)
        state = nxt


def simulate_chain(generator, start_index: int, horizon: float, rng: np.random.Generator) -> ChainPath:
    """Exact path by exponential holding times and embedded-jump choices."""
    q = validate_generator(generator)
    if not 0 < horizon < math.inf:
        raise ValidationError("horizon must be positive and finite; extend paths lazily instead")
    if not 0 <= start_index < q.shape[0]:
        raise ValidationError(f"start index {start_index} out of range")
    times, states = [0.0], [int(start_index)]
    _run(_JumpTable.of(q), int(start_index), 0.0, horizon, rng, times, states)
    return ChainPath(_frozen(times), _frozen(states, int), float(horizon))


def extend_chain(path: ChainPath, generator, horizon: float, rng: np.random.Generator) -> ChainPath:
    """Continue ``path`` to a later horizon.

    Holding times are memoryless, so restarting the clock of the last segment
    at the old horizon leaves the law unchanged.
    """
    if horizon <= path.horizon:
        return path
    q = validate_generator(generator)
    times, states = list(path.jump_times), list(path.state_indices)
    _run(_JumpTable.of(q), path.final_state, path.horizon, horizon, rng, times, states)
    return ChainPath(_frozen(times), _frozen(states, int), float(horizon))


@dataclass(frozen=True)
class CoupledChainPaths:
    lower: ChainPath
    upper: ChainPath
    meet_time: float


def simulate_coupled(
    model: SkipFreeChainModel,
    start_lower_index: int,
    start_upper_index: int,
    horizon: float,
    rng: np.random.Generator,
) -> CoupledChainPaths:
    """Sample the pair chain of :func:`coupling_generator` directly.

    Before meeting, the competing exponential clocks of the two coordinates are
    merged; afterwards a single time-scaled path is shared.
    """
    if not model.skip_free:
        raise NotSkipFree("ordered coupling needs a tridiagonal generator")
    lo, hi = int(start_lower_index), int(start_upper_index)
    if lo > hi:
        raise StartOrderViolated(f"lower start {lo} exceeds upper start {hi}")
    if not 0 < horizon < math.inf:
        raise ValidationError("horizon must be positive and finite")
    table = _JumpTable.of(time_scaled_generator(model))
    lt, ls, ut, us = [0.0], [lo], [0.0], [hi]
    t = 0.0
    while lo != hi:
        r_lo, r_hi = table.rates[lo], table.rates[hi]
        total = r_lo + r_hi
        if total <= 0:
            t = math.inf
            break
        t += rng.exponential(1.0 / total)
        if t > horizon:
            break
        # which coordinate moves, then where it goes
        if rng.random() * total < r_lo:
            lo = _jump_to(table, lo, rng)
            lt.append(t)
            ls.append(lo)
        else:
            hi = _jump_to(table, hi, rng)
            ut.append(t)
            us.append(hi)
    meet = t if lo == hi and t <= horizon else math.inf
    if math.isfinite(meet):
        shared_t, shared_s = [], []
        _run(table, lo, meet, horizon, rng, shared_t, shared_s)
        for times, states in ((lt, ls), (ut, us)):
            times.extend(shared_t)
            states.extend(shared_s)
    lower = ChainPath(_frozen(lt), _frozen(ls, int), float(horizon))
    upper = ChainPath(_frozen(ut), _frozen(us, int), float(horizon))
    return CoupledChainPaths(lower, upper, meet)


def stationary_distribution(generator) -> np.ndarray:
    """Solve ``pi Q = 0`` with ``sum(pi) = 1`` (irreducible chains)."""
    q = validate_generator(generator)
    m = q.shape[0]
    a = np.vstack([q.T, np.ones(m)])
    b = np.zeros(m + 1)
    b[-1] = 1.0
    pi, *_ = np.linalg.lstsq(a, b, rcond=None)
    return pi


def occupation_fractions(path: ChainPath, m: int, horizon: float | None = None) -> np.ndarray:
    """Fraction of ``[0, horizon]`` spent in each state."""
    h = path.horizon if horizon is None else horizon
    ends = np.append(path.jump_times[1:], h)
    durations = np.clip(np.minimum(ends, h) - path.jump_times, 0.0, None)
    return np.bincount(path.state_indices, weights=durations, minlength=m) / h
