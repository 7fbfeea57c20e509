"""Monte Carlo on the changed clock.

Everything here simulates the decoupled pair: a unit-volatility asset ``G``
and the volatility ``Z`` (chain or diffusion) on the clock of ``G``, with the
original time recovered as ``Gamma = int Z**-2``.

Chain models are simulated exactly: on each holding interval of ``Z`` the log
of the barrier-relevant process is a Brownian motion with constant drift, so
first passage below a threshold is an inverse Gaussian draw and the endpoint of
an interval without passage comes from the killed density by rejection.
Diffusion models are stepped on a grid of the ``G`` clock.

Randomness is organised in fixed-size blocks of replications, each with a
counter-based stream keyed by ``(seed, block)``; blocks may run on any number
of threads and are always reassembled in order.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import norm

from .chain import ChainModel, simulate_chain, simulate_coupled, time_scaled_generator, validate_generator
from .errors import (
    RegressionSingular,
    RuleStopsAtNegativeGain,
    StartOrderViolated,
    TruncationDominates,
    ValidationError,
)
from .models import (
    DiffusionVolModel,
    correlate_drivers,
    reconstructed_driver_increments,
    simulate_xi,
    xi_system,
)
from .rng import block_ranges, stream
from .stopping import StoppingProblem
from .timechange import compare, gamma_from_chain, gamma_table_from_samples

BLOCK_SIZE = 4096
Z99 = float(norm.ppf(0.995))
TRUNCATION_LIMIT = 0.01


@dataclass(frozen=True)
class McConfig:
    n_paths: int = 10_000
    dt: float = 1e-3
    horizon_cap: float = 1_000.0  # original-clock truncation for perpetual problems
    seed: int = 0
    antithetic: bool = False
    threads: int = 1

    def __post_init__(self):
        if int(self.n_paths) < 2:
            raise ValidationError("n_paths must be at least 2")
        if not self.dt > 0:
            raise ValidationError("dt must be positive")
        if not self.horizon_cap > 0:
            raise ValidationError("horizon_cap must be positive")
        if int(self.threads) < 1:
            raise ValidationError("threads must be at least 1")


@dataclass(frozen=True)
class Estimate:
    mean: float
    stderr: float
    n: int
    ci99: tuple[float, float]
    truncated_fraction: float = 0.0
    truncation_bias_bound: float = 0.0
    flags: tuple[str, ...] = ()

    def as_dict(self) -> dict:
        return {
            "mean": self.mean,
            "stderr": self.stderr,
            "n": self.n,
            "ci99": list(self.ci99),
            "truncated_fraction": self.truncated_fraction,
            "truncation_bias_bound": self.truncation_bias_bound,
            "flags": list(self.flags),
        }


def summarize(samples, truncated_fraction: float = 0.0, bias_bound: float = 0.0,
              flags: Sequence[str] = ()) -> Estimate:
    """Mean, standard error and 99% interval of i.i.d. samples."""
    x = np.asarray(samples, dtype=float)
    n = x.size
    if n and np.all(x == x[0]):
        mean, sd = float(x[0]), 0.0  # avoid rounding noise on degenerate samples
    else:
        mean = float(np.mean(x))  # pairwise summation, order fixed by block layout
        sd = float(np.std(x, ddof=1))
    se = sd / math.sqrt(n)
    return Estimate(mean, se, n, (mean - Z99 * se, mean + Z99 * se),
                    float(truncated_fraction), float(bias_bound), tuple(flags))


@dataclass(frozen=True)
class StoppingRule:
    """Threshold rule, one level per volatility state (or a function of the level).

    ``"g_time"`` stops at the first ``rho`` with ``G(rho) < beta(Z(rho))``;
    ``"original_time"`` stops when the payoff argument (the undiscounted price
    in pricing form) falls below ``b(Y)``.  ``immediate()`` stops at time 0.
    """

    kind: str
    levels: np.ndarray | Callable | float

    def __post_init__(self):
        if self.kind not in ("g_time", "original_time"):
            raise ValidationError(f"unknown rule kind {self.kind!r}")

    @classmethod
    def immediate(cls) -> "StoppingRule":
        return cls("g_time", math.inf)

    @classmethod
    def threshold(cls, levels, kind: str = "original_time") -> "StoppingRule":
        return cls(kind, levels if callable(levels) else np.asarray(levels, dtype=float))

    def level_by_state(self, m: int) -> np.ndarray:
        lv = np.broadcast_to(np.asarray(self.levels, dtype=float), (m,)).astype(float)
        if np.any(np.isnan(lv)) or np.any(lv < 0):
            raise ValidationError("rule levels must be nonnegative")
        return lv

    def level_at(self, vol: np.ndarray) -> np.ndarray:
        if callable(self.levels):
            return np.asarray(self.levels(vol), dtype=float)
        lv = np.asarray(self.levels, dtype=float)
        if lv.ndim:
            raise ValidationError("diffusion rules need a scalar or callable level")
        return np.full(np.shape(vol), float(lv))

    def clock_weight(self, problem: StoppingProblem) -> float:
        """Coefficient of ``Gamma`` in the monitored log process."""
        return problem.rate if (self.kind == "original_time" and problem.form == "pricing") else 0.0


def _map_blocks(fn, n: int, threads: int, block_size: int = BLOCK_SIZE):
    blocks = block_ranges(n, block_size)
    if threads <= 1 or len(blocks) == 1:
        return [fn(*b) for b in blocks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda b: fn(*b), blocks))


def _payoff(problem: StoppingProblem, log_g: np.ndarray, gam: np.ndarray) -> np.ndarray:
    q = problem.rate
    if problem.form == "pricing":
        return np.exp(-q * gam) * problem.gain(np.exp(log_g + q * gam))
    return np.exp(-q * gam) * problem.gain(np.exp(log_g))


# --- exact chain sampler ---------------------------------------------------

def _first_passage(rng: np.random.Generator, a: np.ndarray, nu: np.ndarray) -> np.ndarray:
    """Time for ``nu t + W_t`` to fall by ``a > 0``; ``inf`` if it never does."""
    t = np.full(a.shape, math.inf)
    hits = np.isfinite(a)  # a zero level is never reached
    away = nu > 0
    if np.any(away):
        hits[away] = rng.random(int(away.sum())) < np.exp(-2 * nu[away] * a[away])
    speed = np.abs(nu)
    drifted = hits & (speed > 0)
    if np.any(drifted):
        t[drifted] = rng.wald(a[drifted] / speed[drifted], a[drifted] ** 2)
    still = hits & (speed == 0)
    if np.any(still):
        t[still] = a[still] ** 2 / rng.standard_normal(int(still.sum())) ** 2
    return t


def _killed_endpoint(rng: np.random.Generator, a: np.ndarray, nu: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Displacement at ``h`` of ``nu t + W_t`` given it stayed above ``-a``."""
    out = np.empty(a.shape)
    todo = np.arange(a.size)
    while todo.size:
        aa, hh = a[todo], h[todo]
        x = nu[todo] * hh + np.sqrt(hh) * rng.standard_normal(todo.size)
        u = rng.random(todo.size)
        # bridge from 0 to x avoids -a with probability 1 - exp(-2 a (x + a) / h)
        ok = (x > -aa) & (u < -np.expm1(-2 * aa * (x + aa) / hh))
        out[todo[ok]] = x[ok]
        todo = todo[~ok]
    return out


def _chain_block(problem: StoppingProblem, rule: StoppingRule, x0: float, start: int,
                 cap: float, forced: bool, rng: np.random.Generator, n: int):
    model = problem.model
    y2 = model.states**2
    qs = time_scaled_generator(model)
    out_rate = np.abs(np.diag(qs))  # abs keeps +0.0 for absorbing states
    jump = np.clip(qs, 0.0, None)
    np.fill_diagonal(jump, 0.0)
    jump = np.cumsum(jump / np.where(out_rate > 0, out_rate, 1.0)[:, None], axis=1)
    c = rule.clock_weight(problem)
    nu = c / y2 - 0.5
    with np.errstate(divide="ignore"):
        log_b = np.log(rule.level_by_state(model.m))

    log_g = np.full(n, math.log(x0))
    gam = np.zeros(n)
    state = np.full(n, int(start))
    value = np.zeros(n)
    truncated = np.zeros(n, bool)
    active = np.arange(n)
    while active.size:
        i = state[active]
        a = log_g[active] + c * gam[active] - log_b[i]
        now = ~(a > 0)
        if np.any(now):
            k = active[now]
            value[k] = _payoff(problem, log_g[k], gam[k])
            active, i, a = active[~now], i[~now], a[~now]
            if not active.size:
                break
        with np.errstate(divide="ignore"):
            hold = rng.exponential(size=active.size) / out_rate[i]
        h_cap = (cap - gam[active]) * y2[i]
        h = np.minimum(hold, h_cap)
        t_hit = _first_passage(rng, a, nu[i])
        hit = t_hit <= h
        if np.any(hit):
            k, ih = active[hit], i[hit]
            gam[k] += t_hit[hit] / y2[ih]
            log_g[k] = log_b[ih] - c * gam[k]
            value[k] = _payoff(problem, log_g[k], gam[k])
        miss = ~hit
        k, im = active[miss], i[miss]
        d = _killed_endpoint(rng, a[miss], nu[im], h[miss])
        gam[k] += h[miss] / y2[im]
        log_g[k] += d - c * h[miss] / y2[im]
        capped = h_cap[miss] <= hold[miss]
        kc = k[capped]
        if forced:
            value[kc] = _payoff(problem, log_g[kc], gam[kc])
        else:
            # in an absorbing state a path that will never hit is simply worth 0
            truncated[kc] = np.isfinite(t_hit[miss][capped]) | (out_rate[im[capped]] > 0)
        moving = k[~capped]
        if moving.size:
            u = rng.random(moving.size)
            state[moving] = np.argmax(u[:, None] < jump[state[moving]], axis=1)
        active = moving
    return value, truncated


# --- stepped diffusion sampler ---------------------------------------------

def _diffusion_block(problem: StoppingProblem, rule: StoppingRule, x0: float, y0: float,
                     cap: float, forced: bool, cfg: McConfig, rng: np.random.Generator, n: int,
                     chunk: int = 1000):
    model = problem.model
    system = xi_system(model)
    c = rule.clock_weight(problem)
    dt = cfg.dt
    half = (n + 1) // 2 if cfg.antithetic else n
    xi = np.full(n, float(y0))
    log_g = np.full(n, math.log(x0))
    gam = np.zeros(n)
    value = np.zeros(n)
    truncated = np.zeros(n, bool)
    active = np.ones(n, bool)

    def settle(k):
        value[k] = _payoff(problem, log_g[k], gam[k])
        active[k] = False

    with np.errstate(divide="ignore"):
        settle(np.flatnonzero(log_g + c * gam < np.log(rule.level_at(xi))))
    while active.any():
        dw, dwx = correlate_drivers(model.delta, rng, chunk, dt, size=half)
        if cfg.antithetic:
            dw, dwx = np.concatenate([dw, -dw])[:n], np.concatenate([dwx, -dwx])[:n]
        path = simulate_xi(system, xi, chunk * dt, dt, dw=dwx)
        steps = np.cumsum(dw - 0.5 * dt, axis=1)
        lg = log_g[:, None] + np.concatenate([np.zeros((n, 1)), steps], axis=1)
        gm = gam[:, None] + gamma_table_from_samples(path, dt)
        with np.errstate(divide="ignore"):
            below = lg + c * gm < np.log(rule.level_at(path))
        over = gm >= cap
        for k in np.flatnonzero(active):
            hit = np.flatnonzero(below[k, 1:] | over[k, 1:])
            if hit.size:
                j = hit[0] + 1
                log_g[k], gam[k], xi[k] = lg[k, j], gm[k, j], path[k, j]
                if below[k, j] or forced:
                    settle(k)
                else:
                    truncated[k], active[k] = True, False
            else:
                log_g[k], gam[k], xi[k] = lg[k, -1], gm[k, -1], path[k, -1]
    return value, truncated


def estimate_value_timechanged(problem: StoppingProblem, rule: StoppingRule, cfg: McConfig,
                               x0: float | None = None, start=0) -> Estimate:
    """Mean discounted gain of ``rule`` from ``(x0, start)`` simulated on the ``G`` clock.

    ``start`` is a state index for chain models and a volatility level for
    diffusion models.  Finite horizons force stopping at ``T``; perpetual
    problems are truncated at ``cfg.horizon_cap`` with zero residual payoff,
    and the fraction truncated is reported (flag ``TruncationDominates`` above 1%).
    """
    x0 = float(problem.gain.strike or 1.0) if x0 is None else float(x0)
    if not x0 > 0:
        raise ValidationError("x0 must be positive")
    forced = math.isfinite(problem.horizon)
    cap = problem.horizon if forced else cfg.horizon_cap
    model = problem.model
    if isinstance(model, ChainModel):
        if cfg.antithetic:
            raise ValidationError("antithetic pairing needs a stepped simulation; the chain sampler is exact")
        if not 0 <= int(start) < model.m:
            raise ValidationError(f"start index {start} out of range")

        def run(b, lo, hi):
            return _chain_block(problem, rule, x0, int(start), cap, forced, stream(cfg.seed, b), hi - lo)
    elif isinstance(model, DiffusionVolModel):
        if not float(start) > 0:
            raise ValidationError("diffusion start must be a positive volatility level")

        def run(b, lo, hi):
            return _diffusion_block(problem, rule, x0, float(start), cap, forced, cfg, stream(cfg.seed, b), hi - lo)
    else:
        raise ValidationError("unsupported volatility model")
    if problem.horizon == 0:
        g0 = float(problem.gain(x0))
        return summarize(np.full(int(cfg.n_paths), g0))
    parts = _map_blocks(run, int(cfg.n_paths), cfg.threads)
    values = np.concatenate([p[0] for p in parts])
    trunc = np.concatenate([p[1] for p in parts])
    frac = float(trunc.mean())
    sup_g = float(np.max(problem.gain(np.geomspace(1e-6, 1e6, 1001) * x0)))
    bias = frac * math.exp(-problem.rate * cap) * max(sup_g, 0.0)
    flags = (TruncationDominates.reason,) if frac > TRUNCATION_LIMIT else ()
    return summarize(values, frac, bias, flags)


# --- coupled comparison ------------------------------------------------------

@dataclass(frozen=True)
class PairedReport:
    passed: bool
    n: int
    violations: int
    first_violation: dict | None
    max_gamma_gap: float  # largest Gamma' - Gamma seen (<= 0 when ordered)
    differences: tuple[Estimate, ...]  # per rule, mean of payoff' - payoff
    meta: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "passed": self.passed,
            "n": self.n,
            "violations": self.violations,
            "first_violation": self.first_violation,
            "max_gamma_gap": self.max_gamma_gap,
            "differences": [d.as_dict() for d in self.differences],
            **self.meta,
        }


def _stop_index(log_monitor: np.ndarray, log_level: np.ndarray) -> np.ndarray:
    """First grid index where the monitor is below the level (last index if never)."""
    below = log_monitor < log_level
    first = np.argmax(below, axis=-1)
    return np.where(below.any(axis=-1), first, below.shape[-1] - 1)


def _rule_payoffs(problem, rules, log_g, level_of, gam, gam_hi):
    """Payoffs under each rule, stopping decided on the lower path.

    ``level_of(rule)`` gives the rule's level along the lower volatility path.
    """
    out = []
    for rule in rules:
        c = rule.clock_weight(problem)
        with np.errstate(divide="ignore"):
            j = _stop_index(log_g + c * gam, np.log(level_of(rule)))
        lg = np.take_along_axis(log_g, j[..., None], -1)[..., 0]
        gl = np.take_along_axis(gam, j[..., None], -1)[..., 0]
        gh = np.take_along_axis(gam_hi, j[..., None], -1)[..., 0]
        arg = np.exp(lg + problem.rate * gl) if problem.form == "pricing" else np.exp(lg)
        if np.any(problem.gain(arg) < 0):
            raise RuleStopsAtNegativeGain("rule stops where the gain is negative")
        out.append((_payoff(problem, lg, gl), _payoff(problem, lg, gh)))
    return out


def _chain_pair_block(problem, lo, hi, rules, x0, horizon, cfg, b, first, last):
    model = problem.model
    states = model.states
    res = []
    for rep in range(first, last):
        rng = stream(cfg.seed, rep)
        pair = simulate_coupled(model, lo, hi, horizon, rng)
        knots = np.union1d(pair.lower.jump_times, pair.upper.jump_times)
        z_gap = states[pair.lower.state_at(knots)] - states[pair.upper.state_at(knots)]
        tl, tu = gamma_from_chain(pair.lower, states), gamma_from_chain(pair.upper, states)
        grid = np.append(knots, horizon)
        cmp = compare(tl, tu, grid)
        n = int(round(horizon / cfg.dt))
        t = np.linspace(0.0, horizon, n + 1)
        w = np.concatenate(([0.0], np.cumsum(math.sqrt(horizon / n) * rng.standard_normal(n))))
        log_g = math.log(x0) + w - 0.5 * t
        z = pair.lower.state_at(t)
        pay = _rule_payoffs(problem, rules, log_g, lambda r: r.level_by_state(model.m)[z],
                            tl.gamma(t), tu.gamma(t))
        bad = None
        if np.max(z_gap) > 0:
            k = int(np.argmax(z_gap))
            bad = {"replication": rep, "kind": "Z", "time": float(knots[k]), "gap": float(z_gap[k])}
        elif not cmp.passed:
            bad = {"replication": rep, "kind": "Gamma", "time": cmp.location, "gap": cmp.max_violation}
        else:
            for r, (p, p_hi) in enumerate(pay):
                if p > p_hi:
                    bad = {"replication": rep, "kind": f"payoff[{r}]", "time": None, "gap": float(p - p_hi)}
                    break
        gap = float(np.max(tu.gamma(grid) - tl.gamma(grid)))
        res.append((bad, gap, [p_hi - p for p, p_hi in pay]))
    return res


def _diffusion_pair_block(problem, y_lo, y_hi, rules, x0, horizon, cfg, b, first, last):
    model = problem.model
    system = xi_system(model)
    rng = stream(cfg.seed, b)
    n_rep = last - first
    n = int(round(horizon / cfg.dt))
    dw, dwx = correlate_drivers(model.delta, rng, n, cfg.dt, size=n_rep)
    xi_lo = simulate_xi(system, np.full(n_rep, y_lo), horizon, cfg.dt, dw=dwx)
    xi_hi = simulate_xi(system, np.full(n_rep, y_hi), horizon, cfg.dt, dw=dwx)
    g_lo = gamma_table_from_samples(xi_lo, cfg.dt)
    g_hi = gamma_table_from_samples(xi_hi, cfg.dt)
    t = cfg.dt * np.arange(n + 1)
    log_g = math.log(x0) + np.concatenate([np.zeros((n_rep, 1)), np.cumsum(dw, axis=1)], axis=1) - 0.5 * t
    pay = _rule_payoffs(problem, rules, log_g, lambda r: r.level_at(xi_lo), g_lo, g_hi)
    xi_gap = xi_lo - xi_hi
    gam_gap = g_hi - g_lo
    res = []
    for k in range(n_rep):
        bad = None
        if np.max(xi_gap[k]) > 0:
            j = int(np.argmax(xi_gap[k]))
            bad = {"replication": first + k, "kind": "xi", "time": float(t[j]), "gap": float(xi_gap[k, j])}
        elif np.max(gam_gap[k]) > 0:
            j = int(np.argmax(gam_gap[k]))
            bad = {"replication": first + k, "kind": "Gamma", "time": float(t[j]), "gap": float(gam_gap[k, j])}
        else:
            for r, (p, p_hi) in enumerate(pay):
                if p[k] > p_hi[k]:
                    bad = {"replication": first + k, "kind": f"payoff[{r}]", "time": None,
                           "gap": float(p[k] - p_hi[k])}
                    break
        res.append((bad, float(np.max(gam_gap[k])), [p_hi[k] - p[k] for p, p_hi in pay]))
    return res


def verify_monotonicity_coupled(problem: StoppingProblem, y_low, y_high, rules: Sequence[StoppingRule],
                                cfg: McConfig, x0: float | None = None, horizon: float = 10.0) -> PairedReport:
    """Pathwise comparison of the two starts under one ``G`` path.

    For chain models ``y_low``/``y_high`` are state indices and ``(Z, Z')``
    follow the ordered coupling; for diffusion models they are volatility
    levels driven by the same noise.  Each rule stops on the lower path's
    clock at the first ``G``-grid point below its level (or at ``horizon``, on
    the ``G`` clock), and both starts are paid at that same ``rho``.  Checks:
    ``Z <= Z'``, ``Gamma >= Gamma'`` and discounted payoff ordering, exactly.
    """
    x0 = float(problem.gain.strike or 1.0) if x0 is None else float(x0)
    if isinstance(rules, StoppingRule):
        rules = [rules]
    model = problem.model
    if isinstance(model, ChainModel):
        if int(y_low) > int(y_high):
            raise StartOrderViolated(f"lower start {y_low} exceeds upper start {y_high}")

        def run(b, lo, hi):
            return _chain_pair_block(problem, int(y_low), int(y_high), rules, x0, horizon, cfg, b, lo, hi)
        block = 256
    elif isinstance(model, DiffusionVolModel):
        if not 0 < float(y_low) <= float(y_high):
            raise StartOrderViolated(f"need 0 < y_low <= y_high, got {y_low}, {y_high}")

        def run(b, lo, hi):
            return _diffusion_pair_block(problem, float(y_low), float(y_high), rules, x0, horizon, cfg, b, lo, hi)
        block = 128
    else:
        raise ValidationError("unsupported volatility model")
    rows = [r for part in _map_blocks(run, int(cfg.n_paths), cfg.threads, block) for r in part]
    bad = [r[0] for r in rows if r[0] is not None]
    diffs = np.array([r[2] for r in rows]).reshape(len(rows), len(rules))
    return PairedReport(
        passed=not bad,
        n=len(rows),
        violations=len(bad),
        first_violation=bad[0] if bad else None,
        max_gamma_gap=float(max(r[1] for r in rows)),
        differences=tuple(summarize(diffs[:, r]) for r in range(len(rules))),
        meta={"horizon": horizon, "dt": cfg.dt},
    )


# --- continuity probe --------------------------------------------------------

@dataclass(frozen=True)
class ConvergenceReport:
    levels: np.ndarray
    gamma_levels: np.ndarray  # mean Gamma^n(t_probe) per level
    gamma_limit: float  # mean Gamma^0(t_probe)
    monotone: bool
    converged: bool
    final_rel_gap: float  # max over paths at the closest level
    tol: float
    note: str = ""

    def as_dict(self) -> dict:
        return {
            "levels": self.levels.tolist(),
            "gamma_levels": self.gamma_levels.tolist(),
            "gamma_limit": self.gamma_limit,
            "monotone": self.monotone,
            "converged": self.converged,
            "final_rel_gap": self.final_rel_gap,
            "tol": self.tol,
            "note": self.note,
        }


def probe_continuity(model: DiffusionVolModel, y0: float, direction: str, n_levels: int,
                     t_probe: float, cfg: McConfig, rel_tol: float = 1e-3) -> ConvergenceReport:
    """``Gamma^n(t_probe)`` for starts ``y_n = y0 (1 +/- 10**-n)`` under shared noise.

    ``"down"`` means ``y_n`` decreases to ``y0`` from above, so ``Gamma^n``
    should increase to ``Gamma^0``; ``"up"`` mirrors it.  Monotonicity is
    checked on every path; convergence asks the closest level to be within
    ``rel_tol * Gamma^0`` on every path.
    """
    if direction not in ("up", "down"):
        raise ValidationError("direction must be 'up' or 'down'")
    if n_levels < 1:
        raise ValidationError("need at least one level")
    sign = 1.0 if direction == "down" else -1.0
    levels = y0 * (1 + sign * 10.0 ** -np.arange(1, n_levels + 1))
    system = xi_system(model)
    n = int(round(t_probe / cfg.dt))
    rng = stream(cfg.seed, 0)
    _, dwx = correlate_drivers(model.delta, rng, n, cfg.dt, size=int(cfg.n_paths))
    gam = []
    for y in np.append(levels, y0):
        xi = simulate_xi(system, np.full(int(cfg.n_paths), y), t_probe, cfg.dt, dw=dwx)
        gam.append(gamma_table_from_samples(xi, cfg.dt)[:, -1])
    gam = np.array(gam)  # (n_levels + 1, n_paths); last row is the limit
    steps = np.diff(gam[:-1], axis=0) if n_levels > 1 else np.zeros((0, gam.shape[1]))
    to_limit = gam[-1] - gam[-2]
    if direction == "down":
        monotone = bool(np.all(steps >= 0) and np.all(to_limit >= 0))
    else:
        monotone = bool(np.all(steps <= 0) and np.all(to_limit <= 0))
    gap = float(np.max(np.abs(to_limit) / gam[-1]))
    return ConvergenceReport(
        levels=levels,
        gamma_levels=gam[:-1].mean(axis=1),
        gamma_limit=float(gam[-1].mean()),
        monotone=monotone,
        converged=gap < rel_tol,
        final_rel_gap=gap,
        tol=rel_tol,
        note="checks convergence of the clock only; continuity of the value itself is not tested here",
    )


# --- regression lower bound --------------------------------------------------

@dataclass(frozen=True)
class LsBasis:
    """Polynomial basis in ``x/K`` up to ``degree``, fitted per volatility state."""

    degree: int = 3
    n_dates: int = 50
    dates: np.ndarray | None = None  # explicit exercise dates in (0, T]; overrides n_dates

    def exercise_dates(self, horizon: float) -> np.ndarray:
        if self.dates is not None:
            d = np.asarray(self.dates, dtype=float)
            if d.size == 0 or np.any(np.diff(d) <= 0) or d[0] <= 0 or not math.isclose(d[-1], horizon):
                raise ValidationError("exercise dates must increase strictly in (0, T] and end at T")
            return d
        return horizon * np.arange(1, self.n_dates + 1) / self.n_dates


def _chain_at_dates(model: ChainModel, start: int, dates: np.ndarray, rng, n: int):
    """State at each date and integrated variance over each inter-date interval."""
    q = validate_generator(model.generator)
    out_rate = np.abs(np.diag(q))
    jump = np.clip(q, 0.0, None)
    np.fill_diagonal(jump, 0.0)
    jump = np.cumsum(jump / np.where(out_rate > 0, out_rate, 1.0)[:, None], axis=1)
    y2 = model.states**2
    edges = np.concatenate(([0.0], dates))
    state_at = np.empty((n, dates.size), int)
    cum_var = np.zeros((n, edges.size))
    t = np.zeros(n)
    state = np.full(n, int(start))
    active = np.arange(n)
    horizon = edges[-1]
    while active.size:
        i = state[active]
        with np.errstate(divide="ignore"):
            end = t[active] + rng.exponential(size=active.size) / out_rate[i]
        lo, hi = t[active][:, None], np.minimum(end, horizon)[:, None]
        cum_var[active] += y2[i][:, None] * np.clip(np.minimum(edges, hi) - lo, 0.0, None)
        inside = (dates >= lo) & (dates < hi)
        state_at[active] = np.where(inside, i[:, None], state_at[active])
        if np.any(end >= horizon):
            last = active[end >= horizon]
            state_at[last, -1] = state[last]
        going = end < horizon
        active, t_new = active[going], end[going]
        t[active] = t_new
        if active.size:
            u = rng.random(active.size)
            state[active] = np.argmax(u[:, None] < jump[state[active]], axis=1)
    return state_at, np.diff(cum_var, axis=1)


def _ls_paths(problem, x0, start, dates, rng, n):
    state, var = _chain_at_dates(problem.model, start, dates, rng, n)
    dt = np.diff(np.concatenate(([0.0], dates)))
    drift = (problem.rate * dt if problem.form == "pricing" else 0.0) - 0.5 * var
    log_s = math.log(x0) + np.cumsum(drift + np.sqrt(var) * rng.standard_normal(var.shape), axis=1)
    s = np.exp(log_s)
    return s, state, np.exp(-problem.rate * dates) * problem.gain(s)


def _design(s: np.ndarray, strike: float, degree: int) -> np.ndarray:
    return np.vander(s / strike, degree + 1, increasing=True)


def ls_lower_bound_finite_T(problem: StoppingProblem, basis_spec: LsBasis, cfg: McConfig,
                            x0: float | None = None, start: int = 0) -> Estimate:
    """Longstaff-Schwartz rule fitted on one set of paths, evaluated on another.

    The rule is feasible, so its value on fresh paths is an unbiased estimate of
    a lower bound for the finite-horizon value.  Regression uses in-the-money
    paths per volatility state; states with too few such paths simply continue.
    """
    model = problem.model
    if not isinstance(model, ChainModel):
        raise ValidationError("regression bound implemented for chain models")
    T = problem.horizon
    if not math.isfinite(T):
        raise ValidationError("regression bound needs a finite horizon")
    x0 = float(problem.gain.strike or 1.0) if x0 is None else float(x0)
    g0 = float(problem.gain(x0))
    if T == 0:
        return summarize(np.full(int(cfg.n_paths), g0))
    dates = basis_spec.exercise_dates(T)
    strike = float(problem.gain.strike or x0)
    p = basis_spec.degree + 1

    def simulate(offset):
        def run(b, lo, hi):
            return _ls_paths(problem, x0, start, dates, stream(cfg.seed, offset, b), hi - lo)
        parts = _map_blocks(run, int(cfg.n_paths), cfg.threads)
        return tuple(np.concatenate([pt[k] for pt in parts]) for k in range(3))

    s, st, pay = simulate(0)
    n_dates = dates.size
    coef = np.zeros((n_dates, model.m, p))
    usable = np.zeros((n_dates, model.m), bool)
    cash = pay[:, -1].copy()
    for k in range(n_dates - 2, -1, -1):
        for i in range(model.m):
            sel = (st[:, k] == i) & (pay[:, k] > 0)
            if sel.sum() < 2 * p:
                continue
            a = _design(s[sel, k], strike, basis_spec.degree)
            beta, _, rank, _ = np.linalg.lstsq(a, cash[sel], rcond=None)
            if rank < p:
                raise RegressionSingular(f"date {k}, state {i}: design matrix rank {rank} < {p}")
            coef[k, i], usable[k, i] = beta, True
            ex = sel.copy()
            ex[sel] = pay[sel, k] > a @ beta
            cash[ex] = pay[ex, k]
    exercise_now = g0 > 0 and g0 >= float(np.mean(cash))

    s, st, pay = simulate(1)
    if exercise_now:
        return summarize(np.full(s.shape[0], g0))
    value = pay[:, -1].copy()
    done = np.zeros(s.shape[0], bool)
    for k in range(n_dates - 1):
        cont = np.full(s.shape[0], math.inf)
        for i in range(model.m):
            sel = (st[:, k] == i) & usable[k, i]
            if np.any(sel):
                cont[sel] = _design(s[sel, k], strike, basis_spec.degree) @ coef[k, i]
        ex = ~done & (pay[:, k] > 0) & (pay[:, k] > cont)
        value[ex] = pay[ex, k]
        done |= ex
    return summarize(value)


# --- independence of the time-changed pair ---------------------------------

@dataclass(frozen=True)
class IndependenceReport:
    passed: bool
    correlations: dict
    z_scores: dict
    n: int


def independence_statistic(model: ChainModel, start: int, horizon: float, n_steps: int,
                           cfg: McConfig, x0: float = 1.0) -> IndependenceReport:
    """Correlation of reconstructed driver increments with functionals of ``Y``.

    ``X`` is built as ``G`` read at ``A(t)`` on an original-clock grid; the
    increments of the recovered driver should be uncorrelated with the
    volatility path (reported as ``r * sqrt(n)``, passing within 3).
    """
    t = np.linspace(0.0, horizon, n_steps + 1)
    inc, y_left, y_right = [], [], []
    qs = time_scaled_generator(model)
    for rep in range(int(cfg.n_paths)):
        rng = stream(cfg.seed, rep)
        # enough G-clock time to cover the original horizon
        g_horizon = horizon * float(np.max(model.states)) ** 2 * (1 + 1e-9)
        path = simulate_chain(qs, start, g_horizon, rng)
        tc = gamma_from_chain(path, model.states)
        a = tc.inverse(t)
        w = np.concatenate(([0.0], np.cumsum(np.sqrt(np.diff(a)) * rng.standard_normal(n_steps))))
        x = x0 * np.exp(w - 0.5 * a)
        y = tc.volatility(a)
        inc.append(reconstructed_driver_increments(x, y, t, clock=a))
        y_left.append(y[:-1])
        y_right.append(y[1:])
    d = np.concatenate(inc)
    corr, zs = {}, {}
    for name, f in (("Y_left", np.concatenate(y_left)), ("Y_right", np.concatenate(y_right))):
        r = float(np.corrcoef(d, f)[0, 1]) if np.std(f) > 0 else 0.0
        corr[name], zs[name] = r, r * math.sqrt(d.size)
    return IndependenceReport(all(abs(z) < 3 for z in zs.values()), corr, zs, int(d.size))
