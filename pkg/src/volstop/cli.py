"""Command-line front end.

Configs are INI files (one ``[model]`` section plus ``[problem]``, ``[solver]``,
``[mc]`` and friends; see ``configs/``).  Every command validates first, writes
deterministic CSV/JSON into the output directory and exits with

    0 pass, 1 a verified check failed, 2 bad input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import math
import os
import subprocess
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .chain import ChainModel, simulate_chain, simulate_coupled, time_scaled_generator, validate_chain
from .errors import (
    BadGenerator,
    ConfigError,
    ModelConditionFailed,
    NotSkipFree,
    ValidationError,
    VolstopError,
)
from .models import DiffusionVolModel, simulate_xi, validate_model, xi_system
from .montecarlo import (
    McConfig,
    StoppingRule,
    probe_continuity,
    verify_monotonicity_coupled,
)
from .rng import stream
from .stopping import (
    GainFunction,
    StoppingProblem,
    check_monotone_surface,
    extract_thresholds,
    finite_horizon_value,
    log_grid,
    ordered_threshold_search,
    solve_value_iteration,
)
from .timechange import gamma_from_chain, gamma_from_samples

THREADS_ENV = "VOLSTOP_THREADS"
EXIT_PASS, EXIT_FAIL, EXIT_INPUT, EXIT_SOLVER = 0, 1, 2, 3


# --- config ----------------------------------------------------------------

def _floats(text: str, what: str) -> list[float]:
    parts = [p for p in text.replace(",", " ").split() if p]
    try:
        return [float(p) for p in parts]
    except ValueError as exc:
        raise ConfigError(f"{what}: {exc}") from None


def _float(sec, key, default=None) -> float:
    if key not in sec:
        if default is None:
            raise ConfigError(f"[{sec.name}] missing {key}")
        return float(default)
    try:
        return float(sec[key])
    except ValueError:
        raise ConfigError(f"[{sec.name}] {key} is not a number: {sec[key]!r}") from None


def _int(sec, key, default=None) -> int:
    v = _float(sec, key, default)
    if v != int(v):
        raise ConfigError(f"[{sec.name}] {key} must be an integer")
    return int(v)


def _section(cp, name):
    if not cp.has_section(name):
        cp.add_section(name)
    return cp[name]


@dataclass
class RunConfig:
    model: object
    problem: StoppingProblem
    solver: configparser.SectionProxy
    mc: McConfig
    mc_section: configparser.SectionProxy
    raw: configparser.ConfigParser
    out_dir: Path


def parse_generator(text: str, m: int) -> np.ndarray:
    """Rows on separate lines (or separated by ``;``), entries by commas/spaces."""
    rows = [r for r in text.replace(";", "\n").splitlines() if r.strip()]
    q = []
    for k, row in enumerate(rows):
        try:
            vals = [float(p) for p in row.replace(",", " ").split()]
        except ValueError:
            raise BadGenerator(f"generator row {k + 1} is not numeric: {row.strip()!r}") from None
        if len(vals) != m:
            raise BadGenerator(f"generator row {k + 1} has {len(vals)} entries, expected {m}")
        q.append(vals)
    if len(q) != m:
        raise BadGenerator(f"generator has {len(q)} rows, expected {m}")
    return np.array(q)


def build_model(sec):
    kind = sec.get("kind", "").strip().lower()
    if kind == "chain":
        if "states" not in sec or "generator" not in sec:
            raise ConfigError("[model] chain needs states and generator")
        states = _floats(sec["states"], "states")
        return validate_chain(states, parse_generator(sec["generator"], len(states)))
    delta = _float(sec, "delta", 0.0)
    if kind in ("hullwhite", "hull_white"):
        model = DiffusionVolModel.hull_white(_float(sec, "eta"), _float(sec, "kappa"), delta)
    elif kind == "heston":
        model = DiffusionVolModel.heston(_float(sec, "eta"), _float(sec, "kappa"), _float(sec, "lambda"), delta)
    else:
        raise ConfigError(f"[model] kind must be chain, hullwhite or heston, got {kind!r}")
    report = validate_model(model)
    if report.passed is False:
        raise ModelConditionFailed(f"phi = {report.phi!r} < 2: {report.note}")
    return model


def build_gain(sec) -> GainFunction:
    kind = sec.get("gain", "put").strip().lower()
    if kind == "put":
        return GainFunction.put(_float(sec, "strike", 1.0))
    if kind == "constant":
        return GainFunction.constant(_float(sec, "value"))
    raise ConfigError(f"[problem] unknown gain {kind!r}")


def load_config(path, seed=None, out=None, threads=1) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    if not cp.has_section("model"):
        raise ConfigError("config needs a [model] section")
    model = build_model(cp["model"])
    prob = _section(cp, "problem")
    horizon = prob.get("horizon", "inf").strip().lower()
    problem = StoppingProblem(
        model=model,
        gain=build_gain(prob),
        rate=_float(prob, "rate"),
        horizon=math.inf if horizon in ("inf", "infinity") else _float(prob, "horizon"),
        form=prob.get("form", "pricing").strip().lower(),
    )
    mcs = _section(cp, "mc")
    mc = McConfig(
        n_paths=_int(mcs, "n_paths", 10_000),
        dt=_float(mcs, "dt", 1e-3),
        horizon_cap=_float(mcs, "horizon_cap", 1_000.0),
        seed=int(seed) if seed is not None else _int(mcs, "seed", 0),
        antithetic=mcs.getboolean("antithetic", fallback=False),
        threads=threads,
    )
    out_dir = Path(out) if out else Path(_section(cp, "output").get("directory", "out"))
    return RunConfig(model, problem, _section(cp, "solver"), mc, mcs, cp, out_dir)


# --- output ----------------------------------------------------------------

def _num(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_csv(path: Path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_num(v) for v in row])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else repr(f)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path: Path, data: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_jsonable(data), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _git_describe() -> str:
    try:
        res = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        return res.stdout.strip() if res.returncode == 0 and res.stdout.strip() else "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


# --- commands ----------------------------------------------------------------

def _need_chain(cfg: RunConfig, what: str) -> ChainModel:
    if not isinstance(cfg.model, ChainModel):
        raise ValidationError(f"{what} needs a chain volatility model")
    return cfg.model


def _grid(cfg: RunConfig):
    strike = cfg.problem.gain.strike or 1.0
    return log_grid(strike, _int(cfg.solver, "grid_points", 2000), _float(cfg.solver, "grid_span", 1e3))


def _solve(cfg: RunConfig):
    _need_chain(cfg, "price")
    tol = _float(cfg.solver, "tol", 1e-10)
    if math.isfinite(cfg.problem.horizon):
        return finite_horizon_value(cfg.problem, _grid(cfg), t_steps=_int(cfg.solver, "t_steps", 1000))
    return solve_value_iteration(cfg.problem, _grid(cfg), tol=tol, max_iters=_int(cfg.solver, "max_iters", 200))


def cmd_price(cfg: RunConfig) -> int:
    surface = _solve(cfg)
    th = extract_thresholds(surface)
    states = surface.states
    write_csv(
        cfg.out_dir / "surface.csv",
        ["x", "y_state", "v"],
        ((x, states[i], surface.values[i, j]) for i in range(states.size) for j, x in enumerate(surface.x_grid)),
    )
    write_csv(cfg.out_dir / "thresholds.csv", ["y_state", "b"], zip(states, th.b))
    write_json(cfg.out_dir / "metadata.json", {
        "command": "price",
        "version": __version__,
        "git_describe": _git_describe(),
        "iterations": surface.iterations,
        "residual": surface.residual,
        "tol": surface.tol,
        "contact_tol": th.contact_tol,
        "grid": {"points": int(surface.x_grid.size), "x_min": surface.x_grid[0], "x_max": surface.x_grid[-1]},
        "method": surface.meta.get("method"),
        "assumptions": cfg.problem.assumptions(),
    })
    return EXIT_PASS


def _report(cfg: RunConfig, name: str, data: dict, passed: bool) -> int:
    data = {"check": name, "passed": bool(passed), "version": __version__, **data}
    write_json(cfg.out_dir / f"verify_{name}.json", data)
    return EXIT_PASS if passed else EXIT_FAIL


def verify_monotone(cfg: RunConfig) -> int:
    surface = _solve(cfg)
    rep = check_monotone_surface(surface, 10 * surface.tol if surface.tol else 1e-12)
    return _report(cfg, "monotone", {
        "max_violation": rep.max_violation,
        "worst_cell": None if rep.worst is None else {
            "state": rep.worst[0], "x": surface.x_grid[rep.worst[1]],
            "v_low": surface.values[rep.worst[0], rep.worst[1]],
            "v_high": surface.values[rep.worst[0] + 1, rep.worst[1]],
        },
        "tol": rep.tol,
    }, rep.passed)


def verify_ordering(cfg: RunConfig) -> int:
    model = _need_chain(cfg, "ordering")
    grid = _grid(cfg)
    if not model.skip_free:
        raise NotSkipFree("ordering check needs a tridiagonal generator")
    ex, n_ex = ordered_threshold_search(cfg.problem, "exhaustive", grid)
    mo, n_mo = ordered_threshold_search(cfg.problem, "monotone", grid)
    surface = solve_value_iteration(cfg.problem, grid, tol=_float(cfg.solver, "tol", 1e-10))
    vi = extract_thresholds(surface)
    agree = bool(np.max(np.abs(ex.indices - mo.indices)) <= 1)
    decreasing = bool(np.all(np.diff(vi.indices) <= 1)) and bool(np.all(np.diff(vi.b) < 0) or model.m == 1)
    return _report(cfg, "ordering", {
        "orderings_examined": {"exhaustive": n_ex, "monotone": n_mo},
        "thresholds": {"exhaustive": ex.b, "monotone": mo.b, "value_iteration": vi.b},
        "modes_agree": agree,
        "strictly_decreasing": decreasing,
    }, agree and decreasing)


def _rules(cfg: RunConfig) -> list[StoppingRule]:
    sec = _section(cfg.raw, "rule")
    kind = sec.get("kind", "original_time").strip()
    if "levels" in sec:
        levels = _floats(sec["levels"], "levels")
        return [StoppingRule.threshold(levels if len(levels) > 1 else levels[0], kind)]
    if isinstance(cfg.model, ChainModel):
        th = extract_thresholds(solve_value_iteration(cfg.problem, _grid(cfg)))
        return [StoppingRule.threshold(th.b, kind)]
    strike = cfg.problem.gain.strike or 1.0
    return [StoppingRule.threshold(0.8 * strike, kind)]


def verify_coupling(cfg: RunConfig) -> int:
    model, mcs = cfg.model, cfg.mc_section
    if isinstance(model, ChainModel):
        if not model.skip_free:
            raise NotSkipFree("coupling needs a tridiagonal generator")
        lo, hi = _int(mcs, "start", 0), _int(mcs, "start_upper", model.m - 1)
    else:
        lo, hi = _float(mcs, "y0"), _float(mcs, "y0_upper")
    rep = verify_monotonicity_coupled(
        cfg.problem, lo, hi, _rules(cfg), cfg.mc,
        x0=_float(mcs, "x0", cfg.problem.gain.strike or 1.0), horizon=_float(mcs, "horizon", 10.0),
    )
    return _report(cfg, "coupling", rep.as_dict(), rep.passed)


def verify_continuity(cfg: RunConfig) -> int:
    if not isinstance(cfg.model, DiffusionVolModel):
        raise ValidationError("continuity probe needs a diffusion volatility model")
    sec = _section(cfg.raw, "continuity")
    reports, ok = {}, True
    directions = [d.strip() for d in sec.get("directions", "down, up").split(",") if d.strip()]
    for d in directions:
        rep = probe_continuity(cfg.model, _float(sec, "y0"), d, _int(sec, "n_levels", 5),
                               _float(sec, "t_probe", 1.0), cfg.mc, _float(sec, "rel_tol", 1e-3))
        reports[d] = rep.as_dict()
        ok = ok and rep.monotone and rep.converged
    return _report(cfg, "continuity", {"directions": reports}, ok)


def _exact_gbm(x0: float, times: np.ndarray, rng) -> np.ndarray:
    """``x0 exp(W - t/2)`` at sorted ``times`` (starting at 0)."""
    w = np.concatenate(([0.0], np.cumsum(np.sqrt(np.diff(times)) * rng.standard_normal(times.size - 1))))
    return x0 * np.exp(w - 0.5 * times)


def cmd_export_paths(cfg: RunConfig) -> int:
    sec = _section(cfg.raw, "export")
    n_rep = _int(sec, "paths", 5)
    step = _float(sec, "step", 0.01)
    horizon = _float(sec, "horizon", 1.0)
    n = int(round(horizon / step))
    t = step * np.arange(n + 1)
    x0 = _float(cfg.mc_section, "x0", cfg.problem.gain.strike or 1.0)
    model = cfg.model
    rows = []
    for rep in range(n_rep):
        rng = stream(cfg.mc.seed, rep)
        if isinstance(model, ChainModel):
            lo = _int(cfg.mc_section, "start", 0)
            hi = _int(cfg.mc_section, "start_upper", lo)
            if lo != hi and not model.skip_free:
                raise NotSkipFree("coupled export needs a tridiagonal generator")
            # enough clock so that A(t) is defined up to the horizon
            h_g = horizon * max(1.0, float(np.max(model.states)) ** 2)
            pair = simulate_coupled(model, lo, hi, h_g, rng) if model.skip_free else None
            if pair is None:
                path = simulate_chain(time_scaled_generator(model), lo, h_g, rng)
                low = up = path
            else:
                low, up = pair.lower, pair.upper
            tl, tu = gamma_from_chain(low, model.states), gamma_from_chain(up, model.states)
            z, z_up = model.states[low.state_at(t)], model.states[up.state_at(t)]
        else:
            y0 = _float(cfg.mc_section, "y0")
            y1 = _float(cfg.mc_section, "y0_upper", y0)
            dt = cfg.mc.dt
            # cover A(horizon) as well: Gamma grows at least like t / max(xi)^2
            m_steps = int(round(horizon / dt))
            dw = math.sqrt(dt) * rng.standard_normal(m_steps)
            system = xi_system(model)
            xs = simulate_xi(system, np.array([y0, y1]), horizon, dt, dw=np.broadcast_to(dw, (2, m_steps)))
            while gamma_from_samples(xs[0], dt).gamma_max < horizon:
                extra = math.sqrt(dt) * rng.standard_normal(m_steps)
                more = simulate_xi(system, xs[:, -1], horizon, dt, dw=np.broadcast_to(extra, (2, m_steps)))
                xs = np.concatenate([xs, more[:, 1:]], axis=1)
                dw = np.concatenate([dw, extra])
            tl, tu = gamma_from_samples(xs[0], dt), gamma_from_samples(xs[1], dt)
            z, z_up = tl.volatility(t), tu.volatility(t)
        a = tl.inverse(t)
        times = np.union1d(t, a)
        g_all = _exact_gbm(x0, times, rng)
        g = g_all[np.searchsorted(times, t)]
        x_tilde = g_all[np.searchsorted(times, a)]
        y_tilde = tl.volatility(a)
        gam, gam_up = tl.gamma(t), tu.gamma(t)
        for k in range(n + 1):
            rows.append((rep, t[k], g[k], z[k], z_up[k], gam[k], gam_up[k], a[k], x_tilde[k], y_tilde[k]))
    write_csv(cfg.out_dir / "paths.csv",
              ["rep", "t", "G", "Z", "Z_prime", "Gamma", "Gamma_prime", "A", "X_tilde", "Y_tilde"], rows)
    return EXIT_PASS


def cmd_validate(cfg: RunConfig) -> int:
    model = cfg.model
    data = {"command": "validate", "version": __version__, "valid": True}
    if isinstance(model, ChainModel):
        data.update(model="chain", states=model.states, skip_free=model.skip_free)
    else:
        rep = validate_model(model)
        data.update(model=model.kind, phi=rep.phi, inequality=rep.inequality, note=rep.note)
    data["assumptions"] = cfg.problem.assumptions()
    write_json(cfg.out_dir / "validate.json", data)
    return EXIT_PASS


VERIFY = {
    "monotone": verify_monotone,
    "coupling": verify_coupling,
    "continuity": verify_continuity,
    "ordering": verify_ordering,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="INI config file")
    common.add_argument("--seed", type=int, help="override [mc] seed")
    common.add_argument("--out", help="output directory (overrides [output] directory)")
    common.add_argument("--threads", type=int, help=f"worker threads (default ${THREADS_ENV} or 1)")
    parser = argparse.ArgumentParser(prog="volstop", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("price", parents=[common], help="solve the value surface and thresholds")
    v = sub.add_parser("verify", parents=[common], help="run a verification check")
    v.add_argument("check", choices=sorted(VERIFY))
    sub.add_parser("export-paths", parents=[common], help="export simulated time-changed paths")
    sub.add_parser("validate", parents=[common], help="validate the config only")
    return parser


def _threads(arg) -> int:
    if arg is not None:
        return arg
    env = os.environ.get(THREADS_ENV, "").strip()
    if not env:
        return 1
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from None


def _fail(exc: VolstopError, code: int) -> int:
    print(json.dumps({"error": exc.reason, "message": str(exc), "exit_code": code}, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed, args.out, _threads(args.threads))
        if args.command == "price":
            return cmd_price(cfg)
        if args.command == "verify":
            return VERIFY[args.check](cfg)
        if args.command == "export-paths":
            return cmd_export_paths(cfg)
        return cmd_validate(cfg)
    except ValidationError as exc:
        return _fail(exc, EXIT_INPUT)
    except VolstopError as exc:
        return _fail(exc, EXIT_SOLVER)


if __name__ == "__main__":
    sys.exit(main())
