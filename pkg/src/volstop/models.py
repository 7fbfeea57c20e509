"""Diffusion volatility models and the decoupled system in changed time.

Original dynamics::

    dX = a(X) Y dB,   dY = eta(Y) dB^Y + theta(Y) dt,   d<B, B^Y> = delta dt

Running the clock ``A = Gamma^{-1}`` decouples them into::

    dG = a(G) dW,     dxi = eta(xi)/xi dW^xi + theta(xi)/xi**2 dt

For the Hull-White and Heston parameterisations, ``xi`` is simulated in a
Bessel-type coordinate ``Z`` where the singular drift ``c/Z`` is stepped
implicitly.  The implicit step is a root of a quadratic, strictly positive for
``c > 0`` and increasing in the previous state, so paths started from ordered
initial values and driven by the same noise stay ordered.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np

from .errors import DeltaOutOfRange, RangeExceeded, SchemeBreakdown, ValidationError
from .timechange import TimeChangePath

Coefficient = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class DiffusionVolModel:
    """Volatility SDE ``dY = eta(Y) dB^Y + theta(Y) dt``.

    ``kind`` is ``"hull_white"``, ``"heston"`` or ``"generic"``; named kinds keep
    their raw parameters in ``params`` so validity can be checked in closed form.
    """

    eta: Coefficient
    theta: Coefficient
    delta: float = 0.0
    kind: str = "generic"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not -1.0 <= self.delta <= 1.0:
            raise DeltaOutOfRange(f"delta = {self.delta!r} outside [-1, 1]")

    @classmethod
    def hull_white(cls, eta: float, kappa: float, delta: float = 0.0) -> "DiffusionVolModel":
        """``dV = 2 eta V dB^Y + kappa V dt`` with ``Y = sqrt(V)``."""
        if not (eta > 0 and kappa > 0):
            raise ValidationError("Hull-White needs eta > 0 and kappa > 0")
        theta = (kappa - eta**2) / 2
        return cls(
            eta=lambda y: eta * y,
            theta=lambda y: theta * y,
            delta=delta,
            kind="hull_white",
            params={"eta": eta, "kappa": kappa, "theta": theta},
        )

    @classmethod
    def heston(cls, eta: float, kappa: float, lam: float, delta: float = 0.0) -> "DiffusionVolModel":
        """``dV = 2 eta sqrt(V) dB^Y + kappa (lam - V) dt`` with ``Y = sqrt(V)``."""
        if not (eta > 0 and kappa > 0 and lam > 0):
            raise ValidationError("Heston needs eta, kappa, lambda > 0")
        theta1 = (kappa * lam - eta**2) / 2
        theta2 = kappa / 2
        return cls(
            eta=lambda y: eta + 0.0 * y,
            theta=lambda y: theta1 / y - theta2 * y,
            delta=delta,
            kind="heston",
            params={"eta": eta, "kappa": kappa, "lambda": lam, "theta1": theta1, "theta2": theta2},
        )


@dataclass(frozen=True)
class XiSystem:
    """Volatility equation on the changed clock, plus the Bessel dimension."""

    model: DiffusionVolModel
    bessel_dimension: float | None

    def diffusion(self, xi):
        xi = np.asarray(xi, dtype=float)
        return np.broadcast_to(self.model.eta(xi), xi.shape) / xi

    def drift(self, xi):
        xi = np.asarray(xi, dtype=float)
        return np.broadcast_to(self.model.theta(xi), xi.shape) / xi**2


def _dec(x: float) -> Fraction:
    # shortest round-trip decimal, i.e. the value the user typed
    return Fraction(repr(float(x)))


def _exact_phi(model: DiffusionVolModel) -> Fraction | None:
    if model.kind not in ("hull_white", "heston"):
        return None
    p = model.params
    eta2 = _dec(p["eta"]) ** 2
    if model.kind == "hull_white":
        theta = (_dec(p["kappa"]) - eta2) / 2
        return 1 + 2 * theta / eta2
    if model.kind == "heston":
        theta1 = (_dec(p["kappa"]) * _dec(p["lambda"]) - eta2) / 2
        return theta1 / eta2 + Fraction(3, 2)
    return None


def xi_system(model: DiffusionVolModel) -> XiSystem:
    """Changed-clock volatility equation; ``phi = 1 + 2 theta/eta^2`` (Hull-White)
    or ``theta1/eta^2 + 3/2`` (Heston), evaluated exactly on decimal inputs."""
    phi = _exact_phi(model)
    return XiSystem(model, None if phi is None else float(phi))


@dataclass(frozen=True)
class ValidityReport:
    passed: bool | None
    phi: float | None
    inequality: str
    lhs: float | None = None
    rhs: float | None = None
    note: str = ""
    phi_exact: Fraction | None = None  # phi on the decimal inputs; ``phi`` is its rounding


def validate_model(model: DiffusionVolModel) -> ValidityReport:
    """``phi >= 2`` test for named models; generic coefficients are unverifiable."""
    phi = _exact_phi(model)
    if phi is None:
        return ValidityReport(None, None, "none", note="unverifiable: user asserts a unique nonexploding positive strong solution")
    p = model.params
    rhs = 2 * _dec(p["eta"]) ** 2
    if model.kind == "hull_white":
        lhs, text = _dec(p["kappa"]), "kappa >= 2*eta^2"
    else:
        lhs, text = _dec(p["kappa"]) * _dec(p["lambda"]), "kappa*lambda >= 2*eta^2"
    note = "unique positive nonexploding strong solution; clock diverges" if phi >= 2 else f"fails {text}"
    return ValidityReport(bool(phi >= 2), float(phi), text, float(lhs), float(rhs), note, phi)


def correlate_drivers(delta: float, rng: np.random.Generator, n_steps: int, dt: float, size=()):
    """Increments ``(dW, dW_xi)`` with per-step correlation ``delta``."""
    if not -1.0 <= delta <= 1.0:
        raise DeltaOutOfRange(f"delta = {delta!r} outside [-1, 1]")
    shape = (*np.atleast_1d(size).astype(int).tolist(), n_steps) if np.size(size) else (n_steps,)
    sq = math.sqrt(dt)
    dw = sq * rng.standard_normal(shape)
    perp = sq * rng.standard_normal(shape)
    return dw, delta * dw + math.sqrt(1.0 - delta * delta) * perp


def _bessel_coordinates(system: XiSystem):
    """``(to_z, from_z, c, b)`` with ``dZ = dW + (c/Z + b) dt``."""
    p = system.model.params
    eta = p["eta"]
    c = (system.bessel_dimension - 1) / 2
    if system.model.kind == "hull_white":
        return (lambda x: x / eta), (lambda z: eta * z), c, 0.0
    return (lambda x: x * x / (2 * eta)), (lambda z: np.sqrt(2 * eta * z)), c, -p["theta2"] / eta


def _implicit_step(z, dw, c, b, dt):
    u = z + b * dt + dw
    k = 4 * c * dt
    root = np.sqrt(u * u + k)
    # two algebraically equal forms; each branch avoids cancellation
    return np.where(u >= 0, 0.5 * (u + root), k / (2 * np.where(u >= 0, 1.0, root - u)))


def simulate_xi(system: XiSystem, y0, horizon: float, dt: float = 1e-3,
                rng: np.random.Generator | None = None, dw=None) -> np.ndarray:
    """Sample ``xi`` on the grid ``k*dt``; returns shape ``(*batch, n_steps + 1)``.

    ``dw`` supplies the driving increments (for shared-noise coupling); when
    omitted they are drawn from ``rng`` with the shape of ``y0``.
    """
    n = int(round(horizon / dt))
    if n < 1 or not math.isclose(n * dt, horizon, rel_tol=1e-9):
        raise ValidationError("horizon must be a positive multiple of dt")
    y0 = np.asarray(y0, dtype=float)
    if np.any(y0 <= 0):
        raise ValidationError("initial volatility must be positive")
    if dw is None:
        if rng is None:
            raise ValidationError("need rng or dw")
        dw = math.sqrt(dt) * rng.standard_normal((*y0.shape, n))
    dw = np.asarray(dw, dtype=float)
    if dw.shape[-1] != n:
        raise ValidationError(f"expected {n} increments, got {dw.shape[-1]}")
    batch = np.broadcast_shapes(y0.shape, dw.shape[:-1])
    out = np.empty((*batch, n + 1))
    out[..., 0] = y0
    if system.bessel_dimension is not None:
        to_z, from_z, c, b = _bessel_coordinates(system)
        z = np.broadcast_to(to_z(y0), batch).copy()
        for k in range(n):
            if c > 0:
                z = _implicit_step(z, dw[..., k], c, b, dt)
            else:
                z = z + (c / z + b) * dt + dw[..., k]
                if np.any(z <= 0):
                    raise SchemeBreakdown(k + 1, float(np.min(z)))
            out[..., k + 1] = from_z(z)
        bad = ~(out[..., 1:] > 0)
        if np.any(bad):
            k = int(np.argwhere(bad)[0][-1])
            raise SchemeBreakdown(k + 1, float(out[..., k + 1].min()))
        return out
    x = np.broadcast_to(y0, batch).copy()
    for k in range(n):
        x = x + system.drift(x) * dt + system.diffusion(x) * dw[..., k]
        if np.any(x <= 0):
            raise SchemeBreakdown(k + 1, float(np.min(x)))
        out[..., k + 1] = x
    return out


@dataclass(frozen=True)
class AssetPath:
    """``G`` on a uniform grid of the changed clock."""

    times: np.ndarray
    values: np.ndarray

    def at(self, s):
        s = np.asarray(s, dtype=float)
        if np.any(s < 0) or np.any(s > self.times[-1] * (1 + 1e-12)):
            raise RangeExceeded(f"G path covers [0, {self.times[-1]}]")
        return np.interp(s, self.times, self.values)


def simulate_G(x0: float, a_kind="linear", horizon: float = 1.0, dt: float = 1e-3,
               rng: np.random.Generator | None = None, dw=None) -> AssetPath:
    """Simulate ``dG = a(G) dW``.

    ``a_kind="linear"`` uses the exact solution ``x0 exp(W - t/2)``;
    ``"zero"`` gives a constant path; a callable ``a`` is stepped by
    Euler-Maruyama (its Lipschitz property is the caller's responsibility).
    """
    n = int(round(horizon / dt))
    if n < 1:
        raise ValidationError("horizon must be at least one step")
    times = dt * np.arange(n + 1)
    if dw is None:
        dw = math.sqrt(dt) * rng.standard_normal(n)
    dw = np.asarray(dw, dtype=float)
    if a_kind == "linear":
        if x0 <= 0:
            raise ValidationError("x0 must be positive for a(x) = x")
        w = np.concatenate(([0.0], np.cumsum(dw)))
        return AssetPath(times, x0 * np.exp(w - 0.5 * times))
    if a_kind == "zero":
        return AssetPath(times, np.full(n + 1, float(x0)))
    if not callable(a_kind):
        raise ValidationError(f"unknown a_kind {a_kind!r}")
    g = np.empty(n + 1)
    g[0] = x0
    for k in range(n):
        g[k + 1] = g[k] + a_kind(g[k]) * dw[k]
    return AssetPath(times, g)


def time_changed_pair(G: AssetPath, tc: TimeChangePath, t):
    """``(X_tilde(t), Y_tilde(t)) = (G(A(t)), vol(A(t)))`` on original-clock times ``t``."""
    a = tc.inverse(t)
    return G.at(a), tc.volatility(a)


def reconstructed_driver_increments(x_tilde, y_tilde, t, clock=None):
    """Increments of the original-clock driver recovered from ``a(x) = x`` paths.

    ``dB ~ (dlog X + Y**2 dt / 2) / Y``, using the volatility at the left end.
    When the clock ``A(t) = int Y**2`` is supplied, the exact integrated
    variance replaces ``Y**2 dt`` and the increments are standardised by its root.
    """
    dlog = np.diff(np.log(x_tilde))
    if clock is not None:
        da = np.diff(clock)
        return (dlog + 0.5 * da) / np.sqrt(da)
    dt = np.diff(t)
    y = np.asarray(y_tilde)[..., :-1]
    return (dlog + 0.5 * y**2 * dt) / y
