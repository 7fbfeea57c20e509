"""Closed-form reference values, coded independently of the package.

Run directly to print the reference numbers used by the tests:

    python tests/oracles.py
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
from scipy.optimize import minimize_scalar


def put_threshold(strike: float, rate: float, sigma: float) -> float:
    """Optimal exercise level of the perpetual put with constant volatility."""
    return 2 * rate * strike / (2 * rate + sigma**2)


def put_value(x, strike: float, rate: float, sigma: float):
    """Perpetual put value: ``(K - b)(x/b)^(-2r/sigma^2)`` above ``b``, ``K - x`` below."""
    b = put_threshold(strike, rate, sigma)
    gamma = 2 * rate / sigma**2
    x = np.asarray(x, dtype=float)
    return np.where(x > b, (strike - b) * (x / b) ** (-gamma), strike - x)


def put_threshold_by_search(strike: float, rate: float, sigma: float) -> float:
    """Same threshold found numerically: maximise the value of the rule "exercise
    below b" at a reference point above every candidate, ``(K - b)(x/b)^(-gamma)``."""
    gamma = 2 * rate / sigma**2
    x_ref = 10 * strike
    res = minimize_scalar(lambda b: -(strike - b) * (x_ref / b) ** (-gamma),
                          bounds=(1e-9, strike), method="bounded", options={"xatol": 1e-12})
    return float(res.x)


def threshold_rule_value(x, level: float, strike: float, rate: float, sigma: float):
    """Value of exercising the first time the price drops below ``level``."""
    gamma = 2 * rate / sigma**2
    x = np.asarray(x, dtype=float)
    return np.where(x > level, (strike - level) * (x / level) ** (-gamma), strike - x)


def european_put(x: float, strike: float, rate: float, sigma: float, t: float) -> float:
    """Black-Scholes price of a European put, for stop-at-maturity checks."""
    from scipy.stats import norm

    sd = sigma * math.sqrt(t)
    d1 = (math.log(x / strike) + (rate + 0.5 * sigma**2) * t) / sd
    d2 = d1 - sd
    return strike * math.exp(-rate * t) * norm.cdf(-d2) - x * norm.cdf(-d1)


def _exact(x) -> Fraction:
    return Fraction(repr(float(x)))


def hull_white_condition(eta: float, kappa: float) -> bool:
    """``kappa >= 2 eta^2`` on the decimal values of the inputs."""
    return _exact(kappa) >= 2 * _exact(eta) ** 2


def heston_condition(eta: float, kappa: float, lam: float) -> bool:
    """``kappa lambda >= 2 eta^2`` on the decimal values of the inputs."""
    return _exact(kappa) * _exact(lam) >= 2 * _exact(eta) ** 2


def hull_white_xi_second_moment(y0: float, kappa: float, t: float) -> float:
    """``E xi_t^2`` on the changed clock: ``d(xi^2) = 2 eta xi dW + kappa dt``."""
    return y0**2 + kappa * t


def hull_white_variance_moment(y0: float, kappa: float, t: float) -> float:
    """``E V_t`` on the original clock for ``dV = 2 eta V dB + kappa V dt``."""
    return y0**2 * math.exp(kappa * t)


def two_state_symmetric_occupation() -> np.ndarray:
    """Balance equations ``pi_1 q = pi_2 q`` with ``pi_1 + pi_2 = 1``."""
    return np.array([0.5, 0.5])


if __name__ == "__main__":
    K, r, s = 1.0, 0.05, 0.2
    b = put_threshold(K, r, s)
    print(f"b* = {b!r}  (search: {put_threshold_by_search(K, r, s)!r})")
    for x in (b, 0.8, 1.0, 2.0, 100.0):
        print(f"v({x}) = {float(put_value(x, K, r, s))!r}")
    print("European put x=K=1 r=0.05 s=0.2 T=1:", european_put(1.0, K, r, s, 1.0))
    print("HW eta=0.2 kappa=0.08:", hull_white_condition(0.2, 0.08))
    print("Heston eta=0.1 kappa=0.2 lambda=0.1:", heston_condition(0.1, 0.2, 0.1))
    print("E xi_1^2 (y0=0.2, kappa=0.08):", hull_white_xi_second_moment(0.2, 0.08, 1.0))
    print("E V_1   (y0=0.2, kappa=0.08):", hull_white_variance_moment(0.2, 0.08, 1.0))
