"""Stationary quadratic-ansatz coefficients and the approximate controls.

With the flow Hamiltonians expanded to second order and a quadratic value
surface -A*q^2 - B*q*x, the long-horizon limits are closed form:

    a0    = sigma * sqrt(gamma / (8*xi))        value curvature, bp/M
    omega = sigma * sqrt(2*gamma*xi)            inventory relaxation rate, 1/day
    b0    = beta / (beta + omega)               impact passthrough, dimensionless

xi is the aggregate flow depth from the intensity module.  The identity
2*a0*omega = gamma*sigma^2 holds exactly.  Quotes gain a linear inventory
and impact-state skew, and the hedge trigger is the execution pressure
p_e = -(2*a0 - k*(1-b0))*q - b0*x compared against the proportional cost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .intensity import IntensityCurve, xi as flow_depth
from .params import ModelParams

ArrayLike = Union[float, np.ndarray]


@dataclass(frozen=True)
class ClosedFormCoeffs:
    """Long-horizon limits of the quadratic value-surface coefficients."""

    a0: float      # bp/M
    xi: float      # M / (bp * day)
    omega: float   # 1/day
    b0: float      # dimensionless, in [0, 1]


def coeffs(params: ModelParams, curves: Sequence[IntensityCurve]) -> ClosedFormCoeffs:
    """Stationary coefficients for the given parameters and ladder.

    Degenerate cases: gamma = 0 (or an empty flow) gives a0 = omega = 0;
    b0 is then 1 for beta > 0 and 0 for beta = 0 (no impact dynamics at
    all, the permanent-impact reading).
    """
    xiv = flow_depth(curves)
    a0 = params.sigma * math.sqrt(params.gamma / (8.0 * xiv)) if xiv > 0 else 0.0
    omega = params.sigma * math.sqrt(2.0 * params.gamma * xiv)
    denom = params.beta + omega
    b0 = params.beta / denom if denom > 0 else 0.0
    return ClosedFormCoeffs(a0=a0, xi=xiv, omega=omega, b0=b0)


def approx_quote(
    cf: ClosedFormCoeffs,
    curve: IntensityCurve,
    q: ArrayLike,
    x: ArrayLike,
    side: str,
) -> ArrayLike:
    """Approximate optimal half-spread for one tier at inventory q, impact x.

    delta0 + (a0/c)*(Delta + 2q) + (b0/c)*x on the bid,
    delta0 + (a0/c)*(Delta - 2q) - (b0/c)*x on the ask.
    """
    if side == "bid":
        sign = 1.0
    elif side == "ask":
        sign = -1.0
    else:
        raise ValueError(f"side must be 'bid' or 'ask', got {side!r}")
    return (
        curve.delta0
        + (cf.a0 / curve.c) * (curve.tier_size + sign * 2.0 * np.asarray(q, dtype=float))
        + sign * (cf.b0 / curve.c) * np.asarray(x, dtype=float)
    )


def p_exec(cf: ClosedFormCoeffs, k: float, q: ArrayLike, x: ArrayLike) -> ArrayLike:
    """Approximate execution pressure -(2*a0 - k*(1-b0))*q - b0*x (bp)."""
    return -(2.0 * cf.a0 - k * (1.0 - cf.b0)) * np.asarray(q, dtype=float) \
        - cf.b0 * np.asarray(x, dtype=float)


def speed_from_pressure(pe: ArrayLike, psi: float, eta: float) -> ArrayLike:
    """Optimal hedge speed for pressure pe: zero inside the proportional-cost
    band |pe| <= psi, else sign(pe)*(|pe|-psi)/(2*eta).  M/day."""
    if eta <= 0:
        raise ValueError("eta must be positive (speed is unbounded at eta = 0)")
    pe = np.asarray(pe, dtype=float)
    out = np.sign(pe) * np.maximum(np.abs(pe) - psi, 0.0) / (2.0 * eta)
    return float(out) if out.ndim == 0 else out


def approx_speed(
    cf: ClosedFormCoeffs, params: ModelParams, q: ArrayLike, x: ArrayLike
) -> ArrayLike:
    """Approximate optimal hedge speed at (q, x)."""
    return speed_from_pressure(p_exec(cf, params.k, q, x), params.psi, params.eta)


def internalization_half_width(cf: ClosedFormCoeffs, k: float, psi: float) -> float:
    """Half-width in q of the no-hedge band at x = 0: psi / (2*a0 - k*(1-b0)).

    Infinite when the pressure slope is not positive (hedging never pays)."""
    slope = 2.0 * cf.a0 - k * (1.0 - cf.b0)
    return psi / slope if slope > 0 else math.inf


@dataclass(frozen=True)
class MeanFieldPath:
    """Expected-inventory trajectory under the approximate quotes."""

    t: np.ndarray
    q: np.ndarray          # full nonlinear ODE solution
    q_linear: np.ndarray   # q0 * exp(-omega * t)


def meanfield_relaxation(
    cf: ClosedFormCoeffs,
    curves: Sequence[IntensityCurve],
    q0: float,
    horizon: float,
    step: float = 1e-4,
) -> MeanFieldPath:
    """Integrate the mean-inventory ODE under the approximate quotes at x = 0.

    dq/dt = sum_n Delta_n * (lambda_n(bid quote) - lambda_n(ask quote)),
    classical fixed-step RK4.  Returns both the nonlinear path and the
    linearized exponential q0*exp(-omega*t) for comparison.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    n = max(1, int(math.ceil(horizon / step)))
    h = horizon / n
    t = np.linspace(0.0, horizon, n + 1)

    def drift(qbar: float) -> float:
        total = 0.0
        for c in curves:
            lb = float(c.value(approx_quote(cf, c, qbar, 0.0, "bid")))
            la = float(c.value(approx_quote(cf, c, qbar, 0.0, "ask")))
            total += c.tier_size * (lb - la)
        return total

    q = np.empty(n + 1)
    q[0] = q0
    for i in range(n):
        y = q[i]
        k1 = drift(y)
        k2 = drift(y + 0.5 * h * k1)
        k3 = drift(y + 0.5 * h * k2)
        k4 = drift(y + h * k3)
        q[i + 1] = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    return MeanFieldPath(t=t, q=q, q_linear=q0 * np.exp(-cf.omega * t))
