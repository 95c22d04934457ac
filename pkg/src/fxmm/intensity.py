"""Client-flow intensity curves and the quote-side Hamiltonian machinery.

Each ladder tier quotes a size Delta (M) at half-spread delta (bp) and
receives client trades at rate lambda(delta) per side (day^-1).  Everything
the control problem needs from a tier is derived here:

    delta0    revenue-maximizing half-spread, argmax of delta*lambda(delta)
    c         curvature ratio 2 - lambda*lambda''/lambda'^2 at delta0
    h2_at_0   curvature at zero of the flow Hamiltonian, lambda(delta0)/(delta0*c)
    H(p)      sup_delta lambda(delta)*(delta - p), its maximizer delta*(p)
              and the envelope derivative H'(p) = -lambda(delta*(p))

The production family is the sigmoid lambda0/(1 + exp(a + b*delta)); an
exponential family lambda0*exp(-b*delta) is kept for tests (its maximizer
and Hamiltonian are closed-form, and its curvature ratio is exactly 1).
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .params import ModelParams

ArrayLike = Union[float, np.ndarray]

_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


class ConvergenceError(RuntimeError):
    """An iterative solve failed within its iteration budget."""


def _stable_expit(z: np.ndarray) -> np.ndarray:
    """1/(1+exp(-z)) without overflow for large |z|."""
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass(frozen=True)
class IntensityCurve(ABC):
    """One tier's arrival-rate curve plus cached derived constants.

    Frozen; the cached fields are filled in __post_init__ so every curve
    is fully validated at construction and safe to share between workers.
    """

    lambda0: float
    b: float
    tier_size: float

    def __post_init__(self):
        if self.lambda0 <= 0:
            raise ValueError("lambda0 must be positive")
        if self.b <= 0:
            raise ValueError("intensity slope b must be positive")
        if self.tier_size <= 0:
            raise ValueError("tier_size must be positive")
        _, delta0 = self.hamiltonian(0.0)
        c = self.curvature_at(delta0)
        h2 = self.value(delta0) / (delta0 * c)
        object.__setattr__(self, "delta0", float(delta0))
        object.__setattr__(self, "c", float(c))
        object.__setattr__(self, "h2_at_0", float(h2))

    # --- curve family interface -------------------------------------------------

    @abstractmethod
    def value(self, delta: ArrayLike) -> ArrayLike:
        """Arrival rate lambda(delta), day^-1."""

    @abstractmethod
    def slope(self, delta: ArrayLike) -> ArrayLike:
        """Analytic first derivative lambda'(delta)."""

    @abstractmethod
    def convexity(self, delta: ArrayLike) -> ArrayLike:
        """Analytic second derivative lambda''(delta)."""

    @abstractmethod
    def inverse(self, rate: np.ndarray) -> tuple[np.ndarray, int]:
        """delta such that lambda(delta) = rate, with out-of-range rates
        clamped into (lambda0*1e-12, lambda0*(1-1e-12)).  Returns (delta,
        number of clamped entries)."""

    @abstractmethod
    def hamiltonian_grid(
        self, p: np.ndarray, warm: Optional[np.ndarray] = None
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, Optional[np.ndarray]]:
        """Vectorized Hamiltonian for the solver hot path.

        Returns (H, lam, delta, warm_state) where H = lambda(d*)*(d*-p),
        lam = lambda(d*) = -H'(p) and d* is the maximizer.  ``warm`` is the
        opaque state returned by a previous call on a nearby field.
        """

    # --- generic machinery (family-independent) ----------------------------------

    def curvature_at(self, delta: float) -> float:
        """Curvature ratio 2 - lambda*lambda''/lambda'^2 from analytic derivatives."""
        lam = float(self.value(delta))
        d1 = float(self.slope(delta))
        d2 = float(self.convexity(delta))
        return 2.0 - lam * d2 / (d1 * d1)

    def _foc(self, delta: float, p: float) -> float:
        # d/ddelta of lambda(delta)*(delta - p)
        return float(self.value(delta)) + float(self.slope(delta)) * (delta - p)

    def hamiltonian(self, p: float, max_iter: int = 100) -> tuple[float, float]:
        """sup over delta of lambda(delta)*(delta - p).

        Returns (value, maximizer).  Safeguarded Newton on the first-order
        condition, bracketed and with a golden-section fallback.  The FOC
        residual at the returned maximizer is below 1e-10*lambda0*b.
        """
        p = float(p)
        tol = 1e-10 * self.lambda0 * self.b

        # The maximizer exceeds p (the objective is <= 0 at delta <= p); the
        # initial width 10/b covers moderate p and is doubled until the FOC
        # changes sign, since delta*-p grows without bound as p -> -inf.
        lo = p
        width = 10.0 / self.b
        hi = p + width
        expansions = 0
        while self._foc(hi, p) > 0.0:
            width *= 2.0
            hi = p + width
            expansions += 1
            if expansions > 60:
                raise ConvergenceError(f"no FOC sign change up to delta = {hi}")

        x = hi - width * (1.0 - _GOLDEN)
        converged = False
        for _ in range(max_iter):
            f = self._foc(x, p)
            if abs(f) < tol:
                converged = True
                break
            if f > 0.0:
                lo = x
            else:
                hi = x
            fprime = 2.0 * float(self.slope(x)) + float(self.convexity(x)) * (x - p)
            step_ok = False
            if fprime != 0.0:
                x_new = x - f / fprime
                if lo < x_new < hi:
                    x = x_new
                    step_ok = True
            if not step_ok:
                x = 0.5 * (lo + hi)

        if not converged:
            x = self._golden_section(lo, hi, p)
            if abs(self._foc(x, p)) > tol * 1e3:
                raise ConvergenceError(f"Hamiltonian maximizer did not converge at p={p}")
        return float(self.value(x)) * (x - p), x

    def _golden_section(self, lo: float, hi: float, p: float, tol: float = 1e-13) -> float:
        obj = lambda d: float(self.value(d)) * (d - p)
        a, b_ = lo, hi
        c1 = b_ - _GOLDEN * (b_ - a)
        c2 = a + _GOLDEN * (b_ - a)
        f1, f2 = obj(c1), obj(c2)
        while (b_ - a) > tol * (1.0 + abs(a) + abs(b_)):
            if f1 < f2:
                a, c1, f1 = c1, c2, f2
                c2 = a + _GOLDEN * (b_ - a)
                f2 = obj(c2)
            else:
                b_, c2, f2 = c2, c1, f1
                c1 = b_ - _GOLDEN * (b_ - a)
                f1 = obj(c1)
        return 0.5 * (a + b_)

    def hamiltonian_prime(self, p: float) -> float:
        """Envelope derivative H'(p) = -lambda(delta*(p)); always in (-lambda0, 0)."""
        _, dstar = self.hamiltonian(p)
        return -float(self.value(dstar))


@dataclass(frozen=True)
class SigmoidCurve(IntensityCurve):
    """lambda(delta) = lambda0 / (1 + exp(a + b*delta))."""

    a: float = 0.0

    def value(self, delta: ArrayLike) -> ArrayLike:
        z = np.asarray(self.a + self.b * np.asarray(delta, dtype=float))
        out = self.lambda0 * _stable_expit(-z)
        return float(out) if out.ndim == 0 else out

    def slope(self, delta: ArrayLike) -> ArrayLike:
        z = np.asarray(self.a + self.b * np.asarray(delta, dtype=float))
        s = _stable_expit(-z)
        out = -self.lambda0 * self.b * s * (1.0 - s)
        return float(out) if out.ndim == 0 else out

    def convexity(self, delta: ArrayLike) -> ArrayLike:
        z = np.asarray(self.a + self.b * np.asarray(delta, dtype=float))
        s = _stable_expit(-z)
        out = self.lambda0 * self.b * self.b * s * (1.0 - s) * (1.0 - 2.0 * s)
        return float(out) if out.ndim == 0 else out

    def inverse(self, rate: np.ndarray) -> tuple[np.ndarray, int]:
        rate = np.asarray(rate, dtype=float)
        lo = self.lambda0 * 1e-12
        hi = self.lambda0 * (1.0 - 1e-12)
        clamped = int(np.count_nonzero((rate < lo) | (rate > hi)))
        r = np.clip(rate, lo, hi)
        return (np.log(self.lambda0 / r - 1.0) - self.a) / self.b, clamped

    def hamiltonian_grid(
        self, p: np.ndarray, warm: Optional[np.ndarray] = None
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, Optional[np.ndarray]]:
        # The FOC lambda + lambda'*(delta-p) = 0 reduces, in u = a + b*delta,
        # to u - exp(-u) = 1 + a + b*p, solved by globally convergent Newton
        # (the left side is increasing and concave).
        w = 1.0 + self.a + self.b * np.asarray(p, dtype=float)
        u = _solve_u_minus_exp(w, warm)
        e = np.exp(-u)
        lam = self.lambda0 * e / (1.0 + e)
        delta = (u - self.a) / self.b
        return lam * (delta - p), lam, delta, u


def _solve_u_minus_exp(
    w: np.ndarray, u0: Optional[np.ndarray] = None, max_iter: int = 100
) -> np.ndarray:
    """Solve u - exp(-u) = w elementwise."""
    if u0 is None:
        # u ~ w for large positive w; u ~ -log(-w) for large negative w
        u = np.where(w > 0.0, w, -np.log1p(-np.minimum(w, 0.0)))
    else:
        u = np.array(u0, dtype=float, copy=True)
    tol = 1e-12 * (1.0 + np.abs(w))
    for _ in range(max_iter):
        e = np.exp(np.minimum(-u, 700.0))
        f = u - e - w
        u -= f / (1.0 + e)
        if np.all(np.abs(f) <= tol):
            return u
    e = np.exp(np.minimum(-u, 700.0))
    if np.all(np.abs(u - e - w) <= tol):
        return u
    raise ConvergenceError("sigmoid Hamiltonian Newton failed to converge")


@dataclass(frozen=True)
class ExponentialCurve(IntensityCurve):
    """lambda(delta) = lambda0 * exp(-b*delta).  Test family: delta*(p) = p + 1/b
    exactly and the curvature ratio is exactly 1."""

    def value(self, delta: ArrayLike) -> ArrayLike:
        out = np.asarray(self.lambda0 * np.exp(-self.b * np.asarray(delta, dtype=float)))
        return float(out) if out.ndim == 0 else out

    def slope(self, delta: ArrayLike) -> ArrayLike:
        out = np.asarray(-self.b * np.asarray(self.value(delta)))
        return float(out) if out.ndim == 0 else out

    def convexity(self, delta: ArrayLike) -> ArrayLike:
        out = np.asarray(self.b * self.b * np.asarray(self.value(delta)))
        return float(out) if out.ndim == 0 else out

    def inverse(self, rate: np.ndarray) -> tuple[np.ndarray, int]:
        rate = np.asarray(rate, dtype=float)
        lo = self.lambda0 * 1e-12
        hi = self.lambda0 * (1.0 - 1e-12)
        clamped = int(np.count_nonzero((rate < lo) | (rate > hi)))
        r = np.clip(rate, lo, hi)
        return -np.log(r / self.lambda0) / self.b, clamped

    def hamiltonian_grid(
        self, p: np.ndarray, warm: Optional[np.ndarray] = None
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, Optional[np.ndarray]]:
        delta = np.asarray(p, dtype=float) + 1.0 / self.b
        lam = np.asarray(self.value(delta))
        return lam / self.b, lam, delta, None


def build_curves(params: ModelParams) -> tuple[SigmoidCurve, ...]:
    """One sigmoid curve per ladder tier from normalized parameters."""
    return tuple(
        SigmoidCurve(lambda0=l0, b=b, tier_size=d, a=a)
        for d, l0, a, b in zip(params.ladder, params.amplitudes, params.a, params.b)
    )


def xi(curves: Sequence[IntensityCurve]) -> float:
    """Aggregate flow depth: sum over tiers of h2_at_0 * tier_size.

    Units M * day^-1 * bp^-1; strictly positive for any valid ladder.
    """
    return float(sum(c.h2_at_0 * c.tier_size for c in curves))
