"""Backward explicit-Euler solve of the dealer's control equations on a
(q, x) grid, and extraction of the optimal quote / hedge-speed fields.

Two modes share one induction engine:

    baseline   quotes only, no hedging and no impact state (1-d in q)
    transient  full problem with execution Hamiltonian and the impact
               advection term -beta*x*(q + dV/dx)

The permanent-impact comparison solve ("ac") is the transient engine with
beta forced to zero.  Induction starts from a zero terminal surface and
runs until the stated horizon; the horizon must be long enough that the
reported controls are stationary (checked and flagged, not enforced).

Discretization choices: ladder differences are exact node shifts; the
advection term is first-order upwind toward x = 0; the pressure
p_e = k*(q + dV/dx) + dV/dq uses central differences in the interior and
one-sided ones on the boundary; trades that would push inventory off the
grid are dropped from the flow sum (a hard risk limit).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .closedform import coeffs as closed_form_coeffs, speed_from_pressure
from .intensity import IntensityCurve
from .params import ModelParams, SolverConfig, with_beta

CACHE_FORMAT_VERSION = 1


class SolverError(RuntimeError):
    """Grid/scheme failure: misaligned ladder, divergence, bad settings."""


@dataclass(frozen=True)
class GridSpec:
    """Solver grid: q in [-q_max, q_max] step q_step, x in [-x_max, x_max]
    with an odd node count so q = 0 and x = 0 are grid nodes."""

    q_max: float
    q_step: float
    x_max: float
    x_nodes: int
    horizon: float
    dt: Union[float, str] = "auto"
    stationarity_tol: float = 1e-4

    @classmethod
    def from_config(cls, sc: SolverConfig) -> "GridSpec":
        return cls(
            q_max=sc.q_max, q_step=sc.q_step, x_max=sc.x_max, x_nodes=sc.x_nodes,
            horizon=sc.horizon, dt=sc.dt, stationarity_tol=sc.stationarity_tol,
        )

    def q_grid(self) -> np.ndarray:
        n = round(self.q_max / self.q_step)
        return np.arange(-n, n + 1) * self.q_step

    def x_grid(self) -> np.ndarray:
        half = self.x_nodes // 2
        return (np.arange(self.x_nodes) - half) * (self.x_max / half)

    def tier_offsets(self, ladder: Sequence[float]) -> list[int]:
        """Node shift per tier; every tier size must sit on the q grid."""
        offsets = []
        for d in ladder:
            m = d / self.q_step
            if abs(m - round(m)) > 1e-9:
                raise SolverError(
                    f"tier size {d} is not an integer multiple of q_step={self.q_step}"
                )
            offsets.append(int(round(m)))
        return offsets

    def validate(self, ladder: Sequence[float]) -> None:
        if self.q_max <= 0 or self.q_step <= 0:
            raise SolverError("q_max and q_step must be positive")
        n = self.q_max / self.q_step
        if abs(n - round(n)) > 1e-9:
            raise SolverError("q_max must be an integer multiple of q_step so q=0 is a node")
        if self.x_nodes < 3 or self.x_nodes % 2 == 0:
            raise SolverError("x_nodes must be an odd integer >= 3")
        if self.x_max <= 0:
            raise SolverError("x_max must be positive")
        if self.horizon <= 0:
            raise SolverError("horizon must be positive")
        if self.stationarity_tol <= 0:
            raise SolverError("stationarity_tol must be positive")
        if self.dt != "auto":
            if not isinstance(self.dt, (int, float)) or self.dt <= 0:
                raise SolverError("dt must be 'auto' or a positive number")
        self.tier_offsets(ladder)
        if max(ladder) > self.q_max:
            raise SolverError("largest tier exceeds q_max; no room to trade it")


@dataclass
class ValueField:
    """Value surface over (q, x) at the start of trading (t = 0)."""

    q_grid: np.ndarray
    x_grid: np.ndarray
    values: np.ndarray  # (nq, nx), bp*M

    def symmetry_error(self) -> float:
        """max |V(q,x) - V(-q,-x)| over the grid (model is side-symmetric)."""
        flipped = self.values[::-1, ::-1]
        return float(np.max(np.abs(self.values - flipped)))


@dataclass
class ControlField:
    """Optimal controls tabulated on the (q, x) grid.

    bid/ask hold per-tier half-spreads (bp); speed is the hedge rate
    (M/day); p_e the execution pressure (bp); zone flags |p_e| <= psi.
    The speed block is None for quote-only (baseline) solves.
    """

    q_grid: np.ndarray
    x_grid: np.ndarray
    tier_sizes: tuple[float, ...]
    bid: np.ndarray  # (n_tiers, nq, nx)
    ask: np.ndarray
    speed: Optional[np.ndarray]  # (nq, nx)
    p_e: Optional[np.ndarray]
    zone: Optional[np.ndarray]   # bool (nq, nx)
    psi: float
    clamp_count: int = 0

    @property
    def has_execution(self) -> bool:
        return self.p_e is not None


@dataclass
class SolveResult:
    value: ValueField
    controls: ControlField
    mode: str
    dt: float
    n_steps: int
    stationary: bool
    control_drift: float


def stability_dt(
    params: ModelParams,
    curves: Sequence[IntensityCurve],
    grid: GridSpec,
    execution: bool,
) -> float:
    """CFL-style step bound for the explicit scheme, safety factor 0.5.

    Rate budget: total client-flow intensity at the most aggressive quotes
    (sum of 2*lambda0), the x-advection rate beta*x_max/dx, and the
    pressure-advection rate from the hedge term, bounded a priori through
    the closed-form pressure scale.  Verified empirically by the grid
    refinement tests rather than derived sharply.
    """
    rate = sum(2.0 * c.lambda0 for c in curves)
    if execution:
        dx = grid.x_max / (grid.x_nodes // 2)
        if params.beta > 0:
            rate += params.beta * grid.x_max / dx
        cf = closed_form_coeffs(params, curves)
        p_cap = (2.0 * cf.a0 + params.k) * grid.q_max + grid.x_max
        v_cap = max(p_cap - params.psi, 0.0) / (2.0 * params.eta)
        rate += v_cap * (1.0 / (2.0 * grid.q_step) + params.k / (2.0 * dx))
    return 0.5 / rate


def _grad_q(V: np.ndarray, dq: float) -> np.ndarray:
    g = np.empty_like(V)
    g[1:-1] = (V[2:] - V[:-2]) / (2.0 * dq)
    g[0] = (V[1] - V[0]) / dq
    g[-1] = (V[-1] - V[-2]) / dq
    return g


def _grad_x_central(V: np.ndarray, dx: float) -> np.ndarray:
    g = np.empty_like(V)
    g[:, 1:-1] = (V[:, 2:] - V[:, :-2]) / (2.0 * dx)
    g[:, 0] = (V[:, 1] - V[:, 0]) / dx
    g[:, -1] = (V[:, -1] - V[:, -2]) / dx
    return g


def _grad_x_upwind(V: np.ndarray, dx: float) -> np.ndarray:
    """One-sided x-difference against the advection flow (toward x = 0).

    The x-drift is -beta*x: negative for x > 0 (use the backward
    difference) and positive for x < 0 (forward).  The x = 0 column is
    zeroed; its advection coefficient vanishes anyway.
    """
    g = np.zeros_like(V)
    d = (V[:, 1:] - V[:, :-1]) / dx
    mid = V.shape[1] // 2
    g[:, mid + 1:] = d[:, mid:]
    g[:, :mid] = d[:, :mid]
    return g


def _quote_surfaces(
    V: np.ndarray,
    curves: Sequence[IntensityCurve],
    offsets: Sequence[int],
    warm_bid: list,
    warm_ask: list,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Maximizer (raw quote) surfaces per tier and side for the current V."""
    nq = V.shape[0]
    bids, asks = [], []
    for n, curve in enumerate(curves):
        m = offsets[n]
        d = curve.tier_size
        pb = (V[: nq - m] - V[m:]) / d
        _, _, db, warm_bid[n] = curve.hamiltonian_grid(pb, warm_bid[n])
        pa = (V[m:] - V[: nq - m]) / d
        _, _, da, warm_ask[n] = curve.hamiltonian_grid(pa, warm_ask[n])
        bids.append(db)
        asks.append(da)
    return bids, asks


def _control_snapshot(
    V: np.ndarray,
    params: ModelParams,
    curves: Sequence[IntensityCurve],
    offsets: Sequence[int],
    q_col: np.ndarray,
    dq: float,
    dx: float,
    execution: bool,
) -> tuple[list[np.ndarray], Optional[np.ndarray]]:
    warm_b: list = [None] * len(curves)
    warm_a: list = [None] * len(curves)
    bids, asks = _quote_surfaces(V, curves, offsets, warm_b, warm_a)
    v = None
    if execution:
        pe = params.k * (q_col + _grad_x_central(V, dx)) + _grad_q(V, dq)
        v = speed_from_pressure(pe, params.psi, params.eta)
    return bids + asks, v


def _drift_between(
    old: tuple[list[np.ndarray], Optional[np.ndarray]],
    new: tuple[list[np.ndarray], Optional[np.ndarray]],
) -> float:
    quotes_old, v_old = old
    quotes_new, v_new = new
    num = max(float(np.max(np.abs(a - b))) for a, b in zip(quotes_old, quotes_new))
    scale = max(float(np.max(np.abs(a))) for a in quotes_new)
    drift = num / max(scale, 1e-300)
    if v_new is not None:
        dv = float(np.max(np.abs(v_old - v_new)))
        drift = max(drift, dv / max(float(np.max(np.abs(v_new))), 1e-300))
    return drift


def _backward_induction(
    params: ModelParams,
    curves: Sequence[IntensityCurve],
    grid: GridSpec,
    execution: bool,
    mode: str,
) -> SolveResult:
    grid.validate([c.tier_size for c in curves])
    if execution and params.eta <= 0:
        raise SolverError("eta must be positive for the hedging solve")

    qg = grid.q_grid()
    xg = grid.x_grid() if execution else np.array([0.0])
    nq, nx = len(qg), len(xg)
    q_col = qg[:, None]
    x_row = xg[None, :]
    dq = grid.q_step
    dx = (grid.x_max / (grid.x_nodes // 2)) if execution else math.inf
    offsets = grid.tier_offsets([c.tier_size for c in curves])
    tier_sizes = [c.tier_size for c in curves]

    if grid.dt == "auto":
        dt = stability_dt(params, curves, grid, execution)
    else:
        dt = float(grid.dt)
    n_steps = max(1, int(math.ceil(grid.horizon / dt)))
    dt = grid.horizon / n_steps

    V = np.zeros((nq, nx))
    risk = -0.5 * params.gamma * params.sigma**2 * q_col**2  # (nq, 1)
    warm_bid: list = [None] * len(curves)
    warm_ask: list = [None] * len(curves)

    n_tail = max(1, round(0.1 * n_steps))
    snapshot_at = n_steps - n_tail
    snapshot = None
    advect = execution and params.beta > 0

    for step in range(n_steps):
        rhs = np.empty_like(V)
        rhs[:] = risk
        for n, curve in enumerate(curves):
            m = offsets[n]
            d = tier_sizes[n]
            pb = (V[: nq - m] - V[m:]) / d
            hb, _, _, warm_bid[n] = curve.hamiltonian_grid(pb, warm_bid[n])
            rhs[: nq - m] += d * hb
            pa = (V[m:] - V[: nq - m]) / d
            ha, _, _, warm_ask[n] = curve.hamiltonian_grid(pa, warm_ask[n])
            rhs[m:] += d * ha
        if execution:
            pe = params.k * (q_col + _grad_x_central(V, dx)) + _grad_q(V, dq)
            np.add(rhs, np.square(np.maximum(np.abs(pe) - params.psi, 0.0)) / (4.0 * params.eta), out=rhs)
            if advect:
                rhs -= params.beta * x_row * (q_col + _grad_x_upwind(V, dx))
        V += dt * rhs

        if step % 250 == 249 or step == n_steps - 1:
            if not np.all(np.isfinite(V)):
                raise SolverError(
                    f"value surface diverged at step {step + 1}/{n_steps} "
                    f"(dt={dt:.3e}, grid {nq}x{nx}); reduce dt or widen the grid"
                )
        if step + 1 == snapshot_at:
            snapshot = _control_snapshot(V, params, curves, offsets, q_col, dq, dx, execution)

    final = _control_snapshot(V, params, curves, offsets, q_col, dq, dx, execution)
    control_drift = _drift_between(snapshot, final) if snapshot is not None else 0.0
    stationary = control_drift <= grid.stationarity_tol

    value = ValueField(q_grid=qg, x_grid=xg, values=V)
    controls = extract_controls(value, params, curves, include_execution=execution)
    return SolveResult(
        value=value, controls=controls, mode=mode, dt=dt, n_steps=n_steps,
        stationary=stationary, control_drift=control_drift,
    )


def solve_transient(
    params: ModelParams, curves: Sequence[IntensityCurve], grid: GridSpec
) -> SolveResult:
    """Full solve with hedging and decaying impact state."""
    return _backward_induction(params, curves, grid, execution=True, mode="transient")


def solve_baseline(
    params: ModelParams, curves: Sequence[IntensityCurve], grid: GridSpec
) -> SolveResult:
    """Quote-only solve (no hedging, no impact state); 1-d in q."""
    return _backward_induction(params, curves, grid, execution=False, mode="baseline")


def solve_ac(
    params: ModelParams, curves: Sequence[IntensityCurve], grid: GridSpec
) -> SolveResult:
    """Permanent-impact solve: identical machinery with beta forced to 0."""
    return _backward_induction(with_beta(params, 0.0), curves, grid, execution=True, mode="ac")


def extract_controls(
    value: ValueField,
    params: ModelParams,
    curves: Sequence[IntensityCurve],
    include_execution: bool = True,
) -> ControlField:
    """Optimal controls from a value surface.

    Quotes come from the envelope slope of each tier Hamiltonian pushed
    through the analytic intensity inverse (clamped at the curve's range
    and counted).  Where a tier's ladder shift leaves the grid the quote
    is extended flat in q; the solver drops those trades from the flow,
    so the extension only pads the exported table.
    """
    V = value.values
    qg, xg = value.q_grid, value.x_grid
    nq, nx = V.shape
    dq = float(qg[1] - qg[0]) if nq > 1 else 1.0
    dx = float(xg[1] - xg[0]) if nx > 1 else math.inf
    nt = len(curves)

    bid = np.empty((nt, nq, nx))
    ask = np.empty((nt, nq, nx))
    clamped = 0
    for n, curve in enumerate(curves):
        d = curve.tier_size
        m = round(d / dq) if nq > 1 else 0
        if m <= 0 or m >= nq:
            raise SolverError(f"tier size {d} does not fit the value grid")
        pb = (V[: nq - m] - V[m:]) / d
        _, lam_b, _, _ = curve.hamiltonian_grid(pb)
        qb, c1 = curve.inverse(lam_b)
        bid[n, : nq - m] = qb
        bid[n, nq - m:] = qb[-1]
        pa = (V[m:] - V[: nq - m]) / d
        _, lam_a, _, _ = curve.hamiltonian_grid(pa)
        qa, c2 = curve.inverse(lam_a)
        ask[n, m:] = qa
        ask[n, :m] = qa[0]
        clamped += c1 + c2

    speed = p_e = zone = None
    if include_execution:
        if params.eta <= 0:
            raise SolverError("eta must be positive for the hedging controls")
        pe = params.k * (qg[:, None] + _grad_x_central(V, dx)) + _grad_q(V, dq)
        speed = speed_from_pressure(pe, params.psi, params.eta)
        zone = np.abs(pe) <= params.psi
        p_e = pe

    return ControlField(
        q_grid=qg, x_grid=xg, tier_sizes=tuple(c.tier_size for c in curves),
        bid=bid, ask=ask, speed=speed, p_e=p_e, zone=zone,
        psi=params.psi, clamp_count=clamped,
    )


# --- export ----------------------------------------------------------------------


def _fmt(v: float) -> str:
    return repr(float(v))


def controls_to_csv(cf: ControlField, path: Union[str, Path]) -> None:
    """Long-format control table: one row per (q, x, tier, side).

    Node-level columns (speed, p_E, zone_flag) repeat across tier rows;
    quote-only fields omit them entirely.
    """
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        if cf.has_execution:
            w.writerow(["q", "x", "tier", "side", "quote", "speed", "p_E", "zone_flag"])
        else:
            w.writerow(["q", "x", "tier", "side", "quote"])
        for iq, qv in enumerate(cf.q_grid):
            for ix, xv in enumerate(cf.x_grid):
                for n in range(len(cf.tier_sizes)):
                    for side, table in (("bid", cf.bid), ("ask", cf.ask)):
                        row = [_fmt(qv), _fmt(xv), str(n + 1), side, _fmt(table[n, iq, ix])]
                        if cf.has_execution:
                            row += [
                                _fmt(cf.speed[iq, ix]),
                                _fmt(cf.p_e[iq, ix]),
                                "1" if cf.zone[iq, ix] else "0",
                            ]
                        w.writerow(row)


def value_to_csv(vf: ValueField, path: Union[str, Path]) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["q", "x", "value"])
        for iq, qv in enumerate(vf.q_grid):
            for ix, xv in enumerate(vf.x_grid):
                w.writerow([_fmt(qv), _fmt(xv), _fmt(vf.values[iq, ix])])


def save_controls(cf: ControlField, path: Union[str, Path]) -> None:
    """Compact binary cache of a control field (versioned npz)."""
    arrays = dict(
        format_version=np.array([CACHE_FORMAT_VERSION], dtype=np.int64),
        q_grid=cf.q_grid, x_grid=cf.x_grid,
        tier_sizes=np.asarray(cf.tier_sizes, dtype=float),
        bid=cf.bid, ask=cf.ask,
        psi=np.array([cf.psi]),
        clamp_count=np.array([cf.clamp_count], dtype=np.int64),
        has_execution=np.array([cf.has_execution], dtype=np.int64),
    )
    if cf.has_execution:
        arrays.update(speed=cf.speed, p_e=cf.p_e, zone=cf.zone.astype(np.uint8))
    with open(path, "wb") as f:
        np.savez_compressed(f, **arrays)


def load_controls(path: Union[str, Path]) -> ControlField:
    with np.load(path) as z:
        version = int(z["format_version"][0])
        if version != CACHE_FORMAT_VERSION:
            raise SolverError(
                f"control cache {path} has format version {version}, expected {CACHE_FORMAT_VERSION}"
            )
        has_exec = bool(z["has_execution"][0])
        return ControlField(
            q_grid=z["q_grid"], x_grid=z["x_grid"],
            tier_sizes=tuple(float(t) for t in z["tier_sizes"]),
            bid=z["bid"], ask=z["ask"],
            speed=z["speed"] if has_exec else None,
            p_e=z["p_e"] if has_exec else None,
            zone=z["zone"].astype(bool) if has_exec else None,
            psi=float(z["psi"][0]),
            clamp_count=int(z["clamp_count"][0]),
        )


def internalization_band(cf: ControlField, x_value: float = 0.0) -> tuple[float, float]:
    """(lo, hi) in q of the contiguous no-hedge band containing p_e's zero
    crossing at the x grid row nearest x_value.  Requires execution fields."""
    if not cf.has_execution:
        raise SolverError("control field has no execution block")
    ix = int(np.argmin(np.abs(cf.x_grid - x_value)))
    zone = cf.zone[:, ix]
    if not zone.any():
        return (math.nan, math.nan)
    # seed on the smallest |p_e| node, then grow the contiguous run
    iq = int(np.argmin(np.abs(cf.p_e[:, ix])))
    if not zone[iq]:
        iq = int(np.argmax(zone))
    lo = hi = iq
    while lo > 0 and zone[lo - 1]:
        lo -= 1
    while hi < len(zone) - 1 and zone[hi + 1]:
        hi += 1
    return float(cf.q_grid[lo]), float(cf.q_grid[hi])
