"""Monte Carlo simulation of the controlled dealer book.

Dynamics per path: arithmetic mid-price s = diffusion + impact state x,
dx = (-beta*x + k*v)*dt driven only by the dealer's own hedging; Poisson
client trades on the size ladder sampled by thinning against the quoted
half-spreads; continuous hedging with cost L(v) = psi*|v| + eta*v^2, the
hedge leg executing at the step's post-impact mid (it bears its own push).

P&L is cash + q*s, marked to the impacted mid.  Per path it decomposes
exactly into spread capture + mark-to-market - hedging costs, where the
diffusion increment is marked on post-trade inventory and the impact
increment on pre-hedge inventory; the residual is tracked and must stay
at rounding noise.

Randomness: one counter-based Philox stream per path, keyed by
(seed, path index), so results are bit-identical for any chunking or
worker count, and policy comparisons reuse identical draws (common
random numbers).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Protocol, Sequence

import numpy as np

from .closedform import (
    ClosedFormCoeffs,
    approx_quote,
    p_exec,
    speed_from_pressure,
)
from .hjb import ControlField, GridSpec, SolveResult, solve_ac, solve_transient
from .intensity import IntensityCurve, build_curves
from .params import ModelParams

QUANTILES = (0.05, 0.25, 0.50, 0.75, 0.95)

_CHUNK = 1024


class SimulationError(RuntimeError):
    """Invalid simulation setup or a run that left its stated domain."""


@dataclass(frozen=True)
class SimState:
    """Single-path state: mid-price s (bp, relative to start), inventory q
    (M), impact state x (bp), cash (bp*M) and time (day)."""

    s: float = 0.0
    q: float = 0.0
    x: float = 0.0
    cash: float = 0.0
    t: float = 0.0

    @property
    def pnl(self) -> float:
        return self.cash + self.q * self.s


def transaction_cost(v, psi: float, eta: float):
    """Hedging cost rate L(v) = psi*|v| + eta*v^2 (bp*M/day)."""
    v = np.asarray(v, dtype=float)
    out = psi * np.abs(v) + eta * v * v
    return float(out) if out.ndim == 0 else out


class Policy(Protocol):
    tier_sizes: tuple[float, ...]

    def lookup(self, q: np.ndarray, x: np.ndarray): ...


class GridPolicy:
    """Bilinear control lookup on a solved field.

    Quotes and the pressure p_e are interpolated; the hedge speed is
    re-derived from interpolated p_e so the no-trade band edge stays
    sharp instead of being smeared by interpolating the kinked speed.
    States outside the grid are clamped to it and counted.
    """

    def __init__(self, controls: ControlField, params: ModelParams):
        self.controls = controls
        self.tier_sizes = controls.tier_sizes
        self.psi = params.psi
        self.eta = params.eta
        self.q_lo = float(controls.q_grid[0])
        self.q_hi = float(controls.q_grid[-1])
        self.nq = len(controls.q_grid)
        self.nx = len(controls.x_grid)
        self.dq = float(controls.q_grid[1] - controls.q_grid[0]) if self.nq > 1 else 1.0
        self.x_lo = float(controls.x_grid[0])
        self.x_hi = float(controls.x_grid[-1])
        self.dx = float(controls.x_grid[1] - controls.x_grid[0]) if self.nx > 1 else 1.0

    def lookup(self, q: np.ndarray, x: np.ndarray):
        qc = np.clip(q, self.q_lo, self.q_hi)
        if self.nx > 1:
            xc = np.clip(x, self.x_lo, self.x_hi)
            n_clamped = int(np.count_nonzero((qc != q) | (xc != x)))
        else:
            xc = x
            n_clamped = int(np.count_nonzero(qc != q))

        tq = (qc - self.q_lo) / self.dq
        i = np.minimum(tq.astype(np.int64), self.nq - 2)
        fq = tq - i
        if self.nx > 1:
            tx = (xc - self.x_lo) / self.dx
            j = np.minimum(tx.astype(np.int64), self.nx - 2)
            fx = tx - j
        else:
            j = np.zeros_like(i)
            fx = np.zeros_like(fq)

        w00 = (1.0 - fq) * (1.0 - fx)
        w10 = fq * (1.0 - fx)
        w01 = (1.0 - fq) * fx
        w11 = fq * fx
        j1 = np.minimum(j + 1, self.nx - 1)

        def interp(table: np.ndarray) -> np.ndarray:
            return (
                table[..., i, j] * w00
                + table[..., i + 1, j] * w10
                + table[..., i, j1] * w01
                + table[..., i + 1, j1] * w11
            )

        bid = interp(self.controls.bid)
        ask = interp(self.controls.ask)
        pe = interp(self.controls.p_e) if self.controls.has_execution else None
        return bid, ask, pe, n_clamped


class ClosedFormPolicy:
    """Quotes and pressure straight from the stationary approximation."""

    def __init__(self, cf: ClosedFormCoeffs, curves: Sequence[IntensityCurve], params: ModelParams):
        self.cf = cf
        self.curves = tuple(curves)
        self.tier_sizes = tuple(c.tier_size for c in curves)
        self.k = params.k

    def lookup(self, q: np.ndarray, x: np.ndarray):
        bid = np.stack([approx_quote(self.cf, c, q, x, "bid") for c in self.curves])
        ask = np.stack([approx_quote(self.cf, c, q, x, "ask") for c in self.curves])
        return bid, ask, p_exec(self.cf, self.k, q, x), 0


def decompose_shock(amount: float, tier_sizes: Sequence[float]) -> list[tuple[int, int]]:
    """Greedy largest-first ladder decomposition of a shock size.

    Returns (tier index, trade count) pairs; raises if the amount is not
    representable as a nonnegative integer combination built greedily."""
    pieces: list[tuple[int, int]] = []
    rem = float(amount)
    for n in range(len(tier_sizes) - 1, -1, -1):
        d = tier_sizes[n]
        cnt = int(math.floor(rem / d + 1e-12))
        if cnt > 0:
            pieces.append((n, cnt))
            rem -= cnt * d
    if rem > 1e-9 * max(abs(amount), 1.0):
        raise SimulationError(f"shock of {amount} M is not representable on the ladder")
    return pieces


def book_shock(state: SimState, q0: float, policy: Policy) -> SimState:
    """Book an inventory shock as client trades at the current quotes.

    The whole shock arrives in one instant at the state's (q, x); a
    positive q0 is a client sell hitting dealer bids (largest tier first),
    a negative one lifts offers.  Impact state is untouched: client trades
    do not push x."""
    if q0 == 0:
        return state
    pieces = decompose_shock(abs(q0), policy.tier_sizes)
    qv = np.array([state.q])
    xv = np.array([state.x])
    bid, ask, _, _ = policy.lookup(qv, xv)
    cash = state.cash
    for n, cnt in pieces:
        d = policy.tier_sizes[n] * cnt
        if q0 > 0:
            cash -= (state.s - float(bid[n, 0])) * d
        else:
            cash += (state.s + float(ask[n, 0])) * d
    return replace(state, q=state.q + q0, cash=cash)


def accrue_hedge(state: SimState, v: float, dt: float, params: ModelParams) -> SimState:
    """One deterministic hedge increment (no diffusion).

    Updates x by its decay ODE with this speed, executes v*dt at the
    post-impact mid, pays L(v)*dt, and moves s by the impact increment."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    dx = (-params.beta * state.x + params.k * v) * dt
    cost = transaction_cost(v, params.psi, params.eta) * dt
    return SimState(
        s=state.s + dx,
        q=state.q + v * dt,
        x=state.x + dx,
        cash=state.cash - v * (state.s + dx) * dt - cost,
        t=state.t + dt,
    )


@dataclass(frozen=True)
class SeriesStats:
    mean: np.ndarray
    se: np.ndarray
    q05: np.ndarray
    q25: np.ndarray
    q50: np.ndarray
    q75: np.ndarray
    q95: np.ndarray


def _series_stats(matrix: np.ndarray) -> SeriesStats:
    n = matrix.shape[1]
    mean = matrix.mean(axis=1)
    se = matrix.std(axis=1, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(mean)
    qq = np.quantile(matrix, QUANTILES, axis=1)
    return SeriesStats(mean=mean, se=se, q05=qq[0], q25=qq[1], q50=qq[2], q75=qq[3], q95=qq[4])


@dataclass
class PathStats:
    """Cross-sectional summaries of the simulated paths on the output grid."""

    t: np.ndarray
    pnl: SeriesStats
    inventory: SeriesStats
    speed: SeriesStats
    impact: SeriesStats
    abs_impact: SeriesStats
    n_paths: int
    seed: int
    fill_counts: np.ndarray          # (n_tiers, 2) total bid/ask fills
    clamp_fraction: float
    decomposition_residual: float
    terminal_pnl: np.ndarray         # (n_paths,)

    SERIES = ("pnl", "inventory", "speed", "impact", "abs_impact")


def _path_streams(seed: int, lo: int, hi: int, n_steps: int, n_tiers: int):
    """Draws for paths [lo, hi): one Philox stream per path keyed by
    (seed, path index).  Per path the stream is consumed as n_steps
    standard normals then (n_steps, n_tiers, 2) uniforms."""
    c = hi - lo
    normals = np.empty((n_steps, c))
    uniforms = np.empty((n_steps, n_tiers, 2, c))
    mask = (1 << 64) - 1
    for idx in range(c):
        key = np.array([seed & mask, (lo + idx) & mask], dtype=np.uint64)
        g = np.random.Generator(np.random.Philox(key=key))
        normals[:, idx] = g.standard_normal(n_steps)
        uniforms[..., idx] = g.random((n_steps, n_tiers, 2))
    return normals, uniforms


class _Recorder:
    def __init__(self, n_out: int, n_paths: int):
        self.pnl = np.empty((n_out, n_paths))
        self.inventory = np.empty((n_out, n_paths))
        self.speed = np.empty((n_out, n_paths))
        self.impact = np.empty((n_out, n_paths))
        self.fills = np.zeros((0, 2))
        self.clamped = 0
        self.lookups = 0
        self.residual = 0.0


def _run_chunk(
    policy: Policy,
    params: ModelParams,
    curves: Sequence[IntensityCurve],
    draws,
    q0: float,
    dt: float,
    out_steps: np.ndarray,
    rec: _Recorder,
    col_lo: int,
) -> None:
    normals, uniforms = draws
    n_steps, c = normals.shape
    nt = len(curves)
    psi, eta, beta, k, sig = params.psi, params.eta, params.beta, params.k, params.sigma
    sqdt = math.sqrt(dt)

    s = np.zeros(c)
    x = np.zeros(c)
    q = np.zeros(c)
    cash = np.zeros(c)
    spread = np.zeros(c)
    mtm = np.zeros(c)
    cost = np.zeros(c)

    if q0 != 0:
        pieces = decompose_shock(abs(q0), [cv.tier_size for cv in curves])
        bid, ask, _, ncl = policy.lookup(q, x)
        rec.clamped += ncl
        rec.lookups += c
        for n, cnt in pieces:
            d = curves[n].tier_size * cnt
            if q0 > 0:
                cash -= (s - bid[n]) * d
                spread += bid[n] * d
            else:
                cash += (s + ask[n]) * d
                spread += ask[n] * d
        q += q0

    cols = slice(col_lo, col_lo + c)
    rec_pos = 0
    for j in range(n_steps + 1):
        record_now = rec_pos < len(out_steps) and out_steps[rec_pos] == j
        stepping = j < n_steps
        if record_now or stepping:
            bid, ask, pe, ncl = policy.lookup(q, x)
            rec.clamped += ncl
            rec.lookups += c
            v = speed_from_pressure(pe, psi, eta) if pe is not None else np.zeros(c)
        if record_now:
            pnl = cash + q * s
            rec.pnl[rec_pos, cols] = pnl
            rec.inventory[rec_pos, cols] = q
            rec.speed[rec_pos, cols] = v
            rec.impact[rec_pos, cols] = x
            rec.residual = max(rec.residual, float(np.max(np.abs(pnl - (spread + mtm - cost)))))
            rec_pos += 1
        if not stepping:
            break

        u = uniforms[j]  # (nt, 2, c)
        dq_fill = np.zeros(c)
        for n, curve in enumerate(curves):
            d = curve.tier_size
            lam_b = curve.value(bid[n])
            lam_a = curve.value(ask[n])
            fill_b = u[n, 0] < lam_b * dt
            fill_a = u[n, 1] < lam_a * dt
            dq_fill += d * (fill_b.astype(float) - fill_a.astype(float))
            cash += d * (fill_a * (s + ask[n]) - fill_b * (s - bid[n]))
            spread += d * (fill_a * ask[n] + fill_b * bid[n])
            rec.fills[n, 0] += int(np.count_nonzero(fill_b))
            rec.fills[n, 1] += int(np.count_nonzero(fill_a))
        q = q + dq_fill
        q_pre_hedge = q

        dx = (-beta * x + k * v) * dt
        step_cost = (psi * np.abs(v) + eta * v * v) * dt
        cash = cash - v * (s + dx) * dt - step_cost
        cost = cost + step_cost
        q = q + v * dt

        dw = sig * sqdt * normals[j]
        x = x + dx
        s = s + dx + dw
        mtm = mtm + q * dw + q_pre_hedge * dx


def simulate_paths(
    controls,
    params: ModelParams,
    n_paths: int,
    q0: float,
    horizon: float,
    dt_sim: float,
    seed: int,
    output_points: int = 181,
    curves: Optional[Sequence[IntensityCurve]] = None,
) -> PathStats:
    """Simulate the controlled book and summarize the path ensemble.

    ``controls`` is a solved ControlField or any policy object with a
    ``lookup`` method.  The shock q0 is booked as client trades at t = 0
    at the policy's own quotes (largest tier first).
    """
    if n_paths < 1:
        raise SimulationError("at least 1 path required")
    if horizon <= 0 or dt_sim <= 0:
        raise SimulationError("horizon and dt_sim must be positive")
    if curves is None:
        curves = build_curves(params)
    policy = GridPolicy(controls, params) if isinstance(controls, ControlField) else controls

    arrival_bound = sum(2.0 * c.lambda0 for c in curves) * dt_sim
    if arrival_bound >= 0.1:
        raise SimulationError(
            f"dt_sim too coarse for thinning: total arrival probability per step "
            f"{arrival_bound:.3f} >= 0.1"
        )
    q_hi = getattr(policy, "q_hi", None)
    if q_hi is not None and abs(q0) > q_hi:
        raise SimulationError(f"shock {q0} M exceeds the control grid bound {q_hi} M")

    n_steps = max(1, int(round(horizon / dt_sim)))
    out_steps = np.unique(np.round(np.linspace(0, n_steps, output_points)).astype(int))
    nt = len(curves)

    rec = _Recorder(len(out_steps), n_paths)
    rec.fills = np.zeros((nt, 2))
    for lo in range(0, n_paths, _CHUNK):
        hi = min(lo + _CHUNK, n_paths)
        draws = _path_streams(seed, lo, hi, n_steps, nt)
        _run_chunk(policy, params, curves, draws, q0, dt_sim, out_steps, rec, lo)

    return _finalize(rec, out_steps, dt_sim, n_paths, seed)


def _finalize(rec: _Recorder, out_steps: np.ndarray, dt: float, n_paths: int, seed: int) -> PathStats:
    pnl_scale = 1.0 + float(np.max(np.abs(rec.pnl)))
    if rec.residual > 1e-6 * pnl_scale:
        raise SimulationError(
            f"P&L decomposition identity violated: residual {rec.residual:.3e}"
        )
    clamp_fraction = rec.clamped / max(rec.lookups, 1)
    if clamp_fraction > 1e-3:
        raise SimulationError(
            f"{100 * clamp_fraction:.2f}% of state lookups left the control grid; "
            "widen the solver grid"
        )
    return PathStats(
        t=out_steps * dt,
        pnl=_series_stats(rec.pnl),
        inventory=_series_stats(rec.inventory),
        speed=_series_stats(rec.speed),
        impact=_series_stats(rec.impact),
        abs_impact=_series_stats(np.abs(rec.impact)),
        n_paths=n_paths,
        seed=seed,
        fill_counts=rec.fills,
        clamp_fraction=clamp_fraction,
        decomposition_residual=rec.residual,
        terminal_pnl=rec.pnl[-1].copy(),
    )


@dataclass(frozen=True)
class PerformanceReport:
    """Paired comparison of terminal P&L under common random numbers."""

    mean_pnl_transient: float
    mean_pnl_ac: float
    se_pnl_transient: float
    se_pnl_ac: float
    diff_mean: float
    diff_se: float
    n_paths: int
    seed: int

    @property
    def significance(self) -> float:
        return self.diff_mean / self.diff_se if self.diff_se > 0 else math.inf

    def to_dict(self) -> dict:
        return {
            "mean_pnl_transient": self.mean_pnl_transient,
            "mean_pnl_ac": self.mean_pnl_ac,
            "se_pnl_transient": self.se_pnl_transient,
            "se_pnl_ac": self.se_pnl_ac,
            "diff_mean": self.diff_mean,
            "diff_se": self.diff_se,
            "significance": self.significance,
            "n_paths": self.n_paths,
            "seed": self.seed,
        }


@dataclass
class ShockComparison:
    transient: PathStats
    ac: PathStats
    report: PerformanceReport
    solve_transient: Optional[SolveResult] = None
    solve_ac: Optional[SolveResult] = None


def shock_experiment(
    params: ModelParams,
    curves: Sequence[IntensityCurve],
    grid: GridSpec,
    n_paths: int,
    q0: float,
    horizon: float,
    seed: int,
    dt_sim: Optional[float] = None,
    output_points: int = 181,
    controls_transient: Optional[ControlField] = None,
    controls_ac: Optional[ControlField] = None,
) -> ShockComparison:
    """Inventory-shock comparison of resilience-aware vs permanent-impact
    controls, both simulated under the true (configured) impact dynamics
    with common random numbers."""
    dt_sim = params.simulation.dt if dt_sim is None else dt_sim
    res_tr = res_ac = None
    if controls_transient is None:
        res_tr = solve_transient(params, curves, grid)
        controls_transient = res_tr.controls
    if controls_ac is None:
        res_ac = solve_ac(params, curves, grid)
        controls_ac = res_ac.controls

    pol_tr = GridPolicy(controls_transient, params)
    pol_ac = GridPolicy(controls_ac, params)

    n_steps = max(1, int(round(horizon / dt_sim)))
    out_steps = np.unique(np.round(np.linspace(0, n_steps, output_points)).astype(int))
    nt = len(curves)
    rec_tr = _Recorder(len(out_steps), n_paths)
    rec_tr.fills = np.zeros((nt, 2))
    rec_ac = _Recorder(len(out_steps), n_paths)
    rec_ac.fills = np.zeros((nt, 2))

    for lo in range(0, n_paths, _CHUNK):
        hi = min(lo + _CHUNK, n_paths)
        draws = _path_streams(seed, lo, hi, n_steps, nt)
        _run_chunk(pol_tr, params, curves, draws, q0, dt_sim, out_steps, rec_tr, lo)
        _run_chunk(pol_ac, params, curves, draws, q0, dt_sim, out_steps, rec_ac, lo)

    stats_tr = _finalize(rec_tr, out_steps, dt_sim, n_paths, seed)
    stats_ac = _finalize(rec_ac, out_steps, dt_sim, n_paths, seed)

    diff = stats_tr.terminal_pnl - stats_ac.terminal_pnl
    diff_se = float(diff.std(ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else 0.0
    report = PerformanceReport(
        mean_pnl_transient=float(stats_tr.terminal_pnl.mean()),
        mean_pnl_ac=float(stats_ac.terminal_pnl.mean()),
        se_pnl_transient=float(stats_tr.pnl.se[-1]),
        se_pnl_ac=float(stats_ac.pnl.se[-1]),
        diff_mean=float(diff.mean()),
        diff_se=diff_se,
        n_paths=n_paths,
        seed=seed,
    )
    return ShockComparison(
        transient=stats_tr, ac=stats_ac, report=report,
        solve_transient=res_tr, solve_ac=res_ac,
    )


def pathstats_to_csv(stats: PathStats, path) -> None:
    """Long-format time series: one row per (time, series)."""
    import csv
    from pathlib import Path

    with Path(path).open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["time", "series", "mean", "se", "q05", "q25", "q50", "q75", "q95"])
        for name in PathStats.SERIES:
            ss: SeriesStats = getattr(stats, name)
            for i, t in enumerate(stats.t):
                w.writerow([
                    repr(float(t)), name,
                    repr(float(ss.mean[i])), repr(float(ss.se[i])),
                    repr(float(ss.q05[i])), repr(float(ss.q25[i])),
                    repr(float(ss.q50[i])), repr(float(ss.q75[i])),
                    repr(float(ss.q95[i])),
                ])
