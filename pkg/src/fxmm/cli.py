"""Command-line orchestration: config -> closed forms -> solve -> simulate.

Subcommands

    coeffs     closed-form coefficients and per-tier quote constants
    solve      HJB solve (transient | baseline | ac) with CSV + cache output
    simulate   Monte Carlo shock experiment from solved controls
    sweep      closed-form coefficients across a parameter range

Every artifact-producing command writes a manifest.json listing inputs
(config hash, seed, versions) and outputs; runs are deterministic, so a
manifest identifies its artifacts exactly.  The FXMM_SEED environment
variable overrides any configured or flagged seed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import platform
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .closedform import (
    approx_quote,
    coeffs as closed_form_coeffs,
    internalization_half_width,
)
from .hjb import (
    GridSpec,
    SolveResult,
    controls_to_csv,
    load_controls,
    save_controls,
    solve_ac,
    solve_baseline,
    solve_transient,
    value_to_csv,
)
from .intensity import build_curves
from .params import ConfigError, ModelParams, SECONDS_PER_DAY, load_params, seed_from_env
from .simulate import pathstats_to_csv, shock_experiment

SWEEP_PARAMS = ("beta", "gamma", "sigma", "psi", "eta", "k")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _params_echo(params: ModelParams) -> dict:
    return {
        "ladder": list(params.ladder),
        "amplitudes": list(params.amplitudes),
        "a": list(params.a),
        "b": list(params.b),
        "sigma": params.sigma,
        "gamma": params.gamma,
        "psi": params.psi,
        "eta_day": params.eta,
        "k": params.k,
        "beta": params.beta,
        "solver": asdict(params.solver),
        "simulation": asdict(params.simulation),
    }


class _Manifest:
    def __init__(self, command: str, argv: list[str], config_path: Path, params: ModelParams):
        self.data = {
            "command": command,
            "argv": argv,
            "config": str(config_path),
            "config_sha256": _sha256(config_path),
            "parameters": _params_echo(params),
            "versions": {
                "fxmm": __version__,
                "numpy": np.__version__,
                "python": platform.python_version(),
            },
            "seed": None,
            "artifacts": [],
            "timings": {},
            "status": "ok",
            "failure": None,
        }
        self._t0 = time.time()

    def add_artifact(self, path: Path) -> None:
        self.data["artifacts"].append(str(path))

    def time_block(self, name: str, t_start: float) -> None:
        self.data["timings"][name] = round(time.time() - t_start, 3)

    def fail(self, reason: str) -> None:
        self.data["status"] = "failed"
        self.data["failure"] = reason

    def write(self, out_dir: Path) -> Path:
        self.data["timings"]["total"] = round(time.time() - self._t0, 3)
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _fmt(v: float) -> str:
    return repr(float(v))


# --- coeffs ------------------------------------------------------------------


def _coeffs_payload(params: ModelParams) -> dict:
    curves = build_curves(params)
    cf = closed_form_coeffs(params, curves)
    tiers = [
        {
            "tier": n + 1,
            "size": c.tier_size,
            "lambda0": c.lambda0,
            "a": c.a,
            "b": c.b,
            "delta0": c.delta0,
            "c": c.c,
            "h2_at_0": c.h2_at_0,
        }
        for n, c in enumerate(curves)
    ]
    tob_spread = 2.0 * (curves[0].delta0 + cf.a0 * curves[0].tier_size / curves[0].c)
    turnover = sum(c.tier_size * float(c.value(c.delta0)) for c in curves)
    return {
        "tiers": tiers,
        "a0": cf.a0,
        "xi": cf.xi,
        "omega": cf.omega,
        "b0": cf.b0,
        "tob_spread": tob_spread,
        "turnover_one_sided": turnover,
        "zone_half_width": internalization_half_width(cf, params.k, params.psi),
    }


def cmd_coeffs(args) -> int:
    params = load_params(args.config)
    payload = _coeffs_payload(params)
    print(f"{'tier':>4} {'size':>7} {'lambda0':>9} {'delta0':>9} {'c':>8} {'h2_at_0':>10}")
    for t in payload["tiers"]:
        print(
            f"{t['tier']:>4} {t['size']:>7.1f} {t['lambda0']:>9.1f} "
            f"{t['delta0']:>9.5f} {t['c']:>8.5f} {t['h2_at_0']:>10.2f}"
        )
    print(f"a0    = {payload['a0']:.6e} bp/M")
    print(f"xi    = {payload['xi']:.6e} M/(bp*day)")
    print(f"omega = {payload['omega']:.2f} /day")
    print(f"b0    = {payload['b0']:.6f}")
    print(f"top-of-book spread  = {payload['tob_spread']:.4f} bp")
    print(f"one-sided turnover  = {payload['turnover_one_sided']:.1f} M/day")
    print(f"zone half-width     = {payload['zone_half_width']:.2f} M")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        manifest = _Manifest("coeffs", sys.argv[1:], Path(args.config), params)
        path = out_dir / "coeffs.json"
        _write_json(path, payload)
        manifest.add_artifact(path)
        manifest.write(out_dir)
    return 0


# --- solve -------------------------------------------------------------------


def _run_solve(params: ModelParams, mode: str) -> SolveResult:
    curves = build_curves(params)
    grid = GridSpec.from_config(params.solver)
    if mode == "transient":
        return solve_transient(params, curves, grid)
    if mode == "baseline":
        return solve_baseline(params, curves, grid)
    if mode == "ac":
        return solve_ac(params, curves, grid)
    raise ValueError(f"unknown mode {mode!r}")


def _write_quote_slices(res: SolveResult, params: ModelParams, path: Path) -> None:
    """Tier-1 ask quote and speed vs inventory for a few impact-state
    slices, with the closed-form approximation alongside."""
    curves = build_curves(params)
    cf = closed_form_coeffs(params, curves)
    controls = res.controls
    nx = len(controls.x_grid)
    mid = nx // 2
    if nx == 1:
        slice_ix = [0]
    else:
        step = max(1, nx // 8)
        slice_ix = sorted({mid - 2 * step, mid - step, mid, mid + step, mid + 2 * step})
    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["x", "q", "ask_quote_tier1", "speed", "approx_ask_quote_tier1"])
        for ix in slice_ix:
            xv = float(controls.x_grid[ix])
            for iq, qv in enumerate(controls.q_grid):
                speed = _fmt(controls.speed[iq, ix]) if controls.has_execution else ""
                approx = approx_quote(cf, curves[0], float(qv), xv, "ask")
                w.writerow([_fmt(xv), _fmt(qv), _fmt(controls.ask[0, iq, ix]), speed, _fmt(approx)])


def _write_speed_plane(res: SolveResult, path: Path) -> None:
    controls = res.controls
    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["q", "x", "speed", "p_E", "zone_flag"])
        for iq, qv in enumerate(controls.q_grid):
            for ix, xv in enumerate(controls.x_grid):
                w.writerow([
                    _fmt(qv), _fmt(xv),
                    _fmt(controls.speed[iq, ix]),
                    _fmt(controls.p_e[iq, ix]),
                    "1" if controls.zone[iq, ix] else "0",
                ])


def cmd_solve(args) -> int:
    params = load_params(args.config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _Manifest("solve", sys.argv[1:], Path(args.config), params)
    try:
        t0 = time.time()
        res = _run_solve(params, args.mode)
        manifest.time_block("solve", t0)

        sym = res.value.symmetry_error()
        sym_tol = 1e-8 * max(float(np.max(np.abs(res.value.values))), 1.0)
        checks_ok = True
        if sym > sym_tol:
            manifest.fail(f"value symmetry check failed: {sym:.3e} > {sym_tol:.3e}")
            checks_ok = False
        if not res.stationary:
            manifest.fail(
                f"controls not stationary at t=0: drift {res.control_drift:.3e} "
                f"> {params.solver.stationarity_tol:.1e}; increase solver horizon"
            )
            checks_ok = False

        paths = {
            "controls": out_dir / f"controls_{args.mode}.csv",
            "value": out_dir / f"value_{args.mode}.csv",
            "cache": out_dir / f"controls_{args.mode}.npz",
            "quotes": out_dir / f"quotes_vs_inventory_{args.mode}.csv",
        }
        controls_to_csv(res.controls, paths["controls"])
        value_to_csv(res.value, paths["value"])
        save_controls(res.controls, paths["cache"])
        _write_quote_slices(res, params, paths["quotes"])
        for p in paths.values():
            manifest.add_artifact(p)
        if res.controls.has_execution:
            plane = out_dir / f"speed_plane_{args.mode}.csv"
            _write_speed_plane(res, plane)
            manifest.add_artifact(plane)

        manifest.data["solver"] = {
            "mode": args.mode,
            "dt": res.dt,
            "n_steps": res.n_steps,
            "stationary": res.stationary,
            "control_drift": res.control_drift,
            "quote_clamp_count": res.controls.clamp_count,
            "value_symmetry_error": sym,
        }
        print(
            f"{args.mode} solve: {res.n_steps} steps at dt={res.dt:.3e} day, "
            f"control drift {res.control_drift:.2e}, "
            f"{'stationary' if res.stationary else 'NOT stationary'}"
        )
        manifest.write(out_dir)
        return 0 if checks_ok else 1
    except Exception as exc:
        manifest.fail(str(exc))
        manifest.write(out_dir)
        raise


# --- simulate ------------------------------------------------------------------


def _controls_for(params: ModelParams, mode: str, out_dir: Path, manifest: _Manifest):
    cache = out_dir / f"controls_{mode}.npz"
    if cache.exists():
        manifest.data.setdefault("reused", []).append(str(cache))
        return load_controls(cache)
    t0 = time.time()
    res = _run_solve(params, mode)
    manifest.time_block(f"solve_{mode}", t0)
    save_controls(res.controls, cache)
    manifest.add_artifact(cache)
    return res.controls


def cmd_simulate(args) -> int:
    params = load_params(args.config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _Manifest("simulate", sys.argv[1:], Path(args.config), params)
    try:
        n_paths = args.paths if args.paths is not None else params.simulation.paths
        if n_paths < 1:
            raise ConfigError(["simulation.paths: at least 1 path required"])
        q0 = args.shock if args.shock is not None else params.simulation.shock
        seed = seed_from_env(args.seed if args.seed is not None else params.simulation.seed)
        manifest.data["seed"] = seed
        horizon = params.simulation.horizon
        curves = build_curves(params)
        grid = GridSpec.from_config(params.solver)

        controls_tr = _controls_for(params, "transient", out_dir, manifest)
        controls_ac = _controls_for(params, "ac", out_dir, manifest) if args.compare_ac else controls_tr

        t0 = time.time()
        cmp = shock_experiment(
            params, curves, grid, n_paths, q0, horizon, seed,
            dt_sim=params.simulation.dt,
            output_points=params.simulation.output_points,
            controls_transient=controls_tr,
            controls_ac=controls_ac,
        )
        manifest.time_block("simulate", t0)

        path_tr = out_dir / "pathstats_transient.csv"
        pathstats_to_csv(cmp.transient, path_tr)
        manifest.add_artifact(path_tr)
        summary = {
            "paths": n_paths,
            "seed": seed,
            "shock": q0,
            "horizon": horizon,
            "dt_sim": params.simulation.dt,
            "terminal_pnl_transient": cmp.report.mean_pnl_transient,
            "terminal_pnl_se_transient": cmp.report.se_pnl_transient,
            "clamp_fraction": cmp.transient.clamp_fraction,
        }
        if args.compare_ac:
            path_ac = out_dir / "pathstats_ac.csv"
            pathstats_to_csv(cmp.ac, path_ac)
            manifest.add_artifact(path_ac)
            summary.update(
                terminal_pnl_ac=cmp.report.mean_pnl_ac,
                terminal_pnl_se_ac=cmp.report.se_pnl_ac,
                diff_mean=cmp.report.diff_mean,
                diff_se=cmp.report.diff_se,
                significance=cmp.report.significance,
            )
        summary_path = out_dir / "summary.json"
        _write_json(summary_path, summary)
        manifest.add_artifact(summary_path)
        manifest.write(out_dir)

        print(f"simulated {n_paths} paths, shock {q0} M, seed {seed}")
        print(
            f"terminal P&L (transient-aware): {cmp.report.mean_pnl_transient:.2f} "
            f"+/- {cmp.report.se_pnl_transient:.2f} bp*M"
        )
        if args.compare_ac:
            print(
                f"terminal P&L (permanent-impact): {cmp.report.mean_pnl_ac:.2f} "
                f"+/- {cmp.report.se_pnl_ac:.2f} bp*M"
            )
            print(
                f"difference: {cmp.report.diff_mean:.2f} +/- {cmp.report.diff_se:.2f} "
                f"({cmp.report.significance:.1f} SE)"
            )
        return 0
    except Exception as exc:
        manifest.fail(str(exc))
        manifest.write(out_dir)
        raise


# --- sweep -------------------------------------------------------------------


def cmd_sweep(args) -> int:
    params = load_params(args.config)
    if args.param not in SWEEP_PARAMS:
        raise ConfigError([f"sweep parameter {args.param!r} not in {SWEEP_PARAMS}"])
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError([f"--values must be a comma-separated number list: {exc}"]) from exc
    if not values:
        raise ConfigError(["--values is empty"])

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _Manifest("sweep", sys.argv[1:], Path(args.config), params)
    rows = []
    for v in values:
        # sweep values are in config-file units; only eta needs conversion
        canonical = v / SECONDS_PER_DAY if args.param == "eta" else v
        p = replace(params, **{args.param: canonical})
        curves = build_curves(p)
        cf = closed_form_coeffs(p, curves)
        tob = 2.0 * (curves[0].delta0 + cf.a0 * curves[0].tier_size / curves[0].c)
        rows.append([
            args.param, v, cf.a0, cf.xi, cf.omega, cf.b0,
            internalization_half_width(cf, p.k, p.psi), tob,
        ])
    path = out_dir / "sweep.csv"
    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["param", "value", "a0", "xi", "omega", "b0", "zone_half_width", "tob_spread"])
        for row in rows:
            w.writerow([row[0]] + [_fmt(v) for v in row[1:]])
    manifest.add_artifact(path)
    manifest.write(out_dir)
    print(f"swept {args.param} over {len(values)} values -> {path}")
    return 0


# --- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fxmm",
        description="Optimal dealer quoting and hedging under transient market impact.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_coeffs = sub.add_parser("coeffs", help="closed-form coefficients and quote constants")
    p_coeffs.add_argument("--config", required=True)
    p_coeffs.add_argument("--out", default=None, help="also write coeffs.json + manifest here")
    p_coeffs.set_defaults(func=cmd_coeffs)

    p_solve = sub.add_parser("solve", help="numerical HJB solve")
    p_solve.add_argument("--config", required=True)
    p_solve.add_argument("--out", required=True)
    p_solve.add_argument("--mode", choices=["transient", "baseline", "ac"], default="transient")
    p_solve.add_argument("--threads", type=int, default=1,
                         help="accepted for interface compatibility; results are "
                              "deterministic and identical for any value")
    p_solve.set_defaults(func=cmd_solve)

    p_sim = sub.add_parser("simulate", help="Monte Carlo shock experiment")
    p_sim.add_argument("--config", required=True)
    p_sim.add_argument("--out", required=True)
    p_sim.add_argument("--paths", type=int, default=None)
    p_sim.add_argument("--shock", type=float, default=None)
    p_sim.add_argument("--seed", type=int, default=None)
    p_sim.add_argument("--compare-ac", action="store_true")
    p_sim.add_argument("--threads", type=int, default=1,
                       help="accepted for interface compatibility; results are "
                            "deterministic and identical for any value")
    p_sim.set_defaults(func=cmd_simulate)

    p_sweep = sub.add_parser("sweep", help="closed forms across a parameter range")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--out", required=True)
    p_sweep.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    p_sweep.add_argument("--values", required=True, help="comma-separated values (config-file units)")
    p_sweep.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except Exception as exc:  # solver/simulation failures
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
