"""Configuration loading, validation and unit normalization.

All downstream modules work in one canonical unit system:

    price / spread  ->  bp (basis points)
    notional        ->  M (millions of base currency)
    time            ->  day

Config files are TOML with sections [market], [ladder], [execution],
[solver] and [simulation].  The only quantity not entered in canonical
units is the quadratic hedge cost ``eta`` (bp*s/M in the file, converted
to bp*day/M here).
"""

from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

SECONDS_PER_DAY = 86400.0

SEED_ENV_VAR = "FXMM_SEED"


class ConfigError(ValueError):
    """Raised when a config document is syntactically or semantically invalid.

    Carries the full list of problems found, each tagged with the key path
    (``section.key``) and, where it could be located, the line number.
    """

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in self.problems))


@dataclass(frozen=True)
class SolverConfig:
    """Grid and scheme settings for the HJB solver (canonical units)."""

    q_max: float = 100.0
    q_step: float = 1.0
    x_max: float = 1.0
    x_nodes: int = 101
    horizon: float = 0.05
    dt: Union[float, str] = "auto"
    stationarity_tol: float = 1e-4


@dataclass(frozen=True)
class SimulationConfig:
    """Monte Carlo settings (canonical units)."""

    paths: int = 10000
    horizon: float = 0.018
    dt: float = 1e-5
    seed: int = 1
    shock: float = 50.0
    output_points: int = 181


@dataclass(frozen=True)
class RawConfig:
    """Validated config exactly as entered (eta still in bp*s/M)."""

    ladder_notional: tuple[float, ...]
    intensity_amplitudes: tuple[float, ...]
    intensity_a: tuple[float, ...]
    intensity_b: tuple[float, ...]
    sigma_daily: float
    gamma: float
    psi: float
    eta: float
    k: float
    beta: float
    base_step: float = 1.0
    solver: SolverConfig = field(default_factory=SolverConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)


@dataclass(frozen=True)
class ModelParams:
    """Model parameters in canonical {bp, M, day} units.

    Immutable; safe to share across workers.  ``eta`` here is bp*day/M
    (file value divided by 86400).
    """

    ladder: tuple[float, ...]
    amplitudes: tuple[float, ...]
    a: tuple[float, ...]
    b: tuple[float, ...]
    sigma: float
    gamma: float
    psi: float
    eta: float
    k: float
    beta: float
    base_step: float
    solver: SolverConfig
    simulation: SimulationConfig

    @property
    def n_tiers(self) -> int:
        return len(self.ladder)


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(float(v))


def _find_line(text: str, section: str, key: str) -> Optional[int]:
    """Best-effort line lookup of ``key`` inside ``[section]`` for error messages."""
    in_section = False
    for i, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if stripped.startswith("["):
            in_section = stripped == f"[{section}]"
        elif in_section and re.match(rf"^{re.escape(key)}\s*=", stripped):
            return i
    return None


class _Checker:
    """Collects validation problems instead of failing on the first one."""

    def __init__(self, doc: dict, text: str = ""):
        self.doc = doc
        self.text = text
        self.problems: list[str] = []

    def _tag(self, section: str, key: str) -> str:
        line = _find_line(self.text, section, key)
        loc = f"{section}.{key}"
        return f"{loc} (line {line})" if line is not None else loc

    def complain(self, section: str, key: str, msg: str) -> None:
        self.problems.append(f"{self._tag(section, key)}: {msg}")

    def number(self, section: str, key: str, default=None):
        sec = self.doc.get(section, {})
        if key not in sec:
            if default is not None:
                return default
            self.complain(section, key, "missing required key")
            return None
        v = sec[key]
        if not _is_number(v):
            self.complain(section, key, f"expected a finite number, got {v!r}")
            return None
        return float(v)

    def integer(self, section: str, key: str, default=None):
        sec = self.doc.get(section, {})
        if key not in sec:
            if default is not None:
                return default
            self.complain(section, key, "missing required key")
            return None
        v = sec[key]
        if isinstance(v, bool) or not isinstance(v, int):
            self.complain(section, key, f"expected an integer, got {v!r}")
            return None
        return v

    def number_list(self, section: str, key: str):
        sec = self.doc.get(section, {})
        if key not in sec:
            self.complain(section, key, "missing required key")
            return None
        v = sec[key]
        if not isinstance(v, list) or not all(_is_number(e) for e in v):
            self.complain(section, key, f"expected a list of finite numbers, got {v!r}")
            return None
        return tuple(float(e) for e in v)


def load_config(source: Union[str, Path]) -> RawConfig:
    """Parse and validate a TOML config document.

    ``source`` is a file path or a TOML string.  All validation problems
    are collected and reported together in a single :class:`ConfigError`;
    nothing is silently defaulted except the optional solver/simulation
    keys, which have documented defaults.
    """
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source and "=" not in source):
        path = Path(source)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError([f"cannot read config file {path}: {exc}"]) from exc
    else:
        text = str(source)

    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"TOML parse error: {exc}"]) from exc

    chk = _Checker(doc, text)

    sizes = chk.number_list("ladder", "sizes")
    amplitudes = chk.number_list("ladder", "amplitudes")
    a = chk.number_list("ladder", "a")
    b = chk.number_list("ladder", "b")
    base_step = chk.number("ladder", "base_step", default=1.0)

    sigma = chk.number("market", "sigma_daily")
    gamma = chk.number("market", "gamma")
    psi = chk.number("execution", "psi")
    eta = chk.number("execution", "eta")
    k = chk.number("execution", "k")
    beta = chk.number("execution", "beta")

    # ladder invariants
    if sizes is not None:
        if len(sizes) == 0:
            chk.complain("ladder", "sizes", "N>=1 violated: ladder is empty")
        else:
            if any(s <= 0 for s in sizes):
                chk.complain("ladder", "sizes", "tier sizes must be positive")
            if any(s2 <= s1 for s1, s2 in zip(sizes, sizes[1:])):
                chk.complain("ladder", "sizes", "strictly increasing violated")
            if base_step is not None and base_step > 0:
                for s in sizes:
                    ratio = s / base_step
                    if abs(ratio - round(ratio)) > 1e-9:
                        chk.complain(
                            "ladder", "sizes",
                            f"tier {s} is not an integer multiple of base_step={base_step}",
                        )
                        break
        for name, lst in (("amplitudes", amplitudes), ("a", a), ("b", b)):
            if lst is not None and len(lst) != len(sizes):
                chk.complain("ladder", name, f"length {len(lst)} != number of tiers {len(sizes)}")
    if base_step is not None and base_step <= 0:
        chk.complain("ladder", "base_step", "must be positive")
    if amplitudes is not None and any(l0 <= 0 for l0 in amplitudes):
        chk.complain("ladder", "amplitudes", "amplitudes must be strictly positive")
    if b is not None and any(bi <= 0 for bi in b):
        chk.complain("ladder", "b", "intensity slope b must be > 0")

    for section, key, v in (
        ("market", "sigma_daily", sigma),
        ("market", "gamma", gamma),
        ("execution", "psi", psi),
        ("execution", "eta", eta),
        ("execution", "k", k),
        ("execution", "beta", beta),
    ):
        if v is not None and v < 0:
            chk.complain(section, key, "must be nonnegative")

    solver = _load_solver(chk)
    simulation = _load_simulation(chk)

    if chk.problems:
        raise ConfigError(chk.problems)

    return RawConfig(
        ladder_notional=sizes,
        intensity_amplitudes=amplitudes,
        intensity_a=a,
        intensity_b=b,
        sigma_daily=sigma,
        gamma=gamma,
        psi=psi,
        eta=eta,
        k=k,
        beta=beta,
        base_step=base_step,
        solver=solver,
        simulation=simulation,
    )


def _load_solver(chk: _Checker) -> SolverConfig:
    d = SolverConfig()
    q_max = chk.number("solver", "q_max", default=d.q_max)
    q_step = chk.number("solver", "q_step", default=d.q_step)
    x_max = chk.number("solver", "x_max", default=d.x_max)
    x_nodes = chk.integer("solver", "x_nodes", default=d.x_nodes)
    horizon = chk.number("solver", "horizon", default=d.horizon)
    tol = chk.number("solver", "stationarity_tol", default=d.stationarity_tol)

    dt = chk.doc.get("solver", {}).get("dt", d.dt)
    if dt != "auto" and not _is_number(dt):
        chk.complain("solver", "dt", f"expected 'auto' or a positive number, got {dt!r}")
        dt = d.dt
    elif _is_number(dt):
        dt = float(dt)
        if dt <= 0:
            chk.complain("solver", "dt", "must be positive")

    for key, v in (("q_max", q_max), ("q_step", q_step), ("x_max", x_max), ("horizon", horizon)):
        if v is not None and v <= 0:
            chk.complain("solver", key, "must be positive")
    if x_nodes is not None and (x_nodes < 3 or x_nodes % 2 == 0):
        chk.complain("solver", "x_nodes", "must be an odd integer >= 3 so x=0 is a node")
    if tol is not None and tol <= 0:
        chk.complain("solver", "stationarity_tol", "must be positive")

    return SolverConfig(
        q_max=q_max, q_step=q_step, x_max=x_max, x_nodes=x_nodes,
        horizon=horizon, dt=dt, stationarity_tol=tol,
    )


def _load_simulation(chk: _Checker) -> SimulationConfig:
    d = SimulationConfig()
    paths = chk.integer("simulation", "paths", default=d.paths)
    horizon = chk.number("simulation", "horizon", default=d.horizon)
    dt = chk.number("simulation", "dt", default=d.dt)
    seed = chk.integer("simulation", "seed", default=d.seed)
    shock = chk.number("simulation", "shock", default=d.shock)
    output_points = chk.integer("simulation", "output_points", default=d.output_points)

    if paths is not None and paths < 1:
        chk.complain("simulation", "paths", "at least 1 path required")
    if horizon is not None and horizon <= 0:
        chk.complain("simulation", "horizon", "must be positive")
    if dt is not None and dt <= 0:
        chk.complain("simulation", "dt", "must be positive")
    if seed is not None and seed < 0:
        chk.complain("simulation", "seed", "must be nonnegative")
    if output_points is not None and output_points < 2:
        chk.complain("simulation", "output_points", "need at least 2 output times")

    return SimulationConfig(
        paths=paths, horizon=horizon, dt=dt, seed=seed,
        shock=shock, output_points=output_points,
    )


def normalize(raw: RawConfig) -> ModelParams:
    """Convert a validated RawConfig to canonical {bp, M, day} units.

    Only eta changes numerically (bp*s/M -> bp*day/M); everything else is
    already canonical in the file format.
    """
    return ModelParams(
        ladder=raw.ladder_notional,
        amplitudes=raw.intensity_amplitudes,
        a=raw.intensity_a,
        b=raw.intensity_b,
        sigma=raw.sigma_daily,
        gamma=raw.gamma,
        psi=raw.psi,
        eta=raw.eta / SECONDS_PER_DAY,
        k=raw.k,
        beta=raw.beta,
        base_step=raw.base_step,
        solver=raw.solver,
        simulation=raw.simulation,
    )


def denormalize(params: ModelParams) -> RawConfig:
    """Inverse of :func:`normalize`; reproduces input units to 1e-12 relative."""
    return RawConfig(
        ladder_notional=params.ladder,
        intensity_amplitudes=params.amplitudes,
        intensity_a=params.a,
        intensity_b=params.b,
        sigma_daily=params.sigma,
        gamma=params.gamma,
        psi=params.psi,
        eta=params.eta * SECONDS_PER_DAY,
        k=params.k,
        beta=params.beta,
        base_step=params.base_step,
        solver=params.solver,
        simulation=params.simulation,
    )


def load_params(source: Union[str, Path]) -> ModelParams:
    """Load, validate and normalize in one step."""
    return normalize(load_config(source))


def seed_from_env(default: int) -> int:
    """Apply the FXMM_SEED environment override if present."""
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError([f"environment variable {SEED_ENV_VAR} must be an integer, got {raw!r}"]) from exc


def with_beta(params: ModelParams, beta: float) -> ModelParams:
    """Copy of params with the impact decay rate replaced (used for the
    permanent-impact comparison solve)."""
    return replace(params, beta=float(beta))
