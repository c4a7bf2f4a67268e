"""
Experiment files: sectioned `key = value` text parsed with configparser.

    [model]   a, b, V_R, V_F
    [grid]    dv, optional v_min / v_max (default truncation otherwise)
    [run]     mode = tau | t | sweep | blowup | particles | validate, plus the
              keys that mode needs (eps or eps_list, t_end or tau_end, dt,
              dtau, sample_every, seed, n_particles, bin_width,
              with_auxiliaries, picard, only)
    [init]    kind = gaussian (mean, sd) | uniform (low, high) | plateau | file (path)
    [output]  directory

Every problem found (unknown or missing keys, unparsable numbers, violated
preconditions) is collected and raised together as one ConfigValidationError.
"""
from __future__ import annotations

import math
from configparser import ConfigParser, Error as ConfigParserError
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

import numpy as np
from scipy.stats import norm

from config import DESK_SEED
from lib.errors import ConfigValidationError, LabError
from lib.model import (DensityField, ModelParams, VoltageGrid, default_bounds, make_grid, plateau_steady_state,
                       project_density)

MODES = ("tau", "t", "sweep", "blowup", "particles", "validate")
INIT_KINDS = {"gaussian": ("mean", "sd"), "uniform": ("low", "high"), "plateau": (), "file": ("path",)}

ALLOWED = {
    "model": {"a", "b", "V_R", "V_F"},
    "grid": {"v_min", "v_max", "dv"},
    "run": {"mode", "eps", "eps_list", "t_end", "tau_end", "dt", "dtau", "sample_every", "seed",
            "n_particles", "bin_width", "with_auxiliaries", "picard", "only"},
    "init": {"kind", "mean", "sd", "low", "high", "path"},
    "output": {"directory"},
}

# keys each mode cannot run without
REQUIRED_RUN = {
    "tau": ("eps", "tau_end"),
    "t": ("eps", "t_end"),
    "sweep": ("eps_list", "tau_end"),
    "blowup": ("eps", "tau_end"),
    "particles": ("eps", "t_end", "dt", "n_particles"),
    "validate": (),
}


@dataclass(frozen=True)
class GridSpec:
    dv: float
    v_min: Optional[float] = None
    v_max: Optional[float] = None


@dataclass(frozen=True)
class RunSpec:
    mode: str
    eps: Optional[float] = None
    eps_list: tuple[float, ...] = ()
    t_end: Optional[float] = None
    tau_end: Optional[float] = None
    dt: Optional[float] = None
    dtau: Optional[float] = None
    sample_every: Optional[float] = None
    seed: int = DESK_SEED
    n_particles: Optional[int] = None
    bin_width: Optional[float] = None
    with_auxiliaries: bool = False
    picard: bool = False
    only: tuple[str, ...] = ()


@dataclass(frozen=True)
class InitSpec:
    kind: str
    values: dict[str, float] = field(default_factory=dict)
    path: Optional[Path] = None


@dataclass(frozen=True)
class ExperimentConfig:
    source: Path
    model: Optional[ModelParams]
    grid: Optional[GridSpec]
    run: RunSpec
    init: Optional[InitSpec]
    output_directory: Optional[Path]
    echo: dict[str, dict[str, str]]

    @property
    def name(self) -> str:
        return self.source.stem

    def with_seed(self, seed: Optional[int]) -> ExperimentConfig:
        if seed is None:
            return self
        echo = {k: dict(v) for k, v in self.echo.items()}
        echo.setdefault("run", {})["seed"] = str(seed)
        return replace(self, run=replace(self.run, seed=seed), echo=echo)

    def params(self, eps: Optional[float] = None) -> ModelParams:
        return self.model.with_eps(eps if eps is not None else self.run.eps)

    def build_grid(self) -> VoltageGrid:
        low, high = default_bounds(self.model)
        v_min = self.grid.v_min if self.grid.v_min is not None else low
        v_max = self.grid.v_max if self.grid.v_max is not None else high
        return make_grid(self.model, v_min, v_max, self.grid.dv)

    def build_init(self, grid: VoltageGrid) -> DensityField:
        kind = self.init.kind
        if kind == "gaussian":
            mean, sd = self.init.values["mean"], self.init.values["sd"]
            return project_density(grid, lambda v: norm.pdf(v, mean, sd), cdf=lambda v: norm.cdf(v, mean, sd))
        if kind == "uniform":
            low, high = self.init.values["low"], self.init.values["high"]
            return project_density(grid, lambda v: ((v >= low) & (v <= high)) / (high - low),
                                   cdf=lambda v: np.clip((v - low) / (high - low), 0.0, 1.0))
        if kind == "plateau":
            return plateau_steady_state(self.model, grid)
        from helpers.csv_export import read_columns
        columns = read_columns(self.init.path)
        if "v" not in columns or "n" not in columns:
            raise ConfigValidationError([f"{self.init.path.name}: initial profile needs columns v,n"])
        v, n = columns["v"], columns["n"]
        return project_density(grid, lambda x: np.interp(x, v, n, left=0.0, right=0.0))


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

class _Reader:
    """Typed access to one section that records problems instead of raising."""

    def __init__(self, parser: ConfigParser, section: str, problems: list[str]):
        self.items = dict(parser.items(section)) if parser.has_section(section) else {}
        self.section = section
        self.problems = problems

    def has(self, key: str) -> bool:
        return key in self.items

    def _convert(self, key: str, kind: type, required: bool) -> Any:
        if key not in self.items:
            if required:
                self.problems.append(f"[{self.section}] missing required key '{key}'")
            return None
        raw = self.items[key].strip()
        try:
            if kind is bool:
                lowered = raw.lower()
                if lowered not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                    raise ValueError(raw)
                return lowered in ("true", "1", "yes", "on")
            value = kind(raw)
        except ValueError:
            self.problems.append(f"[{self.section}] {key} = {raw!r} is not a valid {kind.__name__}")
            return None
        if kind is float and not math.isfinite(value):
            self.problems.append(f"[{self.section}] {key} must be finite")
            return None
        return value

    def float(self, key: str, required: bool = False) -> Optional[float]:
        return self._convert(key, float, required)

    def int(self, key: str, required: bool = False) -> Optional[int]:
        return self._convert(key, int, required)

    def bool(self, key: str) -> bool:
        return bool(self._convert(key, bool, False))

    def str(self, key: str, required: bool = False) -> Optional[str]:
        if key not in self.items:
            if required:
                self.problems.append(f"[{self.section}] missing required key '{key}'")
            return None
        return self.items[key].strip()

    def float_list(self, key: str) -> tuple[float, ...]:
        raw = self.str(key)
        if raw is None:
            return ()
        try:
            return tuple(float(x) for x in raw.replace(",", " ").split())
        except ValueError:
            self.problems.append(f"[{self.section}] {key} = {raw!r} is not a list of numbers")
            return ()


def _check_keys(parser: ConfigParser, problems: list[str]) -> None:
    for section in parser.sections():
        if section not in ALLOWED:
            problems.append(f"unknown section [{section}]")
            continue
        for key in parser.options(section):
            if key not in ALLOWED[section]:
                problems.append(f"[{section}] unknown key '{key}'")


def _positive(problems: list[str], label: str, value: Optional[float]) -> None:
    if value is not None and not value > 0:
        problems.append(f"{label} must be positive, got {value}")


def parse_config(path: Path) -> ExperimentConfig:
    """Read and validate an experiment file. Raises ConfigValidationError listing every problem."""
    path = Path(path)
    if not path.is_file():
        raise ConfigValidationError([f"config file not found: {path}"])
    parser = ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(path.read_text(encoding="utf-8"), source=str(path))
    except ConfigParserError as exc:
        raise ConfigValidationError([f"{path.name}: {exc}"]) from exc

    problems: list[str] = []
    _check_keys(parser, problems)

    run = _Reader(parser, "run", problems)
    mode = run.str("mode", required=True)
    if mode is not None and mode not in MODES:
        problems.append(f"[run] mode = {mode!r} is not one of {', '.join(MODES)}")
        mode = None
    for key in REQUIRED_RUN.get(mode, ()):
        if not run.has(key):
            problems.append(f"[run] mode {mode} needs '{key}'")
    run_spec = RunSpec(
        mode=mode or "validate",
        eps=run.float("eps"),
        eps_list=run.float_list("eps_list"),
        t_end=run.float("t_end"),
        tau_end=run.float("tau_end"),
        dt=run.float("dt"),
        dtau=run.float("dtau"),
        sample_every=run.float("sample_every"),
        seed=run.int("seed") if run.has("seed") else DESK_SEED,
        n_particles=run.int("n_particles"),
        bin_width=run.float("bin_width"),
        with_auxiliaries=run.bool("with_auxiliaries"),
        picard=run.bool("picard"),
        only=tuple(x for x in (run.str("only") or "").replace(",", " ").split()),
    )
    for label in ("eps", "t_end", "tau_end", "dt", "dtau", "sample_every", "bin_width"):
        _positive(problems, f"[run] {label}", getattr(run_spec, label))
    if run_spec.n_particles is not None and run_spec.n_particles < 1:
        problems.append(f"[run] n_particles must be at least 1, got {run_spec.n_particles}")
    if run_spec.eps_list:
        eps = run_spec.eps_list
        if len(eps) < 2 or any(e <= 0 for e in eps) or any(b >= a for a, b in zip(eps, eps[1:])):
            problems.append(f"[run] eps_list must hold at least two positive, strictly decreasing values, got {eps}")

    needs_model = run_spec.mode != "validate"
    model = grid = init = None
    if needs_model:
        model_reader = _Reader(parser, "model", problems)
        values = {k: model_reader.float(k, required=True) for k in ("a", "b", "V_R", "V_F")}
        if all(v is not None for v in values.values()):
            try:
                model = ModelParams(**values)
            except LabError as exc:
                problems.append(f"[model] {exc}")
        if model is not None and run_spec.mode == "blowup" and not model.b > 0:
            problems.append(f"[model] mode blowup needs b > 0, got b={model.b}")

        grid_reader = _Reader(parser, "grid", problems)
        dv = grid_reader.float("dv", required=True)
        _positive(problems, "[grid] dv", dv)
        grid = GridSpec(dv or 0.0, grid_reader.float("v_min"), grid_reader.float("v_max"))
        if model is not None and dv and dv > 0:
            try:
                low, high = default_bounds(model)
                make_grid(model, grid.v_min if grid.v_min is not None else low,
                          grid.v_max if grid.v_max is not None else high, dv)
            except LabError as exc:
                problems.append(f"[grid] {exc}")

        init_reader = _Reader(parser, "init", problems)
        kind = init_reader.str("kind", required=True)
        if kind is not None and kind not in INIT_KINDS:
            problems.append(f"[init] kind = {kind!r} is not one of {', '.join(INIT_KINDS)}")
        elif kind is not None:
            numbers = {k: init_reader.float(k, required=True) for k in INIT_KINDS[kind] if k != "path"}
            init_path = None
            if kind == "file":
                raw = init_reader.str("path", required=True)
                if raw is not None:
                    init_path = (path.parent / raw).resolve()
                    if not init_path.is_file():
                        problems.append(f"[init] file not found: {init_path}")
            if kind == "gaussian":
                _positive(problems, "[init] sd", numbers.get("sd"))
            if kind == "uniform" and None not in numbers.values() and not numbers["low"] < numbers["high"]:
                problems.append("[init] uniform needs low < high")
            if kind == "plateau" and model is not None and model.b < model.gap:
                problems.append(f"[init] plateau needs b >= V_F - V_R, got b={model.b}")
            init = InitSpec(kind, {k: v for k, v in numbers.items() if v is not None}, init_path)

    output = _Reader(parser, "output", problems)
    directory = output.str("directory")
    output_directory = (path.parent / directory).resolve() if directory else None

    if problems:
        raise ConfigValidationError(problems)
    echo = {section: dict(parser.items(section)) for section in parser.sections()}
    return ExperimentConfig(path, model, grid, run_spec, init, output_directory, echo)
