"""
Dispatch one experiment file to the matching module and write its artifacts.

Every run directory gets manifest.json (config echo, code version, seed,
mode) and summary.txt next to the mode's CSVs. Nothing in the manifest
depends on the wall clock, so rerunning a config with the same seed
reproduces the directory byte for byte.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from logging import getLogger
from pathlib import Path
from typing import Optional

import numpy as np

from config import DEFAULT_THREADS, OUT_PATH
from helpers.csv_export import write_manifest, write_profile, write_rows, write_summary
from helpers.experiment_config import ExperimentConfig, parse_config
from lib import __version__
from lib.errors import ConfigValidationError, LabError, ParameterError
from lib.experiments import chain_blowups, eps_sweep
from lib.particles import density_sampler, gaussian_sampler, simulate_particles, uniform_sampler
from lib.solver_t import firing_lower_bound, run_t
from lib.solver_tau import TauSettings, q_diagnostics, run_tau
from lib.utils import log_metrics, timestamp

logger = getLogger(__name__)

Q_DELTAS = (1 / 4, 1 / 8, 1 / 16)


class ExitStatus(IntEnum):
    OK = 0
    FAILED = 1
    INVALID = 2
    RUNTIME = 3


@dataclass(frozen=True)
class RunOutcome:
    status: ExitStatus
    directory: Optional[Path] = None
    message: str = ""


def artifact_directory(cfg: ExperimentConfig, override: Optional[Path] = None) -> Path:
    if override is not None:
        return Path(override)
    if cfg.output_directory is not None:
        return cfg.output_directory
    return OUT_PATH / f"{timestamp()}_{cfg.name}"


def run_config(
        path: Path,
        output_dir: Optional[Path] = None,
        threads: Optional[int] = None,
        seed: Optional[int] = None,
) -> RunOutcome:
    """
    Parse, validate and run one experiment file.

    Returns the exit status (0 ok, 1 failed validation, 2 invalid input,
    3 solver or runtime error) with the artifact directory when one was made.
    """
    try:
        cfg = parse_config(Path(path)).with_seed(seed)
    except ConfigValidationError as exc:
        for problem in exc.problems:
            logger.error("[RUN] %s", problem)
        return RunOutcome(ExitStatus.INVALID, message=str(exc))

    directory = artifact_directory(cfg, output_dir)
    directory.mkdir(parents=True, exist_ok=True)
    workers = threads if threads is not None else DEFAULT_THREADS
    logger.info("[RUN] %s: mode=%s seed=%d -> %s", cfg.name, cfg.run.mode, cfg.run.seed, directory)

    write_manifest(directory / "manifest.json", {
        "config": cfg.echo,
        "version": __version__,
        "seed": cfg.run.seed,
        "mode": cfg.run.mode,
    })
    try:
        status = DISPATCH[cfg.run.mode](cfg, directory, workers)
    except (ConfigValidationError, ParameterError) as exc:
        logger.error("[RUN] invalid input: %s", exc)
        return RunOutcome(ExitStatus.INVALID, directory, str(exc))
    except LabError as exc:
        logger.error("[RUN] %s: %s", type(exc).__name__, exc)
        return RunOutcome(ExitStatus.RUNTIME, directory, str(exc))
    logger.info("[RUN] %s finished with status %d", cfg.name, status)
    return RunOutcome(status, directory)


# ---------------------------------------------------------------------------
# Modes
# ---------------------------------------------------------------------------

def _run_tau(cfg: ExperimentConfig, directory: Path, threads: int) -> ExitStatus:
    params = cfg.params()
    init = cfg.build_init(cfg.build_grid())
    traj = run_tau(params, init, cfg.run.tau_end, cfg.run.dtau, cfg.run.sample_every, TauSettings(picard=cfg.run.picard))
    traj.to_csv(directory / "trajectory.csv")
    traj.diagnostics_to_csv(directory / "diagnostics.csv")
    write_profile(directory / "profile_final.csv", traj.final.density)

    deltas = [d for d in Q_DELTAS if d <= traj.tau[-1] - traj.tau[0]]
    diagnostics = [q_diagnostics(traj, d) for d in deltas]
    write_rows(directory / "q_diagnostics.csv", ["delta", "lifespan_estimate", "q_modulus", "scaled_modulus"],
               ((d.delta, d.lifespan_estimate, d.q_modulus, d.scaled_modulus) for d in diagnostics))
    metrics = {
        "eps": f"{params.eps:.6g}",
        "steps": str(traj.steps),
        "tau_end": f"{traj.tau[-1]:.6g}",
        "lifespan": f"{traj.int_Q[-1]:.6g}",
        "max_mass_error": f"{np.max(np.abs(traj.mass - 1.0)):.3e}",
        "final_M": f"{traj.M[-1]:.6g}",
    }
    _finish(directory, "tau run", metrics)
    return ExitStatus.OK


def _run_t(cfg: ExperimentConfig, directory: Path, threads: int) -> ExitStatus:
    params = cfg.params()
    init = cfg.build_init(cfg.build_grid())
    traj = run_t(params, init, cfg.run.t_end, cfg.run.dt, cfg.run.sample_every, cfg.run.with_auxiliaries)
    traj.to_csv(directory / "trajectory.csv")
    if traj.has_auxiliaries:
        traj.auxiliaries_to_csv(directory / "auxiliaries.csv")
    write_profile(directory / "profile_final.csv", traj.final.density)
    metrics = {
        "eps": f"{params.eps:.6g}",
        "steps": str(traj.steps),
        "t_end": f"{traj.t[-1]:.6g}",
        "int_N": f"{traj.int_N[-1]:.6g}",
        "max_mass_error": f"{np.max(np.abs(traj.mass - 1.0)):.3e}",
    }
    if len(traj) > 2:
        bound = firing_lower_bound(traj, min(0.5, float(traj.t[-1])))
        metrics["firing_lower_bound"] = f"{bound.value:.6g} (t0={bound.t0:.4g}, window={bound.window:.4g})"
    _finish(directory, "t run", metrics)
    return ExitStatus.OK


def _run_sweep(cfg: ExperimentConfig, directory: Path, threads: int) -> ExitStatus:
    init = cfg.build_init(cfg.build_grid())
    report = eps_sweep(cfg.model, init, cfg.run.eps_list, cfg.run.tau_end, cfg.run.dtau, cfg.run.sample_every,
                       TauSettings(picard=cfg.run.picard), threads)
    report.write(directory)
    log_metrics(logger, "RUN", report.to_metrics_dict())
    return ExitStatus.OK


def _run_blowup(cfg: ExperimentConfig, directory: Path, threads: int) -> ExitStatus:
    params = cfg.params()
    init = cfg.build_init(cfg.build_grid())
    chain = chain_blowups(init, params, cfg.run.tau_end, sample_every=cfg.run.sample_every,
                          settings=TauSettings(picard=cfg.run.picard))
    chain.to_csv(directory / "events.csv")
    for k, event in enumerate(chain.events, start=1):
        if event.n_post is not None:
            write_profile(directory / f"post_profile_{k:03d}.csv", event.n_post)
    for k, traj in enumerate(chain.trajectories, start=1):
        traj.to_csv(directory / f"segment_{k:03d}.csv")
    metrics = {
        "eps": f"{params.eps:.6g}",
        "events": str(len(chain.events)),
        "ended_eternal": str(chain.ended_eternal),
        "lifespan": f"{chain.lifespan:.6g}",
        "tau_reached": f"{chain.tau_reached:.6g}",
        "stalls": str(chain.stalls),
    }
    _finish(directory, "blow-up chain", metrics)
    return ExitStatus.OK


def _sampler(cfg: ExperimentConfig):
    values = cfg.init.values
    if cfg.init.kind == "gaussian":
        return gaussian_sampler(values["mean"], values["sd"])
    if cfg.init.kind == "uniform":
        return uniform_sampler(values["low"], values["high"])
    return density_sampler(cfg.build_init(cfg.build_grid()))


def _run_particles(cfg: ExperimentConfig, directory: Path, threads: int) -> ExitStatus:
    params = cfg.params()
    result = simulate_particles(params, _sampler(cfg), cfg.run.n_particles, cfg.run.dt, cfg.run.t_end,
                                cfg.run.seed, cfg.run.bin_width, threads)
    result.to_csv(directory / "particles.csv")
    result.histogram_to_csv(directory / "histogram.csv", cfg.build_grid().interfaces)
    metrics = {
        "n_particles": str(result.n_particles),
        "seed": str(result.seed),
        "steps": str(result.steps),
        "fired_fraction": f"{result.fired_cum[-1]:.6g}",
    }
    _finish(directory, "particles", metrics)
    return ExitStatus.OK


def _run_validate(cfg: ExperimentConfig, directory: Path, threads: int) -> ExitStatus:
    from helpers.acceptance import CRITERIA, validate
    unknown = [name for name in cfg.run.only if name not in CRITERIA]
    if unknown:
        raise ConfigValidationError([f"[run] only: unknown criteria {unknown}"])
    report = validate(cfg.run.only or None, threads=threads, seed=cfg.run.seed)
    report.write(directory)
    log_metrics(logger, "VALIDATE", report.to_metrics_dict())
    return ExitStatus.OK if report.passed else ExitStatus.FAILED


def _finish(directory: Path, title: str, metrics: dict[str, str]) -> None:
    write_summary(directory / "summary.txt", title, metrics)
    log_metrics(logger, "RUN", metrics)


DISPATCH = {
    "tau": _run_tau,
    "t": _run_t,
    "sweep": _run_sweep,
    "blowup": _run_blowup,
    "particles": _run_particles,
    "validate": _run_validate,
}
