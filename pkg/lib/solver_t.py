"""
Original-timescale solver for the random-discharge system

    d_t p + d_v[(-v + b N) p] - a d_vv p = N(t) delta_{V_R} - (1/eps) 1_{v>=V_F} p,
    N = (1/eps) int_{V_F}^inf p

and for three linear companions driven by the same N and the same discharged
mass per step:

- p_not:   starts from the data, absorbs, never receives the reset source;
- p_spike: starts from zero, absorbs, receives the reset source;
- p_bar:   starts from zero, never absorbs, receives the reset source.

All four share one Transport per step, so p_not + p_spike = p holds to
round-off and the orderings p_not <= p, p_spike <= p_bar hold cell by cell.

run_pbar drives p_bar alone from an external RateInput.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from logging import getLogger
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from config import CFL_SAFETY, DEFAULT_SAMPLES, MAX_STEPS
from lib import fv_scheme as fv
from lib.errors import ParameterError, StepError
from lib.green import RateInput
from lib.model import DensityField, ModelParams, VoltageGrid, moments, normalized, zero_density
from lib.solver_tau import TauTrajectory

logger = getLogger(__name__)


@dataclass(frozen=True)
class TState:
    t: float
    density: DensityField
    N: float


@dataclass(frozen=True)
class AuxiliaryBundle:
    p_not: DensityField
    p_spike: DensityField
    p_bar: DensityField


@dataclass(frozen=True)
class TSettings:
    with_auxiliaries: bool = False
    keep_snapshots: bool = False
    max_steps: int = MAX_STEPS


def compute_N(d: DensityField, params: ModelParams) -> float:
    """Firing rate (1/eps) times the tail mass."""
    return d.tail_mass / params.require_eps()


def adaptive_dt(state: TState, params: ModelParams) -> float:
    return CFL_SAFETY * fv.max_stable_step(state.density.grid, 1.0, params.b * state.N)


# ---------------------------------------------------------------------------
# Trajectory
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TTrajectory:
    """
    Sampled run of the t solver.

    int_N is the discharged mass summed over steps, i.e. tau(t). The auxiliary
    columns are None unless the run carried the companions:
    not_excess = max(p_not - p)+, spike_excess = max(p_spike - p_bar)+,
    split_l1 = ||p_not + p_spike - p||_1, fired_not = int N_not.
    """
    params: ModelParams
    t: np.ndarray
    N: np.ndarray
    int_N: np.ndarray
    M: np.ndarray
    mass: np.ndarray
    mean: np.ndarray
    second_moment: np.ndarray
    l2: np.ndarray
    not_excess: Optional[np.ndarray] = None
    spike_excess: Optional[np.ndarray] = None
    split_l1: Optional[np.ndarray] = None
    mass_not: Optional[np.ndarray] = None
    mass_spike: Optional[np.ndarray] = None
    mass_bar: Optional[np.ndarray] = None
    l2_bar: Optional[np.ndarray] = None
    N_not: Optional[np.ndarray] = None
    fired_not: Optional[np.ndarray] = None
    snapshots: tuple[DensityField, ...] = ()
    final: Optional[TState] = None
    auxiliaries: Optional[AuxiliaryBundle] = None
    steps: int = 0

    def __len__(self) -> int:
        return int(self.t.size)

    @property
    def has_auxiliaries(self) -> bool:
        return self.split_l1 is not None

    def to_csv(self, path: Path) -> Path:
        from helpers.csv_export import write_columns
        columns = {
            "t": self.t, "N": self.N, "mass": self.mass, "mean": self.mean,
            "second_moment": self.second_moment, "l2": self.l2, "M": self.M, "int_N": self.int_N,
        }
        return write_columns(path, columns)

    def auxiliaries_to_csv(self, path: Path) -> Path:
        from helpers.csv_export import write_columns
        if not self.has_auxiliaries:
            raise ParameterError("trajectory was run without auxiliaries")
        columns = {
            "t": self.t, "not_excess": self.not_excess, "spike_excess": self.spike_excess,
            "split_l1": self.split_l1, "mass_not": self.mass_not, "mass_spike": self.mass_spike,
            "mass_bar": self.mass_bar, "l2_bar": self.l2_bar, "N_not": self.N_not, "fired_not": self.fired_not,
        }
        return write_columns(path, columns)


def _sample_times(start: float, end: float, every: float) -> list[float]:
    n_samples = max(1, int(math.ceil((end - start) / every - 1e-9)))
    times = [min(start + k * every, end) for k in range(1, n_samples + 1)]
    times[-1] = end
    return times


def _l2(values: np.ndarray, dv: float) -> float:
    return float((values * values).sum() * dv)


def run_t(
        params: ModelParams,
        init: DensityField,
        t_end: float,
        dt: Optional[float] = None,
        sample_every: Optional[float] = None,
        with_auxiliaries: bool = False,
        settings: Optional[TSettings] = None,
) -> TTrajectory:
    """
    Integrate p from 0 to t_end with the lagged firing rate.

    The absorption is the exact per-cell factor exp(-dt/eps) and the reset
    deposit equals the mass it removed, so mass is conserved to round-off for
    any dt. dt=None steps at CFL_SAFETY times dv/(max|v| + |b|N).
    """
    eps = params.require_eps()
    settings = settings or TSettings(with_auxiliaries=with_auxiliaries)
    aux = settings.with_auxiliaries or with_auxiliaries
    if not t_end > 0:
        raise ParameterError(f"t_end must be positive, got {t_end}")
    if dt is not None and not dt > 0:
        raise ParameterError(f"dt must be positive, got {dt}")
    every = sample_every if sample_every is not None else t_end / DEFAULT_SAMPLES
    if not every > 0:
        raise ParameterError(f"sample_every must be positive, got {every}")

    init = normalized(init)
    grid = init.grid
    dv = grid.dv
    state = TState(0.0, init, compute_N(init, params))
    p_not = np.array(init.values) if aux else None
    p_spike = np.zeros(grid.n_cells) if aux else None
    p_bar = np.zeros(grid.n_cells) if aux else None
    int_N = 0.0
    fired_not = 0.0
    N_not = state.N
    rows: list[tuple] = []
    aux_rows: list[tuple] = []
    snapshots: list[DensityField] = []

    def record(s: TState) -> None:
        m = moments(s.density, params)
        rows.append((s.t, s.N, int_N, m.tail_mass_M, m.mass, m.mean, m.second_moment, m.l2))
        if aux:
            p = np.asarray(s.density.values)
            aux_rows.append((
                max(0.0, float((p_not - p).max())),
                max(0.0, float((p_spike - p_bar).max())),
                float(np.abs(p_not + p_spike - p).sum() * dv),
                float(p_not.sum() * dv), float(p_spike.sum() * dv), float(p_bar.sum() * dv),
                _l2(p_bar, dv), N_not, fired_not,
            ))
        if settings.keep_snapshots:
            snapshots.append(s.density)

    record(state)
    logger.info("[T] run start: eps=%.3g b=%.4g t_end=%.4g cells=%d aux=%s", eps, params.b, t_end, grid.n_cells, aux)

    steps = 0
    for target in _sample_times(0.0, t_end, every):
        while state.t < target:
            h = dt if dt is not None else adaptive_dt(state, params)
            remaining = target - state.t
            if h >= remaining * (1.0 - 1e-12):
                h = remaining
            where = f"t={state.t:.6g}"
            transport = fv.Transport(scale=1.0, shift=params.b * state.N, diffusion=params.a)
            fv.check_cfl(grid, h, 1.0, params.b * state.N, where)
            fraction = -math.expm1(-h / eps)

            values = transport.apply(np.asarray(state.density.values), grid, h, where)
            removed = fv.remove_from_tail(values, grid.idx_VF, dv, fraction)
            fv.deposit(values, grid.idx_VR, removed, dv)

            if aux:
                p_not = transport.apply(p_not, grid, h, where)
                removed_not = fv.remove_from_tail(p_not, grid.idx_VF, dv, fraction)
                p_spike = transport.apply(p_spike, grid, h, where)
                fv.remove_from_tail(p_spike, grid.idx_VF, dv, fraction)
                fv.deposit(p_spike, grid.idx_VR, removed, dv)
                p_bar = transport.apply(p_bar, grid, h, where)
                fv.deposit(p_bar, grid.idx_VR, removed, dv)
                fired_not += removed_not
                N_not = removed_not / h

            int_N += removed
            density = DensityField(grid, values)
            t_next = state.t + h
            if abs(t_next - target) <= 1e-12 * max(1.0, abs(target)):
                t_next = target
            state = TState(t_next, density, compute_N(density, params))
            steps += 1
            if steps > settings.max_steps:
                raise StepError(f"run exceeded {settings.max_steps} steps at t={state.t:.6g}")
        record(state)
        logger.debug("[T] t=%.6g N=%.6g steps=%d", state.t, state.N, steps)

    logger.info("[T] run end: t=%.6g steps=%d int_N=%.6g", state.t, steps, int_N)
    columns = [np.array(col) for col in zip(*rows)]
    aux_columns: list[Optional[np.ndarray]] = [np.array(col) for col in zip(*aux_rows)] if aux else [None] * 9
    bundle = None
    if aux:
        bundle = AuxiliaryBundle(DensityField(grid, p_not), DensityField(grid, p_spike), DensityField(grid, p_bar))
    return TTrajectory(
        params=params,
        t=columns[0], N=columns[1], int_N=columns[2], M=columns[3], mass=columns[4],
        mean=columns[5], second_moment=columns[6], l2=columns[7],
        not_excess=aux_columns[0], spike_excess=aux_columns[1], split_l1=aux_columns[2],
        mass_not=aux_columns[3], mass_spike=aux_columns[4], mass_bar=aux_columns[5],
        l2_bar=aux_columns[6], N_not=aux_columns[7], fired_not=aux_columns[8],
        snapshots=tuple(snapshots), final=state, auxiliaries=bundle, steps=steps,
    )


# ---------------------------------------------------------------------------
# Externally driven p_bar
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PbarResult:
    """p_bar samples under a given rate; int_N is the exact integral of the input."""
    rate: RateInput
    t: np.ndarray
    mass: np.ndarray
    l2: np.ndarray
    int_N: np.ndarray
    final: DensityField
    steps: int

    @property
    def growth_constant(self) -> float:
        """max_t ||p_bar(t)||^2 divided by int_0^T N."""
        total = float(self.int_N[-1])
        return math.nan if total <= 0 else float(self.l2.max()) / total


def run_pbar(
        params: ModelParams,
        grid: VoltageGrid,
        rate: RateInput,
        t_end: float,
        dt: Optional[float] = None,
        sample_every: Optional[float] = None,
        max_steps: int = MAX_STEPS,
) -> PbarResult:
    """
    Zero-data, no-absorption system with source N(t) delta_{V_R} for a given N.

    Each step deposits the exact integral of N over the step and drifts with
    N at the step midpoint.
    """
    if not t_end > 0:
        raise ParameterError(f"t_end must be positive, got {t_end}")
    every = sample_every if sample_every is not None else t_end / DEFAULT_SAMPLES
    values = zero_density(grid).values.copy()
    t = 0.0
    steps = 0
    samples = [(0.0, 0.0, 0.0, 0.0)]

    for target in _sample_times(0.0, t_end, every):
        while t < target:
            if dt is not None:
                h = dt
            else:
                h = CFL_SAFETY * fv.max_stable_step(grid, 1.0, params.b * float(rate(t)))
                h = min(h, CFL_SAFETY * fv.max_stable_step(grid, 1.0, params.b * float(rate(min(t + 0.5 * h, target)))))
            if h >= (target - t) * (1.0 - 1e-12):
                h = target - t
            n_mid = float(rate(t + 0.5 * h))
            where = f"t={t:.6g}"
            fv.check_cfl(grid, h, 1.0, params.b * n_mid, where)
            values = fv.Transport(scale=1.0, shift=params.b * n_mid, diffusion=params.a).apply(values, grid, h, where)
            fv.deposit(values, grid.idx_VR, rate.integral(t, t + h), grid.dv)
            t = target if abs(t + h - target) <= 1e-12 * max(1.0, target) else t + h
            steps += 1
            if steps > max_steps:
                raise StepError(f"p_bar run exceeded {max_steps} steps at t={t:.6g}")
        samples.append((t, float(values.sum() * grid.dv), _l2(values, grid.dv), rate.integral(0.0, t)))

    columns = [np.array(col) for col in zip(*samples)]
    logger.debug("[T] p_bar run: t_end=%.4g steps=%d mass=%.6g", t_end, steps, columns[1][-1])
    return PbarResult(rate, columns[0], columns[1], columns[2], columns[3], DensityField(grid, values), steps)


def pbar_l2_scaling(
        params: ModelParams,
        grid: VoltageGrid,
        rate: RateInput,
        t_end: float,
        scales: Sequence[float] = (1.0, 10.0, 100.0),
) -> dict[float, float]:
    """Growth constant of p_bar for the input rate multiplied by each scale."""
    return {scale: run_pbar(params, grid, rate.scaled(scale), t_end).growth_constant for scale in scales}


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FiringBound:
    """sup over windows of -t ln int_{t0}^{t0+t} N; finite when the rate never stalls."""
    value: float
    t0: float
    window: float

    @property
    def bounded(self) -> bool:
        return math.isfinite(self.value)


def firing_lower_bound(traj: TTrajectory, max_window: float = 0.5) -> FiringBound:
    """Evaluated on every pair of samples at most max_window apart."""
    if not 0 < max_window <= 0.5:
        raise ParameterError(f"max_window must lie in (0, 1/2], got {max_window}")
    t = traj.t
    cumulative = traj.int_N
    windows = t[None, :] - t[:, None]
    fired = cumulative[None, :] - cumulative[:, None]
    valid = (windows > 0) & (windows < max_window)
    if not valid.any():
        raise ParameterError("no sample pairs fit inside the window range")
    with np.errstate(divide="ignore", invalid="ignore"):
        values = np.where(valid, -windows * np.log(np.where(fired > 0, fired, 0.0)), -np.inf)
    i, j = np.unravel_index(int(np.argmax(values)), values.shape)
    return FiringBound(float(values[i, j]), float(t[i]), float(windows[i, j]))


@dataclass(frozen=True)
class RoundtripReport:
    """
    composition_error: sup over tau samples of |tau(t(tau)) - tau|.
    M_error: sup over t samples of |M_t(t) - M_tau(tau(t))|.
    rate_error: sup of |N(t) Q(tau(t)) - 1| past the first tenth of the range.
    """
    common_tau: float
    composition_error: float
    M_error: float
    rate_error: float

    @property
    def relative_composition_error(self) -> float:
        return self.composition_error / self.common_tau if self.common_tau > 0 else math.nan

    def to_metrics_dict(self) -> dict[str, str]:
        return {
            "common_tau": f"{self.common_tau:.6g}",
            "composition_error": f"{self.composition_error:.3e}",
            "relative_composition_error": f"{self.relative_composition_error:.3e}",
            "M_error": f"{self.M_error:.3e}",
            "rate_error": f"{self.rate_error:.3e}",
        }


def timescale_roundtrip(traj_t: TTrajectory, traj_tau: TauTrajectory) -> RoundtripReport:
    """
    Compare tau(t) = int N from the t run with t(tau) = int Q from the tau run.

    Both must come from the same parameters; values between samples are
    linear interpolations.
    """
    if traj_t.params != traj_tau.params:
        raise ParameterError(f"trajectories use different parameters: {traj_t.params} vs {traj_tau.params}")
    tau_of_t = traj_t.int_N - traj_t.int_N[0]
    t_of_tau = traj_tau.int_Q - traj_tau.int_Q[0]
    common = min(float(tau_of_t[-1]), float(traj_tau.tau[-1] - traj_tau.tau[0]))
    if not common > 0:
        raise ParameterError("trajectories share no dilated-time range")

    tau_rel = traj_tau.tau - traj_tau.tau[0]
    keep = (tau_rel <= common) & (t_of_tau <= traj_t.t[-1])
    composed = np.interp(t_of_tau[keep], traj_t.t, tau_of_t)
    composition = float(np.max(np.abs(composed - tau_rel[keep])))

    in_range = tau_of_t <= common
    M_tau = np.interp(tau_of_t[in_range], tau_rel, traj_tau.M)
    M_error = float(np.max(np.abs(traj_t.M[in_range] - M_tau)))

    late = in_range & (tau_of_t >= 0.1 * common)
    if late.any():
        Q_matched = np.interp(tau_of_t[late], tau_rel, traj_tau.Q)
        rate_error = float(np.max(np.abs(traj_t.N[late] * Q_matched - 1.0)))
    else:
        rate_error = math.nan
    logger.info("[T] roundtrip over tau<=%.4g: composition %.3e, M %.3e, rate %.3e", common, composition, M_error, rate_error)
    return RoundtripReport(common, composition, M_error, rate_error)
