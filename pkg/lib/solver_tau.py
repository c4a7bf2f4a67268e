"""
Dilated-timescale solver for the random-discharge system.

    d_tau n + d_v[(-v Q + b) n] - a Q d_vv n = delta_{V_R} - (Q/eps) 1_{v>=V_F} n,
    Q = eps / M,  M = int_{V_F}^inf n

Each step advects with the lagged Q, diffuses implicitly, removes mass from
the super-threshold cells and deposits exactly the removed mass at V_R, so
mass is conserved to round-off. The removal is the exact per-cell
exponential exp(-Q dtau/eps), rescaled to exactly dtau whenever the tail
holds at least dtau: that is the unit-mass discharge measure S = n 1/M.

Limit mode (q_override) freezes Q to a given value: the source deposits
exactly dtau and the discharge removes min(dtau, M) in proportion to the
tail. With q_override=0 this is the eps-free blow-up dynamics.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from logging import getLogger
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from config import (CFL_SAFETY, DEFAULT_SAMPLES, M_FLOOR, MAX_STEPS, PICARD_MAX_ITER, PICARD_TOL,
                    S_WINDOW_FACTOR)
from lib import fv_scheme as fv
from lib.errors import ParameterError, StepError
from lib.model import DensityField, ModelParams, moments, normalized

logger = getLogger(__name__)


# ---------------------------------------------------------------------------
# State
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TauState:
    """
    Solver state at one dilated time.

    flagged is set while the tail mass is below M_FLOOR and Q is capped.
    """
    tau: float
    density: DensityField
    Q: float
    flagged: bool = False

    @property
    def S_profile(self) -> Optional[DensityField]:
        """Discharge measure n 1_{v>=V_F} / M, or None while the tail is empty."""
        grid = self.density.grid
        tail = self.density.tail_mass
        if tail <= 0:
            return None
        values = np.zeros(grid.n_cells)
        values[grid.idx_VF:] = self.density.values[grid.idx_VF:] / tail
        return DensityField(grid, values)


def compute_Q(d: DensityField, params: ModelParams) -> float:
    """eps / M, capped at eps / M_FLOOR when the tail is empty."""
    eps = params.require_eps()
    tail = d.tail_mass
    if tail <= M_FLOOR:
        logger.debug("[TAU] tail mass %.3e below floor, Q capped at eps/M_FLOOR", tail)
        return eps / M_FLOOR
    return eps / tail


def initial_state(init: DensityField, params: ModelParams, q_override: Optional[float] = None, tau: float = 0.0) -> TauState:
    if q_override is not None:
        return TauState(tau, init, float(q_override))
    tail = init.tail_mass
    flagged = tail <= M_FLOOR
    if flagged:
        logger.info("[TAU] initial tail mass %.3e: Q capped and state flagged", tail)
    return TauState(tau, init, compute_Q(init, params), flagged)


# ---------------------------------------------------------------------------
# Stepping
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TauSettings:
    """Knobs for run_tau. s_window defaults to S_WINDOW_FACTOR*sqrt(a*eps)."""
    picard: bool = False
    q_override: Optional[float] = None
    keep_snapshots: bool = False
    s_window: Optional[float] = None
    max_steps: int = MAX_STEPS

    def window(self, params: ModelParams) -> float:
        if self.s_window is not None:
            return self.s_window
        return S_WINDOW_FACTOR * math.sqrt(params.a * params.require_eps())


@dataclass(frozen=True)
class _StepOutcome:
    state: TauState
    q_used: float
    removed: float


def _advance(values: np.ndarray, state: TauState, Q: float, dtau: float, params: ModelParams,
             q_override: Optional[float]) -> tuple[np.ndarray, float, float]:
    """One split step with Q frozen. Returns (values, removed, deposited)."""
    grid = state.density.grid
    fv.check_cfl(grid, dtau, Q, params.b, f"tau={state.tau:.6g}")
    out = fv.Transport(scale=Q, shift=params.b, diffusion=params.a * Q).apply(values, grid, dtau, f"tau={state.tau:.6g}")

    tail = fv.tail_sum(out, grid.idx_VF, grid.dv)
    if q_override is not None:
        removed = fv.remove_from_tail(out, grid.idx_VF, grid.dv, min(dtau, tail) / tail) if tail > 0 else 0.0
        deposited = dtau
    else:
        if tail >= dtau:
            fraction = dtau / tail
        else:
            fraction = -math.expm1(-Q * dtau / params.require_eps())
        removed = fv.remove_from_tail(out, grid.idx_VF, grid.dv, fraction) if tail > 0 else 0.0
        deposited = removed
    fv.deposit(out, grid.idx_VR, deposited, grid.dv)
    return out, removed, deposited


def _step(state: TauState, dtau: float, params: ModelParams, settings: TauSettings) -> _StepOutcome:
    values = np.array(state.density.values)
    Q = state.Q
    out, removed, _ = _advance(values, state, Q, dtau, params, settings.q_override)

    if settings.picard and settings.q_override is None:
        for _ in range(PICARD_MAX_ITER):
            Q_next = compute_Q(DensityField(state.density.grid, out), params)
            if abs(Q_next - Q) <= PICARD_TOL * max(Q, Q_next):
                break
            Q = Q_next
            out, removed, _ = _advance(values, state, Q, dtau, params, None)
        else:
            logger.debug("[TAU] Picard iteration did not converge at tau=%.6g", state.tau)

    density = DensityField(state.density.grid, out)
    if settings.q_override is not None:
        new_state = TauState(state.tau + dtau, density, settings.q_override)
    else:
        tail = density.tail_mass
        new_state = TauState(state.tau + dtau, density, compute_Q(density, params), tail <= M_FLOOR)
        if state.flagged and not new_state.flagged:
            logger.debug("[TAU] tail flag cleared at tau=%.6g (M=%.3e)", new_state.tau, tail)
    return _StepOutcome(new_state, Q, removed)


def step_tau(state: TauState, dtau: float, params: ModelParams, settings: TauSettings = TauSettings()) -> TauState:
    """
    One IMEX step of length dtau.

    Raises StepError when dtau exceeds dv/(|b| + Q max|v|) and SchemeError if a
    cell turns negative.
    """
    return _step(state, dtau, params, settings).state


def adaptive_dtau(state: TauState, params: ModelParams) -> float:
    return CFL_SAFETY * fv.max_stable_step(state.density.grid, state.Q, params.b)


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TauTrajectory:
    """
    Sampled run of the tau solver.

    int_Q is the step-by-step sum of Q*dtau with the Q actually used, i.e. the
    elapsed original time t(tau). The weak residuals compare int psi n against
    the time-integrated right-hand side of the weak form for psi = 1, v, v^2.
    """
    params: ModelParams
    tau: np.ndarray
    Q: np.ndarray
    int_Q: np.ndarray
    M: np.ndarray
    mass: Optional[np.ndarray] = None
    mean: Optional[np.ndarray] = None
    second_moment: Optional[np.ndarray] = None
    l2: Optional[np.ndarray] = None
    tail_second_moment: Optional[np.ndarray] = None
    tightness: Optional[np.ndarray] = None
    s_concentration: Optional[np.ndarray] = None
    weak_residual_mass: Optional[np.ndarray] = None
    weak_residual_mean: Optional[np.ndarray] = None
    weak_residual_second: Optional[np.ndarray] = None
    flagged: Optional[np.ndarray] = None
    min_density: Optional[np.ndarray] = None
    snapshots: tuple[DensityField, ...] = ()
    final: Optional[TauState] = None
    steps: int = 0
    stopped_early: bool = False

    def __len__(self) -> int:
        return int(self.tau.size)

    @property
    def qm_product(self) -> np.ndarray:
        return self.Q * self.M

    def to_csv(self, path: Path) -> Path:
        from helpers.csv_export import write_columns
        columns = {
            "tau": self.tau, "Q": self.Q, "mass": self.mass, "mean": self.mean,
            "second_moment": self.second_moment, "l2": self.l2, "M": self.M, "int_Q": self.int_Q,
        }
        return write_columns(path, columns)

    def diagnostics_to_csv(self, path: Path) -> Path:
        from helpers.csv_export import write_columns
        columns = {
            "tau": self.tau,
            "tail_second_moment": self.tail_second_moment,
            "tightness": self.tightness,
            "s_concentration": self.s_concentration,
            "weak_residual_mass": self.weak_residual_mass,
            "weak_residual_mean": self.weak_residual_mean,
            "weak_residual_second": self.weak_residual_second,
            "flagged": None if self.flagged is None else self.flagged.astype(float),
        }
        return write_columns(path, columns)


def _weak_rhs(values: np.ndarray, state: TauState, params: ModelParams, sink_rate: float) -> np.ndarray:
    """Right-hand side of d/dtau int psi n for psi = 1, v, v^2. sink_rate multiplies the tail integrals."""
    grid = state.density.grid
    v = grid.centers
    dv = grid.dv
    Q = state.Q
    mass = values.sum() * dv
    first = (v * values).sum() * dv
    second = (v * v * values).sum() * dv
    tail_v = v[grid.idx_VF:]
    tail_n = values[grid.idx_VF:]
    sink = sink_rate * dv * np.array([tail_n.sum(), (tail_v * tail_n).sum(), (tail_v * tail_v * tail_n).sum()])
    return np.array([
        1.0,
        params.b * mass - Q * first + params.V_R,
        2.0 * params.b * first - 2.0 * Q * second + 2.0 * params.a * Q * mass + params.V_R ** 2,
    ]) - sink


def _psi_integrals(values: np.ndarray, v: np.ndarray, dv: float) -> np.ndarray:
    return np.array([values.sum(), (v * values).sum(), (v * v * values).sum()]) * dv


def _concentration(values: np.ndarray, idx_VF: int, dv: float, window: float) -> float:
    """Share of the tail mass within [V_F, V_F + window], partial last cell included."""
    tail = values[idx_VF:]
    total = tail.sum()
    if total <= 0:
        return float("nan")
    full = int(window // dv)
    inside = tail[:full].sum()
    if full < tail.size:
        inside += tail[full] * (window - full * dv) / dv
    return float(min(inside / total, 1.0))


def run_tau(
        params: ModelParams,
        init: DensityField,
        tau_end: float,
        dtau: Optional[float] = None,
        sample_every: Optional[float] = None,
        settings: TauSettings = TauSettings(),
        stop_when: Optional[Callable[[TauState], bool]] = None,
        tau_start: float = 0.0,
) -> TauTrajectory:
    """
    Integrate from tau_start to tau_end, sampling every sample_every.

    dtau=None steps adaptively at CFL_SAFETY times the CFL limit of the
    current Q. Steps are shortened to land on sample times. stop_when is
    checked at every sample and ends the run early when it returns True.
    """
    eps = params.require_eps()
    if not tau_end > tau_start:
        raise ParameterError(f"tau_end must exceed tau_start, got {tau_start} .. {tau_end}")
    if dtau is not None and not dtau > 0:
        raise ParameterError(f"dtau must be positive, got {dtau}")
    span = tau_end - tau_start
    every = sample_every if sample_every is not None else span / DEFAULT_SAMPLES
    if not every > 0:
        raise ParameterError(f"sample_every must be positive, got {every}")

    init = normalized(init) if settings.q_override is None else init
    grid = init.grid
    v = grid.centers
    window = settings.window(params) if settings.q_override is None else 0.0
    state = initial_state(init, params, settings.q_override, tau_start)

    psi_start = _psi_integrals(np.asarray(init.values), v, grid.dv)
    rhs_integral = np.zeros(3)
    int_Q = 0.0
    tightness = 0.0
    rows: list[tuple] = []
    snapshots: list[DensityField] = []

    def record(s: TauState) -> None:
        values = np.asarray(s.density.values)
        m = moments(s.density, params)
        residual = np.abs(_psi_integrals(values, v, grid.dv) - psi_start - rhs_integral)
        rows.append((
            s.tau, s.Q, int_Q, m.tail_mass_M, m.mass, m.mean, m.second_moment, m.l2,
            m.tail_second_moment, tightness,
            _concentration(values, grid.idx_VF, grid.dv, window) if window > 0 else float("nan"),
            residual[0], residual[1], residual[2], s.flagged, float(values.min()),
        ))
        if settings.keep_snapshots:
            snapshots.append(s.density)

    record(state)
    logger.info("[TAU] run start: eps=%.3g b=%.4g tau_end=%.4g cells=%d", eps, params.b, tau_end, grid.n_cells)

    n_samples = max(1, int(math.ceil(span / every - 1e-9)))
    sample_times = [min(tau_start + k * every, tau_end) for k in range(1, n_samples + 1)]
    sample_times[-1] = tau_end
    steps = 0
    stopped = False

    for target in sample_times:
        while state.tau < target:
            h = dtau if dtau is not None else adaptive_dtau(state, params)
            remaining = target - state.tau
            if h >= remaining * (1.0 - 1e-12):
                h = remaining
            values = np.asarray(state.density.values)
            tail = fv.tail_sum(values, grid.idx_VF, grid.dv)
            if settings.q_override is None:
                sink_rate = state.Q / eps
            else:
                sink_rate = 1.0 / tail if tail > 0 else 0.0
            rhs = _weak_rhs(values, state, params, sink_rate)

            outcome = _step(state, h, params, settings)
            rhs_integral += h * rhs
            int_Q += outcome.q_used * h
            if tail > 0:
                tail_v = v[grid.idx_VF:] - params.V_F
                tightness += h * float((tail_v * tail_v * values[grid.idx_VF:]).sum() * grid.dv) / tail

            state = outcome.state
            if abs(state.tau - target) <= 1e-12 * max(1.0, abs(target)):
                state = TauState(target, state.density, state.Q, state.flagged)
            steps += 1
            if steps > settings.max_steps:
                raise StepError(f"run exceeded {settings.max_steps} steps at tau={state.tau:.6g}")
        record(state)
        logger.debug("[TAU] tau=%.6g Q=%.6g M=%.6g steps=%d", state.tau, state.Q, state.density.tail_mass, steps)
        if stop_when is not None and stop_when(state):
            stopped = True
            break

    logger.info("[TAU] run end: tau=%.6g steps=%d int_Q=%.6g", state.tau, steps, int_Q)
    columns = [np.array(col) for col in zip(*rows)]
    return TauTrajectory(
        params=params,
        tau=columns[0],
        Q=columns[1],
        int_Q=columns[2],
        M=columns[3],
        mass=columns[4],
        mean=columns[5],
        second_moment=columns[6],
        l2=columns[7],
        tail_second_moment=columns[8],
        tightness=columns[9],
        s_concentration=columns[10],
        weak_residual_mass=columns[11],
        weak_residual_mean=columns[12],
        weak_residual_second=columns[13],
        flagged=columns[14].astype(bool),
        min_density=columns[15],
        snapshots=tuple(snapshots),
        final=state,
        steps=steps,
        stopped_early=stopped,
    )


# ---------------------------------------------------------------------------
# Q diagnostics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QDiagnostics:
    delta: float
    lifespan_estimate: float
    q_modulus: float

    @property
    def scaled_modulus(self) -> float:
        """q_modulus * |ln delta|, bounded for the refined modulus."""
        return self.q_modulus * abs(math.log(self.delta))

    def to_metrics_dict(self) -> dict[str, str]:
        return {
            "delta": f"{self.delta:.6g}",
            "lifespan_estimate": f"{self.lifespan_estimate:.6g}",
            "q_modulus": f"{self.q_modulus:.6g}",
            "scaled_modulus": f"{self.scaled_modulus:.6g}",
        }


def q_diagnostics(traj: TauTrajectory, delta: float) -> QDiagnostics:
    """
    Lifespan int_0^tau_end Q and the sup over window starts of int_tau^{tau+delta} Q.

    Window integrals interpolate the cumulative int_Q linearly between samples.
    """
    if len(traj) == 0:
        raise ParameterError("empty trajectory")
    if not 0 < delta <= 0.5:
        raise ParameterError(f"delta must lie in (0, 1/2], got {delta}")
    tau = traj.tau
    cumulative = traj.int_Q
    lifespan = float(cumulative[-1] - cumulative[0])

    starts = tau[tau + delta <= tau[-1] + 1e-12]
    if starts.size == 0:
        modulus = lifespan
    else:
        ends = np.interp(np.minimum(starts + delta, tau[-1]), tau, cumulative)
        modulus = float(np.max(ends - np.interp(starts, tau, cumulative)))
    return QDiagnostics(delta, lifespan, modulus)


@dataclass(frozen=True)
class LifespanTrend:
    slope: float
    intercept: float

    @property
    def growing(self) -> bool:
        return self.slope > 0


def lifespan_trend(traj: TauTrajectory, fraction: float = 0.5) -> LifespanTrend:
    """Least-squares line through int_Q over the last `fraction` of the run."""
    if not 0 < fraction <= 1:
        raise ParameterError(f"fraction must lie in (0, 1], got {fraction}")
    cut = traj.tau[0] + (1.0 - fraction) * (traj.tau[-1] - traj.tau[0])
    mask = traj.tau >= cut
    if mask.sum() < 2:
        raise ParameterError("need at least two samples for a trend")
    slope, intercept = np.polyfit(traj.tau[mask], traj.int_Q[mask], 1)
    return LifespanTrend(float(slope), float(intercept))
