"""
eps-sweeps and blow-up chaining on top of the tau solver.

eps_sweep runs one tau solver per eps concurrently (asyncio tasks, each
solver in a worker thread behind a semaphore), then assembles a SweepReport:

- sup-norm differences of M between consecutive eps (Cauchy indicator);
- per member, a timeline of blow-up (M above threshold) and classical
  segments, the largest Q on blow-up segments, the median concentration of the
  discharge measure near V_F on classical segments, the worst relative
  deviation of Q*M from eps, and the second-moment / L2 suprema.

chain_blowups alternates the tau solver with the blow-up analytics and
returns the event list.
"""
from __future__ import annotations

import asyncio
import math
from dataclasses import dataclass, field
from enum import Enum
from logging import getLogger
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from config import (CHAIN_MAX_EVENTS, CHAIN_MAX_STALLS, DEFAULT_THREADS, IBL_THRESHOLD_FACTOR,
                    IBL_THRESHOLD_MIN)
from lib.blowup import BlowupEvent, BlowupKind, analyze_state, dirichlet_loss_check
from lib.errors import LabError, ParameterError, SegmentDetectionError, SweepMemberError
from lib.model import DensityField, ModelParams
from lib.solver_tau import TauSettings, TauState, TauTrajectory, run_tau

logger = getLogger(__name__)


def blowup_threshold(eps: float) -> float:
    return max(IBL_THRESHOLD_FACTOR * eps, IBL_THRESHOLD_MIN)


# ---------------------------------------------------------------------------
# Segments
# ---------------------------------------------------------------------------

class SegmentKind(str, Enum):
    BLOWUP = "I_bl"
    CLASSICAL = "I_cl"


@dataclass(frozen=True)
class Segment:
    """Half-open [start, end); the last segment of a run also owns its end point."""
    kind: SegmentKind
    start: float
    end: float

    @property
    def length(self) -> float:
        return self.end - self.start


def segments(tau: np.ndarray, M: np.ndarray, threshold: float) -> list[Segment]:
    """
    Split a sampled run by M > threshold.

    A segment starts at the first sample of its kind and ends at the first
    sample of the next kind, so the segments partition [tau[0], tau[-1]].
    """
    if tau.size == 0:
        return []
    above = M > threshold
    out: list[Segment] = []
    start = 0
    for k in range(1, tau.size):
        if above[k] != above[start]:
            out.append(Segment(SegmentKind.BLOWUP if above[start] else SegmentKind.CLASSICAL, float(tau[start]), float(tau[k])))
            start = k
    out.append(Segment(SegmentKind.BLOWUP if above[start] else SegmentKind.CLASSICAL, float(tau[start]), float(tau[-1])))
    return out


# ---------------------------------------------------------------------------
# Sweep
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MemberSummary:
    eps: float
    threshold: float
    segments: tuple[Segment, ...]
    max_Q_blowup: float
    s_concentration: float
    qm_error: float
    sup_second_moment: float
    sup_l2: float
    lifespan: float
    steps: int

    @property
    def all_blowup(self) -> bool:
        return all(s.kind == SegmentKind.BLOWUP for s in self.segments)

    @property
    def all_classical(self) -> bool:
        return all(s.kind == SegmentKind.CLASSICAL for s in self.segments)

    def to_metrics_dict(self) -> dict[str, str]:
        return {
            "eps": f"{self.eps:.3g}",
            "segments": " ".join(f"{s.kind.value}[{s.start:.4g},{s.end:.4g})" for s in self.segments),
            "max_Q_blowup": f"{self.max_Q_blowup:.6g}",
            "s_concentration": f"{self.s_concentration:.6g}",
            "qm_error": f"{self.qm_error:.3e}",
            "sup_second_moment": f"{self.sup_second_moment:.6g}",
            "sup_l2": f"{self.sup_l2:.6g}",
            "lifespan": f"{self.lifespan:.6g}",
            "steps": str(self.steps),
        }


def summarize_member(traj: TauTrajectory, eps: float) -> MemberSummary:
    threshold = blowup_threshold(eps)
    above = traj.M > threshold
    unflagged = ~traj.flagged
    with np.errstate(invalid="ignore"):
        qm = np.abs(traj.Q[unflagged] * traj.M[unflagged] - eps) / eps
    classical = ~above & unflagged & np.isfinite(traj.s_concentration)
    return MemberSummary(
        eps=eps,
        threshold=threshold,
        segments=tuple(segments(traj.tau, traj.M, threshold)),
        max_Q_blowup=float(traj.Q[above].max()) if above.any() else math.nan,
        s_concentration=float(np.median(traj.s_concentration[classical])) if classical.any() else math.nan,
        qm_error=float(qm.max()) if qm.size else math.nan,
        sup_second_moment=float(traj.second_moment.max()),
        sup_l2=float(traj.l2.max()),
        lifespan=float(traj.int_Q[-1] - traj.int_Q[0]),
        steps=traj.steps,
    )


@dataclass(frozen=True, eq=False)
class SweepReport:
    """
    cauchy[k] is sup_tau |M_{eps_k} - M_{eps_k+1}| over the shared samples;
    M_spread is the across-eps range of M at each shared sample.
    """
    eps_list: tuple[float, ...]
    members: tuple[MemberSummary, ...]
    trajectories: tuple[TauTrajectory, ...]
    tau: np.ndarray
    cauchy: tuple[float, ...]
    M_spread: np.ndarray

    @property
    def cauchy_decreasing(self) -> bool:
        return all(later <= earlier for earlier, later in zip(self.cauchy, self.cauchy[1:]))

    @property
    def bound_spread(self) -> float:
        """max/min across members of the sup second moment, or of the sup L2 norm if that is wider."""
        second = [m.sup_second_moment for m in self.members]
        l2 = [m.sup_l2 for m in self.members]
        return float(max(max(second) / min(second), max(l2) / min(l2)))

    def to_metrics_dict(self) -> dict[str, str]:
        out = {
            "eps_list": " ".join(f"{e:.3g}" for e in self.eps_list),
            "cauchy": " ".join(f"{c:.4e}" for c in self.cauchy),
            "cauchy_decreasing": str(self.cauchy_decreasing),
            "bound_spread": f"{self.bound_spread:.4g}",
            "segments": "half-open [start, end); the final segment includes tau_end",
        }
        for m in self.members:
            for key, value in m.to_metrics_dict().items():
                if key != "eps":
                    out[f"eps={m.eps:.3g}.{key}"] = value
        return out

    def write(self, directory: Path) -> list[Path]:
        from helpers.csv_export import write_columns, write_rows, write_summary
        directory.mkdir(parents=True, exist_ok=True)
        written: list[Path] = []
        for eps, traj in zip(self.eps_list, self.trajectories):
            written.append(traj.to_csv(directory / f"trajectory_eps_{eps:.3g}.csv"))
            written.append(traj.diagnostics_to_csv(directory / f"diagnostics_eps_{eps:.3g}.csv"))
        written.append(write_columns(directory / "M_spread.csv", {"tau": self.tau, "M_spread": self.M_spread}))
        written.append(write_rows(
            directory / "segments.csv", ["eps", "kind", "start", "end"],
            ((m.eps, s.kind.value, s.start, s.end) for m in self.members for s in m.segments),
        ))
        written.append(write_summary(directory / "summary.txt", "eps sweep", self.to_metrics_dict()))
        return written


def _check_eps_list(eps_list: Sequence[float]) -> tuple[float, ...]:
    eps = tuple(float(e) for e in eps_list)
    if len(eps) < 2:
        raise ParameterError(f"a sweep needs at least two eps values, got {len(eps)}")
    if any(e <= 0 for e in eps) or any(b >= a for a, b in zip(eps, eps[1:])):
        raise ParameterError(f"eps list must be positive and strictly decreasing, got {eps}")
    return eps


async def eps_sweep_async(
        params: ModelParams,
        init: DensityField,
        eps_list: Sequence[float],
        tau_end: float,
        dtau: Optional[float] = None,
        sample_every: Optional[float] = None,
        settings: TauSettings = TauSettings(),
        threads: int = DEFAULT_THREADS,
) -> SweepReport:
    eps_values = _check_eps_list(eps_list)
    gate = asyncio.Semaphore(max(1, threads))

    async def member(eps: float) -> TauTrajectory:
        async with gate:
            logger.info("[SWEEP] eps=%.3g started", eps)
            try:
                traj = await asyncio.to_thread(run_tau, params.with_eps(eps), init, tau_end, dtau, sample_every, settings)
            except LabError as exc:
                logger.error("[SWEEP] eps=%.3g failed: %s", eps, exc)
                raise SweepMemberError(eps, exc) from exc
            logger.info("[SWEEP] eps=%.3g done in %d steps", eps, traj.steps)
            return traj

    trajectories = tuple(await asyncio.gather(*(member(eps) for eps in eps_values)))
    return _assemble(eps_values, trajectories)


def eps_sweep(
        params: ModelParams,
        init: DensityField,
        eps_list: Sequence[float],
        tau_end: float,
        dtau: Optional[float] = None,
        sample_every: Optional[float] = None,
        settings: TauSettings = TauSettings(),
        threads: int = DEFAULT_THREADS,
) -> SweepReport:
    return asyncio.run(eps_sweep_async(params, init, eps_list, tau_end, dtau, sample_every, settings, threads))


def _assemble(eps_values: tuple[float, ...], trajectories: tuple[TauTrajectory, ...]) -> SweepReport:
    length = min(len(t) for t in trajectories)
    tau = trajectories[0].tau[:length]
    Ms = np.array([t.M[:length] for t in trajectories])
    cauchy = tuple(float(np.max(np.abs(Ms[k] - Ms[k + 1]))) for k in range(len(trajectories) - 1))
    members = tuple(summarize_member(t, e) for t, e in zip(trajectories, eps_values))
    for m in members:
        logger.info("[SWEEP] eps=%.3g: %d segments, max Q on I_bl %.4g, S concentration %.4g",
                    m.eps, len(m.segments), m.max_Q_blowup, m.s_concentration)
    return SweepReport(eps_values, members, trajectories, tau, cauchy, Ms.max(axis=0) - Ms.min(axis=0))


# ---------------------------------------------------------------------------
# Blow-up chaining
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ChainResult:
    """
    Events found along one run. lifespan sums int Q over the solver segments;
    blow-up intervals add nothing to the original time.
    """
    events: tuple[BlowupEvent, ...]
    lifespan: float
    tau_reached: float
    trajectories: tuple[TauTrajectory, ...] = field(default=())
    stalls: int = 0

    @property
    def ended_eternal(self) -> bool:
        return bool(self.events) and self.events[-1].classification == BlowupKind.ETERNAL

    def to_csv(self, path: Path) -> Path:
        from lib.blowup import events_to_csv
        return events_to_csv(self.events, path)


def _dirichlet_deltas(density: DensityField) -> list[float]:
    dv = density.grid.dv
    return [dv, 2.0 * dv, 4.0 * dv]


def chain_blowups(
        init: DensityField,
        params: ModelParams,
        tau_end: float,
        eps: Optional[float] = None,
        sample_every: Optional[float] = None,
        settings: TauSettings = TauSettings(),
) -> ChainResult:
    """
    Run the tau solver at eps until M rises above the blow-up threshold, hand
    the profile to the blow-up analytics, restart from the post profile at
    tau1 + delta and repeat until tau_end or an eternal event.

    A crossing whose below-threshold profile fails the Dirichlet-loss check is
    not treated as a blow-up: the solver continues until M falls back below
    the threshold. Raises SegmentDetectionError with the current state after
    CHAIN_MAX_STALLS such crossings or CHAIN_MAX_EVENTS events.
    """
    eps = eps if eps is not None else params.require_eps()
    run_params = params.with_eps(eps)
    threshold = blowup_threshold(eps)
    every = sample_every if sample_every is not None else tau_end / 200.0

    events: list[BlowupEvent] = []
    trajectories: list[TauTrajectory] = []
    lifespan = 0.0
    stalls = 0
    tau = 0.0
    density = init

    if params.b <= 0:
        traj = run_tau(run_params, init, tau_end, sample_every=every, settings=settings)
        logger.info("[CHAIN] b=%.4g <= 0: no blow-up analytics", params.b)
        return ChainResult((), float(traj.int_Q[-1]), float(traj.tau[-1]), (traj,))

    def solve(start: DensityField, tau_start: float, stop) -> TauTrajectory:
        nonlocal lifespan
        traj = run_tau(run_params, start, tau_end, sample_every=every, settings=settings,
                       stop_when=stop, tau_start=tau_start)
        trajectories.append(traj)
        lifespan += float(traj.int_Q[-1] - traj.int_Q[0])
        return traj

    while tau < tau_end:
        if density.tail_mass <= threshold:
            traj = solve(density, tau, lambda s: s.density.tail_mass > threshold)
            state: TauState = traj.final
            tau, density = state.tau, state.density
            if not traj.stopped_early:
                break

        report = dirichlet_loss_check(density.below_threshold(), params, _dirichlet_deltas(density))
        if not report.passed and tau > 0:
            stalls += 1
            logger.info("[CHAIN] crossing at tau=%.6g fails the Dirichlet-loss check (ratios %s)",
                        tau, ", ".join(f"{r:.3g}" for r in report.ratios))
            if stalls > CHAIN_MAX_STALLS:
                raise SegmentDetectionError(f"{stalls} crossings without a blow-up start by tau={tau:.6g}", state=density)
            traj = solve(density, tau, lambda s: s.density.tail_mass <= threshold)
            tau, density = traj.final.tau, traj.final.density
            continue

        event = analyze_state(density, params, tau)
        events.append(event)
        if len(events) > CHAIN_MAX_EVENTS:
            raise SegmentDetectionError(f"more than {CHAIN_MAX_EVENTS} blow-up events by tau={tau:.6g}", state=density)
        if event.classification == BlowupKind.ETERNAL:
            logger.info("[CHAIN] eternal blow-up from tau=%.6g", tau)
            tau = math.inf
            break
        tau = event.tau2
        density = event.n_post
        logger.info("[CHAIN] event %d: [%.6g, %.6g]", len(events), event.tau1, event.tau2)

    return ChainResult(tuple(events), lifespan, min(tau, tau_end) if math.isfinite(tau) else tau_end,
                       tuple(trajectories), stalls)


# ---------------------------------------------------------------------------
# Blow-up interval seen by a finite-eps run
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MeasuredInterval:
    tau1: float
    delta: float


def measure_blowup_interval(traj: TauTrajectory, threshold: float) -> MeasuredInterval:
    """
    First interval where M exceeds threshold, with both ends moved to where
    the local linear trend of M reaches zero. delta is inf if M never drops
    back below threshold.
    """
    above = np.flatnonzero(traj.M > threshold)
    if above.size == 0:
        raise ParameterError("M never exceeds the threshold")
    first = int(above[0])
    gaps = np.flatnonzero(np.diff(above) > 1)
    last = int(above[gaps[0]]) if gaps.size else int(above[-1])
    tau, M = traj.tau, traj.M

    def zero_crossing(i: int, j: int) -> float:
        slope = (M[j] - M[i]) / (tau[j] - tau[i])
        return float(tau[i] - M[i] / slope) if slope != 0 else float(tau[i])

    start = zero_crossing(first, first + 1) if first + 1 < tau.size else float(tau[first])
    start = max(start, float(tau[max(first - 1, 0)]))
    if last == tau.size - 1:
        return MeasuredInterval(start, math.inf)
    end = zero_crossing(last - 1, last) if last > first else float(tau[last + 1])
    end = min(end, float(tau[last + 1]))
    return MeasuredInterval(start, end - start)
