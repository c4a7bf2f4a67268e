"""
Blow-up analytics for the eps-free dilated dynamics.

During a blow-up interval the firing rate is infinite, Q = 0, and the
below-threshold density is carried rigidly to the right at speed b while the
reset source lays a ramp of height 1/b from V_R. The super-threshold mass is
then a pure function of the pre-blow-up profile:

    M(tau1 + delta) = M0 + F(V_F - b delta) - min(delta, (V_F - V_R)/b),
    F(x) = int_x^{V_F} n_pre

and the interval ends at the first positive zero of that curve (or never).
M0 is the super-threshold mass already present at tau1; it is zero for a
genuine pre-blow-up profile.

n_pre lives on a grid and is piecewise constant, so F is piecewise linear
with kinks at the interfaces. A scan with step dv/b visits every kink, and
the root on the bracketing linear piece is exact.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from logging import getLogger
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from config import BLOWUP_M_TOL, BLOWUP_MASS_TOL, BLOWUP_ROOT_TOL, DIRICHLET_TOL
from lib.errors import ConsistencyError, ParameterError, PreconditionError
from lib.model import DensityField, ModelParams

logger = getLogger(__name__)


class BlowupKind(str, Enum):
    FINITE = "finite"
    ETERNAL = "eternal"


@dataclass(frozen=True, eq=False)
class BlowupEvent:
    """
    One blow-up interval [tau1, tau1 + delta_tau].

    n_pre is the below-threshold part of the profile at tau1; offset is the
    super-threshold mass at tau1. n_post is None for eternal events.
    """
    tau1: float
    n_pre: DensityField
    delta_tau: float
    n_post: Optional[DensityField]
    classification: BlowupKind
    offset: float = 0.0

    @property
    def tau2(self) -> float:
        return self.tau1 + self.delta_tau

    @property
    def post_mass(self) -> float:
        return math.nan if self.n_post is None else self.n_post.mass

    @property
    def trivial(self) -> bool:
        """No super-threshold mass ever builds up."""
        return self.delta_tau == 0.0

    def to_row(self) -> tuple:
        return self.tau1, self.delta_tau, self.classification.value, self.post_mass


def events_to_csv(events: Iterable[BlowupEvent], path: Path) -> Path:
    from helpers.csv_export import write_rows
    return write_rows(path, ["tau1", "delta_tau", "classification", "post_mass"], (e.to_row() for e in events))


# ---------------------------------------------------------------------------
# M curve
# ---------------------------------------------------------------------------

def _require_pre_profile(n_pre: DensityField) -> None:
    if n_pre.tail_mass > BLOWUP_M_TOL:
        raise PreconditionError(f"pre-blow-up profile has super-threshold mass {n_pre.tail_mass:.3e}")


def _require_b(params: ModelParams) -> None:
    if not params.b > 0:
        raise ParameterError(f"blow-up analytics need b > 0, got b={params.b}")


def _mass_above(n_pre: DensityField, x: np.ndarray) -> np.ndarray:
    """F(x) = int_x^{V_F} n_pre, piecewise linear between interfaces."""
    grid = n_pre.grid
    below = n_pre.values[:grid.idx_VF]
    edges = grid.interfaces[:grid.idx_VF + 1]
    from_right = np.concatenate((np.cumsum(below[::-1])[::-1], [0.0])) * grid.dv
    return np.interp(x, edges, from_right, left=from_right[0], right=0.0)


def m_of_delta(n_pre: DensityField, delta, params: ModelParams, offset: float = 0.0):
    """
    Super-threshold mass a time delta into the blow-up interval.

    Accepts a scalar or an array of deltas; offset is the mass already above
    V_F at the start.
    """
    _require_pre_profile(n_pre)
    _require_b(params)
    d = np.asarray(delta, dtype=float)
    if np.any(d < 0):
        raise ParameterError("delta must be nonnegative")
    value = offset + _mass_above(n_pre, params.V_F - params.b * d) - np.minimum(d, params.gap / params.b)
    return float(value) if np.ndim(value) == 0 else value


def blowup_interval(n_pre: DensityField, params: ModelParams, offset: float = 0.0) -> float:
    """
    Infimum of the positive zeros of m_of_delta.

    0 when m does not rise above BLOWUP_M_TOL right after the start, +inf when
    m stays positive up to (V_F - V_R)/b, where it turns non-decreasing.
    """
    _require_pre_profile(n_pre)
    _require_b(params)
    grid = n_pre.grid
    horizon = params.gap / params.b
    n_scan = grid.idx_VF - grid.idx_VR
    scan = horizon * np.arange(1, n_scan + 1) / n_scan
    values = m_of_delta(n_pre, scan, params, offset)

    if offset <= BLOWUP_M_TOL and values[0] <= BLOWUP_M_TOL:
        return 0.0
    hits = np.flatnonzero(values <= BLOWUP_M_TOL)
    if hits.size == 0:
        return math.inf

    k = int(hits[0])
    lo = 0.0 if k == 0 else float(scan[k - 1])
    hi = float(scan[k])
    tol = BLOWUP_ROOT_TOL * max(1.0, horizon)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if m_of_delta(n_pre, mid, params, offset) <= BLOWUP_M_TOL:
            hi = mid
        else:
            lo = mid
    m_lo = m_of_delta(n_pre, lo, params, offset)
    m_hi = m_of_delta(n_pre, hi, params, offset)
    # m is linear on the bracket; the secant lands on the zero
    root = lo if m_lo == m_hi else lo + m_lo * (hi - lo) / (m_lo - m_hi)
    return float(min(max(root, lo), hi))


# ---------------------------------------------------------------------------
# Profiles
# ---------------------------------------------------------------------------

def _shifted_below(n_pre: DensityField, delta: float, params: ModelParams) -> np.ndarray:
    """Cell averages of n_pre(v - b delta) plus the reset ramp, zero at and above V_F."""
    grid = n_pre.grid
    edges = grid.interfaces
    cumulative = np.concatenate(([0.0], np.cumsum(n_pre.values[:grid.idx_VF]) * grid.dv))
    pre_edges = edges[:grid.idx_VF + 1]
    shift = params.b * delta
    moved = np.interp(edges - shift, pre_edges, cumulative, left=0.0, right=cumulative[-1])
    values = np.diff(moved) / grid.dv

    ramp_end = params.V_R + shift
    overlap = np.clip(np.minimum(edges[1:], ramp_end) - np.maximum(edges[:-1], params.V_R), 0.0, None)
    values += overlap / (params.b * grid.dv)
    values[grid.idx_VF:] = 0.0
    return values


def post_profile(n_pre: DensityField, delta_tau: float, params: ModelParams, offset: float = 0.0) -> DensityField:
    """
    Profile at the end of a finite blow-up interval.

    Raises ConsistencyError when its mass misses the input mass
    (below-threshold mass plus offset) by more than BLOWUP_MASS_TOL.
    """
    _require_pre_profile(n_pre)
    _require_b(params)
    if not (math.isfinite(delta_tau) and delta_tau >= 0):
        raise ParameterError(f"post profile needs a finite interval, got {delta_tau}")
    if delta_tau == 0.0:
        return n_pre
    n_post = DensityField(n_pre.grid, _shifted_below(n_pre, delta_tau, params))
    expected = n_pre.mass + offset
    if abs(n_post.mass - expected) > BLOWUP_MASS_TOL * max(1.0, expected):
        raise ConsistencyError(f"post-blow-up mass {n_post.mass:.12g} does not match {expected:.12g}")
    return n_post


def analyze(n_pre: DensityField, params: ModelParams, tau1: float = 0.0, offset: float = 0.0) -> BlowupEvent:
    delta = blowup_interval(n_pre, params, offset)
    if math.isinf(delta):
        event = BlowupEvent(tau1, n_pre, delta, None, BlowupKind.ETERNAL, offset)
    else:
        event = BlowupEvent(tau1, n_pre, delta, post_profile(n_pre, delta, params, offset), BlowupKind.FINITE, offset)
    logger.info("[BLOWUP] tau1=%.6g delta=%.6g (%s) offset=%.3e", tau1, delta, event.classification.value, offset)
    return event


def analyze_state(density: DensityField, params: ModelParams, tau1: float = 0.0) -> BlowupEvent:
    """Blow-up event for a profile that may already carry mass above V_F."""
    return analyze(density.below_threshold(), params, tau1, offset=density.tail_mass)


# ---------------------------------------------------------------------------
# Effective dynamics on the interval
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class EffectiveEvolution:
    """
    Samples of (below-threshold density, M) across a blow-up interval.

    trace holds the left limit n(tau, V_F-) of the below-threshold density;
    dM_residual is the summed |increment of M - int (b trace - 1)| over the
    sample intervals, the trace taken at interval midpoints.
    """
    delta: np.ndarray
    M: np.ndarray
    trace: np.ndarray
    profiles: tuple[DensityField, ...]
    dM_residual: float


def _trace_at(n_pre: DensityField, delta: float, params: ModelParams) -> float:
    grid = n_pre.grid
    x = params.V_F - params.b * delta
    cell = int(math.ceil((x - grid.v_min) / grid.dv - 1e-9)) - 1
    value = float(n_pre.values[cell]) if 0 <= cell < grid.idx_VF else 0.0
    if delta >= params.gap / params.b:
        value += 1.0 / params.b
    return value


def effective_evolve(
        n_pre: DensityField,
        tau_span: float,
        params: ModelParams,
        n_samples: int = 50,
        offset: float = 0.0,
) -> EffectiveEvolution:
    _require_pre_profile(n_pre)
    _require_b(params)
    if n_samples < 2:
        raise ParameterError(f"need at least two samples, got {n_samples}")
    length = blowup_interval(n_pre, params, offset)
    if not 0 < tau_span <= length * (1.0 + 1e-12):
        raise ParameterError(f"tau_span {tau_span} outside the blow-up interval (0, {length}]")

    deltas = np.linspace(0.0, tau_span, n_samples)
    M = np.maximum(np.asarray(m_of_delta(n_pre, deltas, params, offset)), 0.0)
    trace = np.array([_trace_at(n_pre, d, params) for d in deltas])
    profiles = tuple(DensityField(n_pre.grid, _shifted_below(n_pre, d, params)) for d in deltas)

    mids = 0.5 * (deltas[1:] + deltas[:-1])
    h = np.diff(deltas)
    predicted = h * (params.b * np.array([_trace_at(n_pre, d, params) for d in mids]) - 1.0)
    residual = float(np.abs(np.diff(M) - predicted).sum())
    logger.debug("[BLOWUP] effective evolution over %.4g: dM residual %.3e", tau_span, residual)
    return EffectiveEvolution(deltas, M, trace, profiles, residual)


@dataclass(frozen=True)
class DirichletReport:
    deltas: tuple[float, ...]
    ratios: tuple[float, ...]
    passed: bool


def dirichlet_loss_check(n_pre: DensityField, params: ModelParams, deltas: Sequence[float]) -> DirichletReport:
    """
    b int_{V_F-delta}^{V_F} n_pre / delta at each delta.

    A genuine blow-up start needs every ratio to stay at least 1.
    """
    _require_pre_profile(n_pre)
    d = np.asarray(deltas, dtype=float)
    if d.size == 0 or np.any(d <= 0):
        raise ParameterError("deltas must be a nonempty list of positive values")
    ratios = params.b * _mass_above(n_pre, params.V_F - d) / d
    passed = bool(np.all(ratios >= 1.0 - DIRICHLET_TOL))
    return DirichletReport(tuple(float(x) for x in d), tuple(float(r) for r in ratios), passed)
