"""
Closed-form Ornstein-Uhlenbeck oracle for the reset-source linear problem

    d_t p + d_v[(-v + b N(t)) p] = a d_vv p + N(t) delta_{V_R},   p(0) = 0.

A neuron reset at time s sits at time t on a Gaussian with

    mean     V(s,t) = e^{s-t} V_R + b int_s^t e^{u-t} N(u) du
    variance sigma^2 = a (1 - e^{-2(t-s)})

so p(t) = int_0^t N(s) G(s,t,.) ds and, squaring and integrating in v,
||p(t)||^2 = int int N(s1) N(s2) overlap(s1,s2,t) ds1 ds2.

RateInput carries N(t): a piecewise-linear table, a constant, or the
singular c/sqrt(T-t). Its weighted integral int_s^t e^{u-t} N(u) du is exact
for all three kinds, so the Gaussian means never depend on sampling N.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from logging import getLogger
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.integrate import dblquad, quad, quad_vec
from scipy.special import erf
from scipy.stats import norm

from lib.errors import ParameterError
from lib.model import DensityField, ModelParams, VoltageGrid

logger = getLogger(__name__)

_SQRT_2PI = math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Rate input
# ---------------------------------------------------------------------------

class RateKind(str, Enum):
    TABLE = "table"
    CONSTANT = "constant"
    INVERSE_SQRT = "inverse_sqrt"


@dataclass(frozen=True, eq=False)
class RateInput:
    """
    Nonnegative firing-rate input N(t).

    TABLE interpolates (times, rates) linearly and holds the end values
    outside the table. INVERSE_SQRT is coefficient/sqrt(blowup_time - t) and
    is only defined before blowup_time.
    """
    kind: RateKind
    times: np.ndarray = np.zeros(0)
    rates: np.ndarray = np.zeros(0)
    value: float = 0.0
    coefficient: float = 0.0
    blowup_time: float = math.inf

    def __post_init__(self) -> None:
        if self.kind == RateKind.TABLE:
            times = np.array(self.times, dtype=float)
            rates = np.array(self.rates, dtype=float)
            if times.ndim != 1 or times.size < 1 or times.shape != rates.shape:
                raise ParameterError("rate table needs matching 1-d times and rates")
            if times.size > 1 and np.any(np.diff(times) <= 0):
                raise ParameterError("rate table times must be strictly increasing")
            if np.any(rates < 0) or not np.all(np.isfinite(rates)):
                raise ParameterError("rates must be finite and nonnegative")
            times.setflags(write=False)
            rates.setflags(write=False)
            object.__setattr__(self, "times", times)
            object.__setattr__(self, "rates", rates)
        elif self.kind == RateKind.CONSTANT:
            if not (math.isfinite(self.value) and self.value >= 0):
                raise ParameterError(f"constant rate must be nonnegative, got {self.value}")
        elif self.kind == RateKind.INVERSE_SQRT:
            if not (self.coefficient >= 0 and math.isfinite(self.blowup_time)):
                raise ParameterError("inverse_sqrt rate needs coefficient >= 0 and a finite blow-up time")

    # -- constructors -------------------------------------------------------

    @classmethod
    def constant(cls, value: float) -> RateInput:
        return cls(RateKind.CONSTANT, value=float(value))

    @classmethod
    def zero(cls) -> RateInput:
        return cls.constant(0.0)

    @classmethod
    def table(cls, times, rates) -> RateInput:
        return cls(RateKind.TABLE, times=np.asarray(times, dtype=float), rates=np.asarray(rates, dtype=float))

    @classmethod
    def inverse_sqrt(cls, coefficient: float, blowup_time: float) -> RateInput:
        return cls(RateKind.INVERSE_SQRT, coefficient=float(coefficient), blowup_time=float(blowup_time))

    @classmethod
    def from_csv(cls, path: Path) -> RateInput:
        """Two-column CSV with header t,N."""
        from helpers.csv_export import read_columns
        columns = read_columns(path)
        if "t" not in columns or "N" not in columns:
            raise ParameterError(f"{path.name}: rate table needs columns t,N")
        return cls.table(columns["t"], columns["N"])

    def to_csv(self, path: Path) -> Path:
        from helpers.csv_export import write_rows
        if self.kind != RateKind.TABLE:
            raise ParameterError("only table rates have a CSV form")
        return write_rows(path, ["t", "N"], zip(self.times, self.rates))

    def scaled(self, factor: float) -> RateInput:
        if self.kind == RateKind.TABLE:
            return RateInput.table(self.times, self.rates * factor)
        if self.kind == RateKind.CONSTANT:
            return RateInput.constant(self.value * factor)
        return RateInput.inverse_sqrt(self.coefficient * factor, self.blowup_time)

    # -- evaluation ---------------------------------------------------------

    @property
    def breakpoints(self) -> np.ndarray:
        return self.times if self.kind == RateKind.TABLE else np.zeros(0)

    def __call__(self, t: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
        if self.kind == RateKind.TABLE:
            return np.interp(t, self.times, self.rates)
        if self.kind == RateKind.CONSTANT:
            return self.value + 0.0 * np.asarray(t, dtype=float) if np.ndim(t) else self.value
        remaining = self.blowup_time - np.asarray(t, dtype=float)
        if np.any(remaining <= 0):
            raise ParameterError(f"inverse_sqrt rate evaluated at or after its blow-up time {self.blowup_time}")
        out = self.coefficient / np.sqrt(remaining)
        return float(out) if np.ndim(out) == 0 else out

    def _check_interval(self, s: float, t: float) -> None:
        if t < s:
            raise ParameterError(f"integration bounds out of order: {s} > {t}")
        if self.kind == RateKind.INVERSE_SQRT and t > self.blowup_time:
            raise ParameterError(f"inverse_sqrt rate integrated past its blow-up time {self.blowup_time}")

    def _table_pieces(self, s: float, t: float) -> list[tuple[float, float, float, float]]:
        """(u0, u1, N(u0), N(u1)) for the linear pieces covering [s, t]."""
        knots = self.times[(self.times > s) & (self.times < t)]
        edges = np.concatenate(([s], knots, [t]))
        values = np.interp(edges, self.times, self.rates)
        return [(edges[k], edges[k + 1], values[k], values[k + 1]) for k in range(edges.size - 1)]

    def integral(self, s: float, t: float) -> float:
        """int_s^t N(u) du, exact."""
        self._check_interval(s, t)
        if t == s:
            return 0.0
        if self.kind == RateKind.CONSTANT:
            return self.value * (t - s)
        if self.kind == RateKind.INVERSE_SQRT:
            T = self.blowup_time
            return 2.0 * self.coefficient * (math.sqrt(T - s) - math.sqrt(T - t))
        return float(sum(0.5 * (n0 + n1) * (u1 - u0) for u0, u1, n0, n1 in self._table_pieces(s, t)))

    def weighted_integral(self, s: float, t: float) -> float:
        """int_s^t e^{u-t} N(u) du, exact."""
        self._check_interval(s, t)
        if t == s:
            return 0.0
        if self.kind == RateKind.CONSTANT:
            return -self.value * math.expm1(s - t)
        if self.kind == RateKind.INVERSE_SQRT:
            T = self.blowup_time
            c = self.coefficient
            return c * math.exp(T - t) * math.sqrt(math.pi) * (erf(math.sqrt(T - s)) - erf(math.sqrt(T - t)))
        total = 0.0
        for u0, u1, n0, n1 in self._table_pieces(s, t):
            slope = (n1 - n0) / (u1 - u0)
            # antiderivative of e^{u-t}(n0 + slope (u - u0)) is e^{u-t}(n0 + slope (u - u0) - slope)
            total += math.exp(u1 - t) * (n1 - slope) - math.exp(u0 - t) * (n0 - slope)
        return total


# ---------------------------------------------------------------------------
# Green function
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GreenValue:
    mean: float
    variance: float
    density: float


def ou_mean(s: float, t: float, x_start: float, rate: RateInput, params: ModelParams) -> float:
    """Mean at time t of the OU particle started at x_start at time s."""
    return math.exp(s - t) * x_start + params.b * rate.weighted_integral(s, t)


def ou_variance(s: float, t: float, params: ModelParams) -> float:
    return -params.a * math.expm1(-2.0 * (t - s))


def ou_green(s: float, t: float, v: float, rate: RateInput, params: ModelParams) -> GreenValue:
    if not t > s:
        raise ParameterError(f"Green function needs t > s, got s={s}, t={t}")
    mean = ou_mean(s, t, params.V_R, rate, params)
    variance = ou_variance(s, t, params)
    return GreenValue(mean, variance, float(norm.pdf(v, loc=mean, scale=math.sqrt(variance))))


def pair_overlap(s1: float, s2: float, t: float, rate: RateInput, params: ModelParams) -> float:
    """int G(s1,t,v) G(s2,t,v) dv in closed form."""
    if not t > max(s1, s2):
        raise ParameterError(f"pair overlap needs t > max(s1, s2), got {s1}, {s2}, {t}")
    total_var = ou_variance(s1, t, params) + ou_variance(s2, t, params)
    gap = ou_mean(s1, t, params.V_R, rate, params) - ou_mean(s2, t, params.V_R, rate, params)
    return math.exp(-gap * gap / (2.0 * total_var)) / math.sqrt(2.0 * math.pi * total_var)


def _gaussian(x: float, mean: float, variance: float) -> float:
    return math.exp(-(x - mean) ** 2 / (2.0 * variance)) / math.sqrt(2.0 * math.pi * variance)


def _interior_points(rate: RateInput, t: float) -> Optional[list[float]]:
    points = [p for p in rate.breakpoints if 0.0 < p < t]
    return points or None


# ---------------------------------------------------------------------------
# Duhamel representation
# ---------------------------------------------------------------------------

def duhamel_pbar(rate: RateInput, t: float, grid: VoltageGrid, params: ModelParams, tol: float = 1e-8) -> DensityField:
    """
    Cell averages of p(t) = int_0^t N(s) G(s,t,.) ds by adaptive vector quadrature.

    The Gaussian is integrated exactly over each cell (cdf differences), and
    the s-quadrature runs to tol in the discrete L1 norm.
    """
    if not t > 0:
        raise ParameterError(f"t must be positive, got {t}")
    edges = grid.interfaces

    def integrand(s: float) -> np.ndarray:
        n = float(rate(s))
        if n == 0.0:
            return np.zeros(grid.n_cells)
        mean = ou_mean(s, t, params.V_R, rate, params)
        sigma = math.sqrt(ou_variance(s, t, params))
        if sigma <= 0:
            weights = np.zeros(grid.n_cells)
            k = int(np.clip(np.searchsorted(edges, mean, side="right") - 1, 0, grid.n_cells - 1))
            weights[k] = 1.0
        else:
            weights = np.diff(norm.cdf(edges, loc=mean, scale=sigma))
        return n * weights / grid.dv

    epsabs = tol / (grid.v_max - grid.v_min)
    values, error = quad_vec(integrand, 0.0, t, epsabs=epsabs, epsrel=0.0, norm="max",
                             points=_interior_points(rate, t), limit=20000)
    logger.debug("[GREEN] duhamel t=%.4g mass=%.8g err=%.2e", t, values.sum() * grid.dv, error)
    return DensityField(grid, np.maximum(values, 0.0))


def duhamel_pbar_pointwise(rate: RateInput, t: float, v: float, params: ModelParams, tol: float = 1e-11) -> float:
    """p(t, v) at a single voltage by scalar quadrature over the launch time."""
    if not t > 0:
        raise ParameterError(f"t must be positive, got {t}")

    def integrand(s: float) -> float:
        n = float(rate(s))
        if n == 0.0 or s >= t:
            return 0.0
        return n * _gaussian(v, ou_mean(s, t, params.V_R, rate, params), ou_variance(s, t, params))

    value, _ = quad(integrand, 0.0, t, epsabs=tol, epsrel=tol, limit=500, points=_interior_points(rate, t))
    return value


def pbar_l2_squared(rate: RateInput, t: float, params: ModelParams, tol: float = 1e-10) -> float:
    """int p(t,v)^2 dv over the real line, split at the source kink V_R."""
    def square(v: float) -> float:
        return duhamel_pbar_pointwise(rate, t, v, params) ** 2

    left, _ = quad(square, -np.inf, params.V_R, epsabs=tol, epsrel=tol, limit=500)
    right, _ = quad(square, params.V_R, np.inf, epsabs=tol, epsrel=tol, limit=500)
    return left + right


def l2_identity(rate: RateInput, t: float, params: ModelParams, tol: float = 1e-10) -> float:
    """
    ||p(t)||^2 as the double integral of N(s1) N(s2) pair_overlap.

    Integrates the triangle s1 <= s2 and doubles it.
    """
    if not t > 0:
        raise ParameterError(f"t must be positive, got {t}")

    def integrand(s1: float, s2: float) -> float:
        if s2 >= t:
            return 0.0
        n1 = float(rate(s1))
        n2 = float(rate(s2))
        if n1 == 0.0 or n2 == 0.0:
            return 0.0
        return n1 * n2 * pair_overlap(s1, s2, t, rate, params)

    value, error = dblquad(integrand, 0.0, t, 0.0, lambda s2: s2, epsabs=tol, epsrel=tol)
    logger.debug("[GREEN] l2 identity t=%.4g value=%.10g err=%.2e", t, 2.0 * value, 2.0 * error)
    return 2.0 * value


# ---------------------------------------------------------------------------
# Toy problems
# ---------------------------------------------------------------------------

class ToyKind(str, Enum):
    M1 = "m1"
    Q2_DIRAC = "q2_dirac"
    Q3_BLOWUP = "q3_blowup"


@dataclass(frozen=True)
class ToyResult:
    """
    Outcome of a toy problem.

    m1 fills profile; q2_dirac fills coefficient and degenerate; q3_blowup
    fills etas, values, increments and the per-halving lower bound.
    """
    kind: ToyKind
    profile: Optional[DensityField] = None
    coefficient: float = math.nan
    degenerate: bool = False
    etas: tuple[float, ...] = ()
    values: tuple[float, ...] = ()
    increments: tuple[float, ...] = ()
    increment_bound: float = math.nan

    @property
    def diverging(self) -> bool:
        """Every halving of eta adds at least the logarithmic lower bound."""
        return bool(self.increments) and all(inc >= self.increment_bound * (1.0 - 1e-9) for inc in self.increments)


def _toy_transport_ramp(params: ModelParams, tau: float, grid: VoltageGrid) -> DensityField:
    if params.b <= 0:
        raise ParameterError("m1 needs b > 0")
    edges = grid.interfaces
    overlap = np.clip(np.minimum(edges[1:], params.V_R + params.b * tau) - np.maximum(edges[:-1], params.V_R), 0.0, None)
    return DensityField(grid, overlap / (params.b * grid.dv))


def _toy_dirac_coefficient(params: ModelParams, t: float) -> ToyResult:
    if not (params.V_R > 0 and params.b > 0):
        raise ParameterError("q2_dirac needs V_R > 0 and b > 0 so that b*N = V_R is a positive rate")
    rate = params.V_R / params.b
    # drift -v + bN vanishes at V_R, so every reset neuron stays there
    return ToyResult(ToyKind.Q2_DIRAC, coefficient=t * rate,
                     degenerate=math.isclose(params.b * rate, params.V_R, abs_tol=1e-12))


def _toy_q3_at_reset(params: ModelParams, T: float, eta: float, c: float) -> float:
    """
    q3(T - eta, V_R) for d_t q + b N d_v q = a d_vv q + N delta_{V_R}, N = c/sqrt(T-t).

    In the scaled launch time y = (T-s)/eta the integrand is
    (c/sqrt(4 pi a)) exp(-(b^2 c^2/a)(sqrt(y)-1)/(sqrt(y)+1)) / sqrt(y (y-1)),
    integrated with the algebraic weight (y-1)^(-1/2) on [1, T/eta].
    """
    beta = params.b ** 2 * c ** 2 / params.a

    def smooth_part(y: float) -> float:
        root = math.sqrt(y)
        return math.exp(-beta * (root - 1.0) / (root + 1.0)) / root

    value, _ = quad(smooth_part, 1.0, T / eta, weight="alg", wvar=(-0.5, 0.0), limit=500, epsabs=1e-13, epsrel=1e-12)
    return c / math.sqrt(4.0 * math.pi * params.a) * value


def toy_solutions(
        kind: Union[ToyKind, str],
        params: ModelParams,
        t_or_tau: float,
        grid: Optional[VoltageGrid] = None,
        c: float = 2.0,
        eta0: float = 0.25,
        halvings: int = 4,
) -> ToyResult:
    """
    m1: pure transport with unit source, profile (1/b) 1_{V_R < v < V_R + b tau}.
    q2_dirac: relaxation drift with b N = V_R, all mass stays at V_R.
    q3_blowup: transport + diffusion with N = c/sqrt(T - t), T = t_or_tau and
    a = 1/2; q3(T - eta, V_R) grows like log(1/eta).
    """
    try:
        kind = ToyKind(kind)
    except ValueError:
        raise ParameterError(f"unknown toy kind {kind!r}") from None
    if not t_or_tau > 0:
        raise ParameterError(f"time must be positive, got {t_or_tau}")

    if kind == ToyKind.M1:
        if grid is None:
            raise ParameterError("m1 needs a grid")
        return ToyResult(kind, profile=_toy_transport_ramp(params, t_or_tau, grid))
    if kind == ToyKind.Q2_DIRAC:
        return _toy_dirac_coefficient(params, t_or_tau)

    if not math.isclose(params.a, 0.5, rel_tol=0, abs_tol=1e-12):
        raise ParameterError(f"q3_blowup is set up for a = 1/2, got a={params.a}")
    if not (0 < eta0 < t_or_tau and halvings >= 1 and c > 0):
        raise ParameterError("q3_blowup needs 0 < eta0 < T, halvings >= 1, c > 0")
    etas = tuple(eta0 / 2 ** k for k in range(halvings + 1))
    values = tuple(_toy_q3_at_reset(params, t_or_tau, eta, c) for eta in etas)
    increments = tuple(values[k + 1] - values[k] for k in range(halvings))
    bound = c / math.sqrt(4.0 * math.pi * params.a) * math.exp(-params.b ** 2 * c ** 2 / params.a) * math.log(2.0)
    logger.info("[GREEN] q3 at V_R: %s", ", ".join(f"{v:.5g}" for v in values))
    return ToyResult(kind, etas=etas, values=values, increments=increments, increment_bound=bound)
