"""
Core model types: physical parameters, the interface-aligned voltage grid,
cell-averaged densities and their moments, plus the plateau steady state.

Every other module builds on these. All types are frozen value objects; the
arrays they hold are copied and marked read-only on construction, so they can
be shared between threads.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from logging import getLogger
from typing import Callable, Optional

import numpy as np
from scipy.integrate import quad

from config import DEFAULT_BOUND_FACTOR, GRID_ROUNDING_TOL, INIT_MASS_TOL, NEGATIVE_TOL
from lib.errors import DegenerateInputError, ParameterError

logger = getLogger(__name__)

DensityFn = Callable[[np.ndarray], np.ndarray]


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelParams:
    """Physical constants. eps is None for the eps-free limit analytics."""
    a: float
    b: float
    V_R: float
    V_F: float
    eps: Optional[float] = None

    def __post_init__(self) -> None:
        for name in ("a", "b", "V_R", "V_F"):
            if not math.isfinite(getattr(self, name)):
                raise ParameterError(f"{name} must be finite, got {getattr(self, name)!r}")
        if not self.V_R < self.V_F:
            raise ParameterError(f"V_R must be below V_F (V_R={self.V_R}, V_F={self.V_F})")
        if not self.a > 0:
            raise ParameterError(f"a must be positive, got {self.a}")
        if self.eps is not None and not (math.isfinite(self.eps) and self.eps > 0):
            raise ParameterError(f"eps must be positive, got {self.eps}")

    @property
    def gap(self) -> float:
        """V_F - V_R."""
        return self.V_F - self.V_R

    def with_eps(self, eps: Optional[float]) -> ModelParams:
        return replace(self, eps=eps)

    def require_eps(self) -> float:
        if self.eps is None:
            raise ParameterError("this operation needs eps, got an eps-free ModelParams")
        return self.eps


# ---------------------------------------------------------------------------
# Grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VoltageGrid:
    """
    Uniform mesh with V_R and V_F on cell interfaces.

    Interface i sits at v_min + i*dv. Cell i spans interfaces i and i+1, so
    cell idx_VR is the first cell right of V_R and cells idx_VF.. form the
    super-threshold region.
    """
    v_min: float
    v_max: float
    n_cells: int
    dv: float
    idx_VR: int
    idx_VF: int

    def __post_init__(self) -> None:
        if self.n_cells < 1 or not self.dv > 0:
            raise ParameterError(f"degenerate grid: n_cells={self.n_cells}, dv={self.dv}")
        if not 0 < self.idx_VR < self.idx_VF < self.n_cells:
            raise ParameterError(f"V_R/V_F indices out of order: {self.idx_VR}, {self.idx_VF}, n={self.n_cells}")

    @property
    def interfaces(self) -> np.ndarray:
        return self.v_min + self.dv * np.arange(self.n_cells + 1)

    @property
    def centers(self) -> np.ndarray:
        return self.v_min + self.dv * (np.arange(self.n_cells) + 0.5)

    @property
    def v_abs_max(self) -> float:
        """Largest |v| on the mesh, used by CFL bounds."""
        return max(abs(self.v_min), abs(self.v_max))

    def interface(self, i: int) -> float:
        return self.v_min + i * self.dv


def default_bounds(params: ModelParams) -> tuple[float, float]:
    """Truncation interval wide enough for the second-moment tails of every run."""
    b = abs(params.b)
    root_a = math.sqrt(params.a)
    low = params.V_F - DEFAULT_BOUND_FACTOR * max(1.0, root_a + abs(params.V_R) + b)
    high = params.V_F + DEFAULT_BOUND_FACTOR * max(1.0, root_a + b)
    return low, high


def _whole_cells(length: float, dv: float) -> int:
    """ceil(length/dv) that ignores round-off just above an integer."""
    ratio = length / dv
    return int(math.ceil(ratio - GRID_ROUNDING_TOL * max(1.0, ratio)))


def make_grid(params: ModelParams, v_min: float, v_max: float, dv_target: float) -> VoltageGrid:
    """
    Build a grid with dv <= dv_target where V_R and V_F are interfaces.

    dv divides V_F - V_R exactly; the bounds are pushed outwards to the next
    interface, so the returned grid always covers [v_min, v_max].
    """
    if not dv_target > 0:
        raise ParameterError(f"dv_target must be positive, got {dv_target}")
    if not v_min < params.V_R < params.V_F < v_max:
        raise ParameterError(
            f"need v_min < V_R < V_F < v_max, got {v_min}, {params.V_R}, {params.V_F}, {v_max}"
        )

    cells_in_gap = max(1, _whole_cells(params.gap, dv_target))
    dv = params.gap / cells_in_gap
    cells_below = max(1, _whole_cells(params.V_R - v_min, dv))
    cells_above = max(1, _whole_cells(v_max - params.V_F, dv))

    n_cells = cells_below + cells_in_gap + cells_above
    grid_min = params.V_R - cells_below * dv
    grid = VoltageGrid(
        v_min=grid_min,
        v_max=grid_min + n_cells * dv,
        n_cells=n_cells,
        dv=dv,
        idx_VR=cells_below,
        idx_VF=cells_below + cells_in_gap,
    )
    logger.debug("[GRID] %d cells, dv=%.6g on [%.6g, %.6g]", n_cells, dv, grid.v_min, grid.v_max)
    return grid


# ---------------------------------------------------------------------------
# Densities
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DensityField:
    """
    Cell averages of a nonnegative density on a grid.

    clipped_mass is the share of the source density that fell outside the
    grid when it was projected (0 for densities produced by the solvers).
    """
    grid: VoltageGrid
    values: np.ndarray
    clipped_mass: float = 0.0

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=float)
        if values.shape != (self.grid.n_cells,):
            raise ParameterError(f"expected {self.grid.n_cells} cell values, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ParameterError("density values must be finite")
        if values.size and values.min() < 0:
            if values.min() < -NEGATIVE_TOL:
                raise ParameterError(f"density values must be nonnegative, min={values.min():.3e}")
            values = np.maximum(values, 0.0)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def mass(self) -> float:
        return float(self.values.sum() * self.grid.dv)

    @property
    def tail_mass(self) -> float:
        """Integral over [V_F, v_max], starting exactly at interface idx_VF."""
        return float(self.values[self.grid.idx_VF:].sum() * self.grid.dv)

    def below_threshold(self) -> DensityField:
        """Copy with every cell at or above V_F set to zero."""
        values = self.values.copy()
        values[self.grid.idx_VF:] = 0.0
        return DensityField(self.grid, values)

    def scaled(self, factor: float) -> DensityField:
        return DensityField(self.grid, self.values * factor, self.clipped_mass)

    def l1_distance(self, other: DensityField) -> float:
        self._check_same_grid(other)
        return float(np.abs(self.values - other.values).sum() * self.grid.dv)

    def l2_distance(self, other: DensityField) -> float:
        self._check_same_grid(other)
        return float(math.sqrt(((self.values - other.values) ** 2).sum() * self.grid.dv))

    def _check_same_grid(self, other: DensityField) -> None:
        if other.grid != self.grid:
            raise ParameterError("densities live on different grids")


def zero_density(grid: VoltageGrid) -> DensityField:
    return DensityField(grid, np.zeros(grid.n_cells))


def project_density(
        grid: VoltageGrid,
        f: DensityFn,
        cdf: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> DensityField:
    """
    Cell averages of f, renormalized to mass exactly 1.

    With cdf given the averages are exact (differences of the cdf at the
    interfaces) and the clipped mass is read off the cdf. Otherwise f is
    sampled at cell midpoints and the mass outside the grid is integrated with
    scipy quad.
    """
    if cdf is not None:
        at_interfaces = np.asarray(cdf(grid.interfaces), dtype=float)
        values = np.diff(at_interfaces) / grid.dv
        inside = float(at_interfaces[-1] - at_interfaces[0])
        outside = float(at_interfaces[0] + (1.0 - at_interfaces[-1]))
    else:
        values = np.broadcast_to(np.asarray(f(grid.centers), dtype=float), (grid.n_cells,)).copy()
        inside = float(values.sum() * grid.dv)
        left, _ = quad(lambda v: float(f(np.asarray(v))), -np.inf, grid.v_min, limit=200)
        right, _ = quad(lambda v: float(f(np.asarray(v))), grid.v_max, np.inf, limit=200)
        outside = max(left, 0.0) + max(right, 0.0)

    if np.any(values < -NEGATIVE_TOL):
        raise ParameterError("density function must be nonnegative on the grid")
    values = np.maximum(values, 0.0)
    total = float(values.sum() * grid.dv)
    if not (math.isfinite(total) and total > 0):
        raise DegenerateInputError("density has zero mass on the grid")

    clipped = max(outside, 0.0) / (inside + max(outside, 0.0)) if inside > 0 else 0.0
    if clipped > INIT_MASS_TOL:
        logger.warning("[GRID] projection clipped %.3e of the mass outside [%.4g, %.4g]", clipped, grid.v_min, grid.v_max)
    return DensityField(grid, values / total, clipped_mass=clipped)


def normalized(density: DensityField, tolerance: float = INIT_MASS_TOL) -> DensityField:
    """Rescale to mass 1 when the deficit is within tolerance, reject otherwise."""
    mass = density.mass
    if abs(mass - 1.0) > tolerance:
        raise ParameterError(f"initial density must have mass 1, got {mass:.12g}")
    if mass == 1.0:
        return density
    if abs(mass - 1.0) > 1e-12:
        logger.warning("[GRID] renormalizing initial density (mass %.12g)", mass)
    return density.scaled(1.0 / mass)


# ---------------------------------------------------------------------------
# Moments
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Moments:
    """Midpoint-quadrature moments. mean is the first moment, not normalized by mass."""
    mass: float
    mean: float
    second_moment: float
    l2: float
    tail_mass_M: float
    tail_second_moment: float = 0.0

    def to_metrics_dict(self) -> dict[str, str]:
        return {k: f"{v:.6g}" for k, v in self.__dict__.items()}


def moments(d: DensityField, params: ModelParams) -> Moments:
    grid = d.grid
    v = grid.centers
    n = d.values
    dv = grid.dv
    tail = slice(grid.idx_VF, None)
    return Moments(
        mass=float(n.sum() * dv),
        mean=float((v * n).sum() * dv),
        second_moment=float((v * v * n).sum() * dv),
        l2=float((n * n).sum() * dv),
        tail_mass_M=float(n[tail].sum() * dv),
        tail_second_moment=float((((v[tail] - params.V_F) ** 2) * n[tail]).sum() * dv),
    )


# ---------------------------------------------------------------------------
# Reference steady state
# ---------------------------------------------------------------------------

def plateau_steady_state(params: ModelParams, grid: VoltageGrid) -> DensityField:
    """
    Uniform 1/b on [V_R, V_F] and the exponential tail (1/b)exp(-(v-V_F)/(bM))
    above V_F, with M = 1 - (V_F-V_R)/b.

    Tail cells hold exact cell averages. The result is not renormalized: its
    mass falls short of 1 by the truncated tail M*exp(-(v_max-V_F)/(bM)).
    """
    if params.b < params.gap:
        raise ParameterError(f"plateau needs b >= V_F - V_R, got b={params.b}, gap={params.gap}")

    values = np.zeros(grid.n_cells)
    values[grid.idx_VR:grid.idx_VF] = 1.0 / params.b
    tail_M = 1.0 - params.gap / params.b
    if tail_M > 0:
        length = params.b * tail_M
        offsets = grid.dv * np.arange(grid.n_cells - grid.idx_VF + 1)
        survival = np.exp(-offsets / length)
        values[grid.idx_VF:] = tail_M * -np.diff(survival) / grid.dv
    logger.debug("[GRID] plateau b=%.4g M=%.6g", params.b, tail_M)
    return DensityField(grid, values)


def plateau_tail_mass(params: ModelParams) -> float:
    return max(0.0, 1.0 - params.gap / params.b)


__all__ = [
    "DensityField",
    "ModelParams",
    "Moments",
    "VoltageGrid",
    "default_bounds",
    "make_grid",
    "moments",
    "normalized",
    "plateau_steady_state",
    "plateau_tail_mass",
    "project_density",
    "zero_density",
]
