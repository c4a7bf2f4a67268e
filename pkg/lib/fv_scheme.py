"""
Finite-volume kernels shared by the tau and t solvers.

One split step is advection -> diffusion -> absorption -> reset deposit:

- advection: explicit first-order upwind for the linear drift
  u(v) = -scale*v + shift, with no-flux truncation boundaries;
- diffusion: implicit Euler with zero-flux ends, one tridiagonal solve
  through scipy.linalg.solve_banded;
- absorption: multiplicative removal in the cells at or above V_F;
- deposit: mass added to the cell right of V_R.

Upwind (under CFL) and implicit diffusion are monotone and conservative,
absorption is a contraction and the deposit is nonnegative, so every kernel
preserves positivity. The kernels work on plain numpy arrays and return new
arrays; DensityField wrapping happens in the solvers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from config import CFL_SLACK, NEGATIVE_TOL
from lib.errors import SchemeError, StepError
from lib.model import VoltageGrid


def drift_at_interfaces(grid: VoltageGrid, scale: float, shift: float) -> np.ndarray:
    """-scale*v + shift on every interface; zero on the two boundary interfaces."""
    velocity = shift - scale * grid.interfaces
    velocity[0] = 0.0
    velocity[-1] = 0.0
    return velocity


def max_stable_step(grid: VoltageGrid, scale: float, shift: float) -> float:
    """Advection CFL limit dv / (|shift| + |scale|*max|v|)."""
    speed = abs(shift) + abs(scale) * grid.v_abs_max
    return np.inf if speed == 0 else grid.dv / speed


def check_cfl(grid: VoltageGrid, dt: float, scale: float, shift: float, where: str) -> None:
    limit = max_stable_step(grid, scale, shift)
    if not dt > 0:
        raise StepError(f"{where}: step must be positive, got {dt!r}")
    if dt > limit * (1.0 + CFL_SLACK):
        raise StepError(f"{where}: step {dt:.6g} exceeds the advection CFL limit {limit:.6g}")


def advect_upwind(values: np.ndarray, velocity: np.ndarray, dt: float, dv: float) -> np.ndarray:
    """One explicit upwind step; velocity holds the n+1 interface speeds."""
    flux = np.zeros_like(velocity)
    inner = velocity[1:-1]
    flux[1:-1] = np.where(inner > 0, inner * values[:-1], inner * values[1:])
    return values - (dt / dv) * np.diff(flux)


def diffuse_implicit(values: np.ndarray, ratio: float) -> np.ndarray:
    """
    Solve (I - ratio*L) x = values with L the zero-flux second difference.

    ratio is diffusion*dt/dv^2. Column sums of the matrix are 1, so mass is
    conserved up to round-off.
    """
    if ratio <= 0:
        return values.copy()
    n = values.size
    banded = np.empty((3, n))
    banded[0, :] = -ratio
    banded[2, :] = -ratio
    banded[1, :] = 1.0 + 2.0 * ratio
    banded[1, 0] = banded[1, -1] = 1.0 + ratio
    return solve_banded((1, 1), banded, values, overwrite_b=False, check_finite=False)


def tail_sum(values: np.ndarray, idx_VF: int, dv: float) -> float:
    return float(values[idx_VF:].sum() * dv)


def remove_from_tail(values: np.ndarray, idx_VF: int, dv: float, fraction: float) -> float:
    """Scale the tail by (1 - fraction) in place; returns the mass removed."""
    before = tail_sum(values, idx_VF, dv)
    values[idx_VF:] *= 1.0 - fraction
    return before - tail_sum(values, idx_VF, dv)


def deposit(values: np.ndarray, idx_VR: int, mass: float, dv: float) -> None:
    """Add mass to the cell whose left interface is V_R, in place."""
    values[idx_VR] += mass / dv


def clean_negatives(values: np.ndarray, where: str) -> np.ndarray:
    """Zero round-off negatives; anything below -NEGATIVE_TOL is a scheme failure."""
    lowest = float(values.min())
    if lowest < -NEGATIVE_TOL:
        raise SchemeError(f"{where}: negative density {lowest:.3e} after step")
    if lowest < 0:
        np.maximum(values, 0.0, out=values)
    return values


@dataclass(frozen=True)
class Transport:
    """Drift -scale*v + shift and diffusion coefficient, frozen over one step."""
    scale: float
    shift: float
    diffusion: float

    def apply(self, values: np.ndarray, grid: VoltageGrid, dt: float, where: str) -> np.ndarray:
        velocity = drift_at_interfaces(grid, self.scale, self.shift)
        out = advect_upwind(values, velocity, dt, grid.dv)
        out = diffuse_implicit(out, self.diffusion * dt / grid.dv ** 2)
        return clean_negatives(out, where)
