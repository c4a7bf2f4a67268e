"""
Tests for the core model types: parameters, grids, densities, moments and the
plateau steady state.

    pytest tests/test_model.py -v
"""
from __future__ import annotations

import math
import unittest

import numpy as np
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from lib.errors import DegenerateInputError, ParameterError
from lib.model import (DensityField, ModelParams, default_bounds, make_grid, moments, normalized,
                       plateau_steady_state, plateau_tail_mass, project_density, zero_density)
from lib.utils import setup_logging

setup_logging()

DESK = ModelParams(a=1.0, b=0.5, V_R=0.0, V_F=1.0)


def gaussian(grid, mean=0.0, sd=0.4) -> DensityField:
    return project_density(grid, lambda v: norm.pdf(v, mean, sd), cdf=lambda v: norm.cdf(v, mean, sd))


class TestModelParams(unittest.TestCase):

    def test_rejects_bad_values(self) -> None:
        """Ordering, positivity and finiteness are checked on construction."""
        cases = [
            dict(a=1.0, b=0.5, V_R=1.0, V_F=1.0),
            dict(a=0.0, b=0.5, V_R=0.0, V_F=1.0),
            dict(a=1.0, b=math.nan, V_R=0.0, V_F=1.0),
            dict(a=1.0, b=0.5, V_R=0.0, V_F=1.0, eps=0.0),
            dict(a=1.0, b=0.5, V_R=0.0, V_F=1.0, eps=-1e-3),
        ]
        for kwargs in cases:
            with self.subTest(**kwargs):
                with self.assertRaises(ParameterError):
                    ModelParams(**kwargs)

    def test_negative_b_is_allowed(self) -> None:
        """Inhibitory networks are valid input."""
        self.assertEqual(ModelParams(1.0, -1.0, 0.0, 1.0).b, -1.0)

    def test_with_eps(self) -> None:
        p = DESK.with_eps(1e-2)
        self.assertEqual(p.eps, 1e-2)
        self.assertIsNone(DESK.eps)
        with self.assertRaises(ParameterError):
            DESK.require_eps()


class TestGrid(unittest.TestCase):

    def test_desk_grid(self) -> None:
        """dv = 0.005 on [-4, 3] gives 1400 cells with V_R, V_F on interfaces."""
        grid = make_grid(DESK, -4.0, 3.0, 0.005)
        self.assertEqual(grid.n_cells, 1400)
        self.assertAlmostEqual(grid.interface(grid.idx_VR), 0.0, places=12)
        self.assertAlmostEqual(grid.interface(grid.idx_VF), 1.0, places=12)

    def test_rejects_bounds_outside_thresholds(self) -> None:
        with self.assertRaises(ParameterError):
            make_grid(DESK, 0.5, 3.0, 0.01)
        with self.assertRaises(ParameterError):
            make_grid(DESK, -4.0, 3.0, 0.0)

    def test_default_bounds_contain_thresholds(self) -> None:
        low, high = default_bounds(ModelParams(1.0, 2.0, 0.0, 1.0))
        self.assertEqual((low, high), (-14.0, 16.0))

    @settings(max_examples=60, deadline=None)
    @given(
        V_R=st.floats(-2.0, 0.9),
        gap=st.floats(0.05, 3.0),
        dv=st.floats(0.002, 0.2),
        below=st.floats(0.01, 5.0),
        above=st.floats(0.01, 5.0),
    )
    def test_thresholds_land_on_interfaces(self, V_R, gap, dv, below, above) -> None:
        """For any admissible input, V_R and V_F are interfaces and the grid covers the bounds."""
        params = ModelParams(1.0, 0.5, V_R, V_R + gap)
        grid = make_grid(params, V_R - below, V_R + gap + above, dv)
        self.assertLessEqual(grid.dv, dv * (1 + 1e-12))
        self.assertAlmostEqual(grid.interface(grid.idx_VR), params.V_R, delta=1e-9 * max(1.0, abs(V_R)))
        self.assertAlmostEqual(grid.interface(grid.idx_VF), params.V_F, delta=1e-9 * max(1.0, abs(params.V_F)))
        self.assertLessEqual(grid.v_min, V_R - below + 1e-7)
        self.assertGreaterEqual(grid.v_max, V_R + gap + above - 1e-7)


class TestDensity(unittest.TestCase):

    def setUp(self) -> None:
        self.grid = make_grid(DESK, -4.0, 3.0, 0.01)

    def test_projection_has_unit_mass(self) -> None:
        d = gaussian(self.grid)
        self.assertAlmostEqual(d.mass, 1.0, places=13)
        self.assertLess(d.clipped_mass, 1e-12)

    def test_projection_without_cdf_records_clipped_mass(self) -> None:
        """A Gaussian centred near the edge loses mass outside the grid."""
        d = project_density(self.grid, lambda v: norm.pdf(v, 2.8, 0.5))
        self.assertAlmostEqual(d.mass, 1.0, places=12)
        self.assertAlmostEqual(d.clipped_mass, norm.sf(3.0, 2.8, 0.5), delta=1e-3)

    def test_zero_mass_projection_is_degenerate(self) -> None:
        with self.assertRaises(DegenerateInputError):
            project_density(self.grid, lambda v: np.zeros_like(v), cdf=lambda v: np.zeros_like(v))

    def test_negative_values_rejected(self) -> None:
        values = np.zeros(self.grid.n_cells)
        values[10] = -1e-6
        with self.assertRaises(ParameterError):
            DensityField(self.grid, values)

    def test_round_off_negatives_clipped(self) -> None:
        values = np.zeros(self.grid.n_cells)
        values[10] = -1e-15
        self.assertEqual(DensityField(self.grid, values).values[10], 0.0)

    def test_values_are_read_only(self) -> None:
        d = zero_density(self.grid)
        with self.assertRaises(ValueError):
            d.values[0] = 1.0

    def test_normalized(self) -> None:
        """Small deficits are rescaled, large ones rejected."""
        d = gaussian(self.grid)
        self.assertAlmostEqual(normalized(d.scaled(1 - 1e-8)).mass, 1.0, places=14)
        with self.assertRaises(ParameterError):
            normalized(d.scaled(0.9))

    def test_tail_and_below_threshold(self) -> None:
        d = gaussian(self.grid, mean=0.5, sd=0.5)
        inside = norm.cdf(3.0, 0.5, 0.5) - norm.cdf(-4.0, 0.5, 0.5)
        expected = (norm.cdf(3.0, 0.5, 0.5) - norm.cdf(1.0, 0.5, 0.5)) / inside
        self.assertAlmostEqual(d.tail_mass, expected, places=10)
        below = d.below_threshold()
        self.assertEqual(below.tail_mass, 0.0)
        self.assertAlmostEqual(below.mass + d.tail_mass, d.mass, places=13)

    def test_distances(self) -> None:
        d = gaussian(self.grid)
        e = gaussian(self.grid, mean=0.1)
        self.assertEqual(d.l1_distance(d), 0.0)
        self.assertGreater(d.l1_distance(e), 0.0)
        self.assertLessEqual(d.l1_distance(e), 2.0)
        other = make_grid(DESK, -4.0, 3.0, 0.02)
        with self.assertRaises(ParameterError):
            d.l2_distance(gaussian(other))


class TestMoments(unittest.TestCase):

    @settings(max_examples=40, deadline=None)
    @given(mean=st.floats(-2.0, 2.0), sd=st.floats(0.05, 1.0))
    def test_cauchy_schwarz(self, mean, sd) -> None:
        """second_moment * mass >= mean^2 for every density."""
        grid = make_grid(DESK, -4.0, 3.0, 0.02)
        m = moments(gaussian(grid, mean, sd), DESK)
        self.assertGreaterEqual(m.second_moment * m.mass, m.mean ** 2 * (1 - 1e-12))
        self.assertGreaterEqual(m.tail_mass_M, 0.0)
        self.assertLessEqual(m.tail_mass_M, m.mass + 1e-12)

    def test_gaussian_moments(self) -> None:
        grid = make_grid(DESK, -4.0, 3.0, 0.005)
        m = moments(gaussian(grid, 0.2, 0.3), DESK)
        self.assertAlmostEqual(m.mean, 0.2, places=5)
        self.assertAlmostEqual(m.second_moment, 0.2 ** 2 + 0.3 ** 2, places=4)
        self.assertAlmostEqual(m.l2, 1.0 / (2 * 0.3 * math.sqrt(math.pi)), places=4)


class TestPlateau(unittest.TestCase):

    def test_plateau_shape(self) -> None:
        """1/b on [V_R, V_F], tail mass 1 - (V_F - V_R)/b."""
        params = ModelParams(1.0, 2.0, 0.0, 1.0)
        grid = make_grid(params, -1.0, 16.0, 0.005)
        d = plateau_steady_state(params, grid)
        self.assertTrue(np.allclose(d.values[grid.idx_VR:grid.idx_VF], 0.5))
        self.assertEqual(plateau_tail_mass(params), 0.5)
        self.assertAlmostEqual(d.tail_mass, 0.5 * (1 - math.exp(-15.0)), places=12)
        self.assertAlmostEqual(d.mass, 1.0, delta=1e-6)

    def test_critical_plateau_has_no_tail(self) -> None:
        params = ModelParams(1.0, 1.0, 0.0, 1.0)
        grid = make_grid(params, -1.0, 2.0, 0.01)
        self.assertEqual(plateau_steady_state(params, grid).tail_mass, 0.0)

    def test_subcritical_b_rejected(self) -> None:
        params = ModelParams(1.0, 0.5, 0.0, 1.0)
        with self.assertRaises(ParameterError):
            plateau_steady_state(params, make_grid(params, -1.0, 2.0, 0.01))


if __name__ == "__main__":
    unittest.main()
