"""
Tests for the finite-volume kernels: conservation, positivity and the CFL guard.

    pytest tests/test_fv_scheme.py -v
"""
from __future__ import annotations

import unittest

import numpy as np
from hypothesis import given, settings, strategies as st

from lib.errors import SchemeError, StepError
from lib.fv_scheme import (Transport, advect_upwind, check_cfl, clean_negatives, deposit, diffuse_implicit,
                           drift_at_interfaces, max_stable_step, remove_from_tail, tail_sum)
from lib.model import ModelParams, make_grid
from lib.utils import setup_logging

setup_logging()

PARAMS = ModelParams(a=1.0, b=0.5, V_R=0.0, V_F=1.0)


class TestKernels(unittest.TestCase):

    def setUp(self) -> None:
        self.grid = make_grid(PARAMS, -4.0, 3.0, 0.02)
        rng = np.random.default_rng(3)
        self.values = rng.random(self.grid.n_cells)

    def test_boundary_interfaces_carry_no_flux(self) -> None:
        velocity = drift_at_interfaces(self.grid, 1.0, 0.7)
        self.assertEqual(velocity[0], 0.0)
        self.assertEqual(velocity[-1], 0.0)
        self.assertAlmostEqual(velocity[1], 0.7 - self.grid.interface(1), places=12)

    def test_upwind_conserves_mass(self) -> None:
        velocity = drift_at_interfaces(self.grid, 1.0, 0.7)
        dt = 0.9 * max_stable_step(self.grid, 1.0, 0.7)
        out = advect_upwind(self.values, velocity, dt, self.grid.dv)
        self.assertAlmostEqual(out.sum(), self.values.sum(), places=10)
        self.assertGreaterEqual(out.min(), 0.0)

    def test_implicit_diffusion_conserves_mass(self) -> None:
        """Column sums of the zero-flux matrix are one."""
        for ratio in (0.0, 0.5, 40.0):
            with self.subTest(ratio=ratio):
                out = diffuse_implicit(self.values, ratio)
                self.assertAlmostEqual(out.sum(), self.values.sum(), places=9)
                self.assertGreaterEqual(out.min(), 0.0)

    def test_diffusion_smooths_a_spike(self) -> None:
        spike = np.zeros(self.grid.n_cells)
        spike[100] = 1.0
        out = diffuse_implicit(spike, 2.0)
        self.assertLess(out.max(), 1.0)
        self.assertEqual(int(np.argmax(out)), 100)

    def test_cfl_guard(self) -> None:
        limit = max_stable_step(self.grid, 1.0, 2.0)
        check_cfl(self.grid, limit, 1.0, 2.0, "test")
        with self.assertRaises(StepError):
            check_cfl(self.grid, 1.01 * limit, 1.0, 2.0, "test")
        with self.assertRaises(StepError):
            check_cfl(self.grid, 0.0, 1.0, 2.0, "test")

    def test_pure_diffusion_has_no_cfl_limit(self) -> None:
        self.assertEqual(max_stable_step(self.grid, 0.0, 0.0), np.inf)

    def test_remove_and_deposit(self) -> None:
        """Mass taken from the tail and deposited at V_R leaves the total unchanged."""
        values = self.values.copy()
        total = values.sum() * self.grid.dv
        tail = tail_sum(values, self.grid.idx_VF, self.grid.dv)
        removed = remove_from_tail(values, self.grid.idx_VF, self.grid.dv, 0.25)
        self.assertAlmostEqual(removed, 0.25 * tail, places=12)
        deposit(values, self.grid.idx_VR, removed, self.grid.dv)
        self.assertAlmostEqual(values.sum() * self.grid.dv, total, places=12)

    def test_clean_negatives(self) -> None:
        values = np.array([1.0, -1e-16, 0.5])
        self.assertEqual(clean_negatives(values, "test")[1], 0.0)
        with self.assertRaises(SchemeError):
            clean_negatives(np.array([1.0, -1e-6]), "test")


class TestTransport(unittest.TestCase):

    @settings(max_examples=40, deadline=None)
    @given(
        scale=st.floats(0.0, 2.0),
        shift=st.floats(-3.0, 3.0),
        diffusion=st.floats(0.0, 1.0),
        courant=st.floats(0.05, 1.0),
        seed=st.integers(0, 1000),
    )
    def test_step_is_conservative_and_positive(self, scale, shift, diffusion, courant, seed) -> None:
        """Any transport step under CFL keeps mass and nonnegativity."""
        grid = make_grid(PARAMS, -2.0, 2.0, 0.05)
        values = np.random.default_rng(seed).random(grid.n_cells)
        limit = max_stable_step(grid, scale, shift)
        dt = 0.01 if np.isinf(limit) else courant * limit
        out = Transport(scale, shift, diffusion).apply(values, grid, dt, "test")
        self.assertAlmostEqual(out.sum() / values.sum(), 1.0, places=10)
        self.assertGreaterEqual(out.min(), 0.0)


if __name__ == "__main__":
    unittest.main()
