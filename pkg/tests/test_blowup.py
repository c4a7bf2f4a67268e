"""
Tests for the blow-up analytics: interval length, classification, the
post-blow-up profile and the effective dynamics inside an interval.

    pytest tests/test_blowup.py -v
"""
from __future__ import annotations

import math
import unittest
from pathlib import Path
from tempfile import TemporaryDirectory

import numpy as np
from hypothesis import given, settings, strategies as st

from lib.blowup import (BlowupKind, analyze, analyze_state, blowup_interval, dirichlet_loss_check, effective_evolve,
                        events_to_csv, m_of_delta, post_profile)
from lib.errors import ParameterError, PreconditionError
from lib.model import DensityField, ModelParams, make_grid
from lib.utils import setup_logging

setup_logging()

PARAMS = ModelParams(a=1.0, b=1.0, V_R=0.0, V_F=1.0)
GRID = make_grid(PARAMS, -1.0, 2.0, 0.01)


def step_profile() -> DensityField:
    """0.8 spread on [-1, -0.5] and 0.2 packed into [0.9, 1] at height 2."""
    c = GRID.centers
    values = np.where(c < -0.5, 1.6, 0.0) + np.where((c > 0.9) & (c < 1.0), 2.0, 0.0)
    return DensityField(GRID, values)


def far_left_profile() -> DensityField:
    c = GRID.centers
    return DensityField(GRID, np.where(c < -0.5, 2.0, 0.0))


class TestInterval(unittest.TestCase):

    def test_step_profile(self) -> None:
        """M rises at rate 1 until the packed block is through, then falls: zero at 0.2."""
        n_pre = step_profile()
        self.assertAlmostEqual(m_of_delta(n_pre, 0.1, PARAMS), 0.1, places=12)
        self.assertAlmostEqual(blowup_interval(n_pre, PARAMS), 0.2, places=9)
        event = analyze(n_pre, PARAMS, tau1=3.0)
        self.assertEqual(event.classification, BlowupKind.FINITE)
        self.assertAlmostEqual(event.tau2, 3.2, places=9)
        self.assertFalse(event.trivial)

    def test_vectorized_m(self) -> None:
        deltas = np.array([0.0, 0.05, 0.1, 0.2, 0.5])
        np.testing.assert_allclose(m_of_delta(step_profile(), deltas, PARAMS), [0.0, 0.05, 0.1, 0.0, -0.3], atol=1e-12)
        with self.assertRaises(ParameterError):
            m_of_delta(step_profile(), -0.1, PARAMS)

    def test_eternal(self) -> None:
        """Density 1 on [V_R, V_F] with b = 2 keeps M = delta until the ramp takes over."""
        params = ModelParams(a=1.0, b=2.0, V_R=0.0, V_F=1.0)
        grid = make_grid(params, -1.0, 2.0, 0.01)
        values = np.zeros(grid.n_cells)
        values[grid.idx_VR:grid.idx_VF] = 1.0
        event = analyze(DensityField(grid, values), params)
        self.assertTrue(math.isinf(event.delta_tau))
        self.assertEqual(event.classification, BlowupKind.ETERNAL)
        self.assertIsNone(event.n_post)
        self.assertTrue(math.isnan(event.post_mass))

    def test_trivial(self) -> None:
        """Nothing near V_F: no super-threshold mass builds up."""
        event = analyze(far_left_profile(), PARAMS)
        self.assertEqual(event.delta_tau, 0.0)
        self.assertTrue(event.trivial)
        self.assertIs(event.n_post, event.n_pre)

    def test_preconditions(self) -> None:
        values = np.array(step_profile().values)
        values[GRID.idx_VF + 3] = 1.0
        with_tail = DensityField(GRID, values)
        with self.assertRaises(PreconditionError):
            blowup_interval(with_tail, PARAMS)
        with self.assertRaises(ParameterError):
            blowup_interval(step_profile(), ModelParams(1.0, -0.5, 0.0, 1.0))

    def test_state_with_tail_mass(self) -> None:
        """Mass already above V_F enters as an offset and lengthens the interval."""
        values = np.array(step_profile().values) * 0.95
        values[GRID.idx_VF + 3] = 0.05 / GRID.dv
        event = analyze_state(DensityField(GRID, values), PARAMS)
        self.assertAlmostEqual(event.offset, 0.05, places=12)
        self.assertAlmostEqual(event.delta_tau, 0.95 * 0.2 + 0.05, places=9)
        self.assertAlmostEqual(event.post_mass, 1.0, places=10)

    @settings(max_examples=40, deadline=None)
    @given(b=st.floats(0.1, 0.95), seed=st.integers(0, 10_000))
    def test_subcritical_intervals_are_short(self, b, seed) -> None:
        """With b below V_F - V_R every unit-mass profile ends its blow-up within one unit of tau."""
        params = ModelParams(a=1.0, b=b, V_R=0.0, V_F=1.0)
        grid = make_grid(params, -1.0, 2.0, 0.02)
        values = np.zeros(grid.n_cells)
        values[:grid.idx_VF] = np.random.default_rng(seed).random(grid.idx_VF)
        n_pre = DensityField(grid, values / (values.sum() * grid.dv))
        event = analyze(n_pre, params)
        self.assertEqual(event.classification, BlowupKind.FINITE)
        self.assertLessEqual(event.delta_tau, 1.0 + 1e-9)
        self.assertAlmostEqual(event.post_mass, 1.0, places=9)


class TestPostProfile(unittest.TestCase):

    def test_shifted_profile_and_ramp(self) -> None:
        """The left block moves by b*delta and the reset ramp fills [V_R, V_R + b*delta]."""
        n_post = post_profile(step_profile(), 0.2, PARAMS)
        c = GRID.centers
        self.assertAlmostEqual(n_post.mass, 1.0, places=10)
        self.assertEqual(n_post.tail_mass, 0.0)
        np.testing.assert_allclose(n_post.values[(c > -0.8) & (c < -0.3)], 1.6, rtol=1e-9)
        np.testing.assert_allclose(n_post.values[(c > 0.0) & (c < 0.2)], 1.0, rtol=1e-9)

    def test_rejects_infinite_interval(self) -> None:
        with self.assertRaises(ParameterError):
            post_profile(step_profile(), math.inf, PARAMS)

    def test_events_csv(self) -> None:
        with TemporaryDirectory() as tmp:
            events = [analyze(step_profile(), PARAMS, 1.0), analyze(far_left_profile(), PARAMS, 2.0)]
            lines = events_to_csv(events, Path(tmp) / "events.csv").read_text().splitlines()
        self.assertEqual(lines[0], "tau1,delta_tau,classification,post_mass")
        self.assertEqual(len(lines), 3)
        self.assertIn("finite", lines[1])


class TestEffectiveDynamics(unittest.TestCase):

    def test_dm_follows_trace(self) -> None:
        """dM/ddelta = b n(V_F-) - 1 across the interval."""
        length = blowup_interval(step_profile(), PARAMS)
        evolution = effective_evolve(step_profile(), length, PARAMS, n_samples=41)
        self.assertLess(evolution.dM_residual, 1e-9)
        self.assertAlmostEqual(float(evolution.M.max()), 0.1, places=9)
        self.assertEqual(len(evolution.profiles), 41)
        self.assertAlmostEqual(evolution.trace[1], 2.0)

    def test_span_must_fit_the_interval(self) -> None:
        with self.assertRaises(ParameterError):
            effective_evolve(step_profile(), 0.3, PARAMS)
        with self.assertRaises(ParameterError):
            effective_evolve(step_profile(), 0.1, PARAMS, n_samples=1)

    def test_dirichlet_loss(self) -> None:
        """Density 2 at V_F- keeps the flux ratio at 2; an empty neighbourhood fails."""
        deltas = (GRID.dv, 2 * GRID.dv, 4 * GRID.dv)
        report = dirichlet_loss_check(step_profile(), PARAMS, deltas)
        self.assertTrue(report.passed)
        np.testing.assert_allclose(report.ratios, 2.0, rtol=1e-9)
        self.assertFalse(dirichlet_loss_check(far_left_profile(), PARAMS, deltas).passed)
        with self.assertRaises(ParameterError):
            dirichlet_loss_check(step_profile(), PARAMS, ())


if __name__ == "__main__":
    unittest.main()
