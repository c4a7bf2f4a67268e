"""
Tests for segment detection, the eps sweep, blow-up chaining and the
measured blow-up interval.

    pytest tests/test_experiments.py -v
"""
from __future__ import annotations

import math
import unittest
from pathlib import Path
from tempfile import TemporaryDirectory

import numpy as np
from scipy.stats import norm

from lib.blowup import BlowupKind
from lib.errors import ParameterError, SweepMemberError
from lib.experiments import (SegmentKind, blowup_threshold, chain_blowups, eps_sweep, measure_blowup_interval,
                             segments)
from lib.model import ModelParams, make_grid, project_density
from lib.solver_tau import TauSettings, TauTrajectory
from lib.utils import setup_logging

setup_logging()

PARAMS = ModelParams(a=1.0, b=0.3, V_R=0.0, V_F=1.0)


def gaussian(grid, mean=0.0, sd=0.4):
    return project_density(grid, lambda v: norm.pdf(v, mean, sd), cdf=lambda v: norm.cdf(v, mean, sd))


class TestSegments(unittest.TestCase):

    def test_threshold(self) -> None:
        self.assertAlmostEqual(blowup_threshold(1e-3), 1e-2)
        self.assertEqual(blowup_threshold(1e-9), 1e-6)

    def test_partition(self) -> None:
        """Segments tile the sampled range and alternate in kind."""
        tau = np.linspace(0.0, 1.0, 11)
        M = np.array([0, 0, 1, 1, 1, 0, 0, 0, 1, 0, 0], dtype=float)
        out = segments(tau, M, 0.5)
        self.assertEqual([s.kind for s in out], [SegmentKind.CLASSICAL, SegmentKind.BLOWUP, SegmentKind.CLASSICAL,
                                                 SegmentKind.BLOWUP, SegmentKind.CLASSICAL])
        self.assertEqual(out[0].start, 0.0)
        self.assertEqual(out[-1].end, 1.0)
        for left, right in zip(out, out[1:]):
            self.assertEqual(left.end, right.start)
        self.assertAlmostEqual(sum(s.length for s in out), 1.0)

    def test_empty(self) -> None:
        self.assertEqual(segments(np.zeros(0), np.zeros(0), 0.1), [])


class TestSweep(unittest.TestCase):

    def setUp(self) -> None:
        self.temp_dir = TemporaryDirectory()
        self.output = Path(self.temp_dir.name)
        self.grid = make_grid(PARAMS, -4.0, 3.0, 0.02)
        self.init = gaussian(self.grid)

    def tearDown(self) -> None:
        self.temp_dir.cleanup()

    def test_small_sweep(self) -> None:
        report = eps_sweep(PARAMS, self.init, (0.1, 0.05), 0.2, sample_every=0.05, threads=2)
        self.assertEqual(report.eps_list, (0.1, 0.05))
        self.assertEqual(len(report.cauchy), 1)
        self.assertEqual(report.tau.size, 5)
        self.assertGreaterEqual(report.bound_spread, 1.0)
        for member in report.members:
            with self.subTest(eps=member.eps):
                self.assertLess(member.qm_error, 1e-10)
                self.assertGreater(member.lifespan, 0.0)
        written = report.write(self.output)
        self.assertTrue(all(path.exists() for path in written))
        self.assertTrue((self.output / "trajectory_eps_0.05.csv").exists())
        self.assertIn("bound_spread", report.to_metrics_dict())

    def test_eps_list_validation(self) -> None:
        for eps_list in ((0.1,), (0.01, 0.1), (0.1, 0.1), (0.1, -0.01)):
            with self.subTest(eps_list=eps_list):
                with self.assertRaises(ParameterError):
                    eps_sweep(PARAMS, self.init, eps_list, 0.1)

    def test_member_failure_is_tagged(self) -> None:
        with self.assertRaises(SweepMemberError) as ctx:
            eps_sweep(PARAMS, self.init, (0.1, 0.05), 0.2, settings=TauSettings(max_steps=1), threads=1)
        self.assertIn(ctx.exception.eps, (0.1, 0.05))


class TestChain(unittest.TestCase):

    def test_supercritical_ends_eternal(self) -> None:
        """A packed profile with b above V_F - V_R never leaves its first blow-up."""
        params = ModelParams(a=1.0, b=1.5, V_R=0.0, V_F=1.0, eps=1e-2)
        grid = make_grid(params, -2.0, 3.0, 0.02)
        result = chain_blowups(gaussian(grid, 0.95, 0.05), params, 2.0)
        self.assertEqual(len(result.events), 1)
        self.assertTrue(result.ended_eternal)
        self.assertEqual(result.tau_reached, 2.0)
        self.assertEqual(result.lifespan, 0.0)

    def test_subcritical_event_is_finite(self) -> None:
        """With b below V_F - V_R the whole unit mass crosses within tau = 1."""
        params = ModelParams(a=1.0, b=0.5, V_R=0.0, V_F=1.0, eps=1e-2)
        grid = make_grid(params, -2.0, 3.0, 0.02)
        result = chain_blowups(gaussian(grid, 0.95, 0.05), params, 0.9)
        self.assertEqual(len(result.events), 1)
        event = result.events[0]
        self.assertEqual(event.classification, BlowupKind.FINITE)
        self.assertAlmostEqual(event.delta_tau, 1.0, places=6)
        self.assertAlmostEqual(event.post_mass, 1.0, places=9)
        self.assertFalse(result.ended_eternal)
        self.assertEqual(result.tau_reached, 0.9)

    def test_inhibitory_runs_plain_solver(self) -> None:
        params = ModelParams(a=1.0, b=-0.5, V_R=0.0, V_F=1.0, eps=0.1)
        grid = make_grid(params, -4.0, 3.0, 0.05)
        result = chain_blowups(gaussian(grid), params, 0.1)
        self.assertEqual(result.events, ())
        self.assertEqual(len(result.trajectories), 1)
        self.assertAlmostEqual(result.tau_reached, 0.1)


class TestMeasuredInterval(unittest.TestCase):

    def trajectory(self, M: np.ndarray) -> TauTrajectory:
        tau = np.linspace(0.0, 1.0, M.size)
        ones = np.ones_like(tau)
        return TauTrajectory(params=PARAMS.with_eps(0.01), tau=tau, Q=ones, int_Q=tau, M=M)

    def test_hat(self) -> None:
        """A tent of M between 0.2 and 0.8 is measured by extrapolating its flanks to zero."""
        tau = np.linspace(0.0, 1.0, 11)
        measured = measure_blowup_interval(self.trajectory(np.maximum(0.0, 0.3 - np.abs(tau - 0.5))), 0.05)
        self.assertAlmostEqual(measured.tau1, 0.2, places=9)
        self.assertAlmostEqual(measured.delta, 0.6, places=9)

    def test_open_ended(self) -> None:
        M = np.array([0.0, 0.0, 0.2, 0.4, 0.6, 0.8])
        self.assertTrue(math.isinf(measure_blowup_interval(self.trajectory(M), 0.1).delta))

    def test_never_above(self) -> None:
        with self.assertRaises(ParameterError):
            measure_blowup_interval(self.trajectory(np.zeros(5)), 0.1)


if __name__ == "__main__":
    unittest.main()
