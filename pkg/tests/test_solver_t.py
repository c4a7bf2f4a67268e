"""
Tests for the original-timescale solver, its linear companions, the
externally driven p_bar run and the timescale roundtrip.

    pytest tests/test_solver_t.py -v
"""
from __future__ import annotations

import unittest
from pathlib import Path
from tempfile import TemporaryDirectory

import numpy as np
from scipy.stats import norm

from lib.errors import ParameterError, StepError
from lib.green import RateInput
from lib.model import ModelParams, make_grid, project_density
from lib.solver_t import TSettings, firing_lower_bound, run_pbar, run_t, timescale_roundtrip
from lib.solver_tau import run_tau
from lib.utils import setup_logging

setup_logging()

PARAMS = ModelParams(a=1.0, b=0.3, V_R=0.0, V_F=1.0, eps=0.1)


def gaussian(grid, mean=0.0, sd=0.4):
    return project_density(grid, lambda v: norm.pdf(v, mean, sd), cdf=lambda v: norm.cdf(v, mean, sd))


class TestRunT(unittest.TestCase):

    @classmethod
    def setUpClass(cls) -> None:
        cls.grid = make_grid(PARAMS, -4.0, 3.0, 0.02)
        cls.init = gaussian(cls.grid, mean=0.5, sd=0.4)
        cls.traj = run_t(PARAMS, cls.init, 0.5, sample_every=0.05, with_auxiliaries=True)

    def setUp(self) -> None:
        self.temp_dir = TemporaryDirectory()
        self.output = Path(self.temp_dir.name)

    def tearDown(self) -> None:
        self.temp_dir.cleanup()

    def test_mass_conserved(self) -> None:
        self.assertEqual(len(self.traj), 11)
        self.assertLess(np.max(np.abs(self.traj.mass - 1.0)), 1e-10)

    def test_firing_rate_matches_tail(self) -> None:
        np.testing.assert_allclose(self.traj.N, self.traj.M / PARAMS.eps, rtol=1e-12)
        self.assertTrue(np.all(np.diff(self.traj.int_N) > 0))

    def test_auxiliary_split(self) -> None:
        """p_not + p_spike reproduces p, with p_not <= p and p_spike <= p_bar."""
        self.assertTrue(self.traj.has_auxiliaries)
        self.assertLess(self.traj.split_l1.max(), 1e-10)
        self.assertLess(self.traj.not_excess.max(), 1e-12)
        self.assertLess(self.traj.spike_excess.max(), 1e-12)
        np.testing.assert_allclose(self.traj.mass_not + self.traj.mass_spike, self.traj.mass, atol=1e-10)

    def test_companion_masses(self) -> None:
        """p_bar never absorbs, so its mass is the total fired mass."""
        np.testing.assert_allclose(self.traj.mass_bar, self.traj.int_N, atol=1e-10)
        self.assertTrue(np.all(np.diff(self.traj.mass_not) <= 1e-15))
        self.assertAlmostEqual(self.traj.fired_not[-1], 1.0 - self.traj.mass_not[-1], places=10)

    def test_csv_outputs(self) -> None:
        header = self.traj.to_csv(self.output / "t.csv").read_text().splitlines()[0]
        self.assertEqual(header, "t,N,mass,mean,second_moment,l2,M,int_N")
        aux = self.traj.auxiliaries_to_csv(self.output / "aux.csv").read_text().splitlines()
        self.assertEqual(len(aux), len(self.traj) + 1)
        plain = run_t(PARAMS, self.init, 0.05)
        self.assertFalse(plain.has_auxiliaries)
        with self.assertRaises(ParameterError):
            plain.auxiliaries_to_csv(self.output / "none.csv")

    def test_argument_validation(self) -> None:
        for kwargs in (dict(t_end=0.0), dict(t_end=1.0, dt=0.0), dict(t_end=1.0, sample_every=-1.0)):
            with self.subTest(**kwargs):
                with self.assertRaises(ParameterError):
                    run_t(PARAMS, self.init, **kwargs)
        with self.assertRaises(StepError):
            run_t(PARAMS, self.init, 0.5, dt=1.0, sample_every=0.5)
        with self.assertRaises(StepError):
            run_t(PARAMS, self.init, 0.5, settings=TSettings(max_steps=2))

    def test_firing_lower_bound(self) -> None:
        bound = firing_lower_bound(self.traj, 0.5)
        self.assertTrue(bound.bounded)
        self.assertLess(bound.window, 0.5)
        with self.assertRaises(ParameterError):
            firing_lower_bound(self.traj, 0.6)


class TestPbar(unittest.TestCase):

    def setUp(self) -> None:
        self.params = ModelParams(a=1.0, b=0.5, V_R=0.0, V_F=1.0)
        self.grid = make_grid(self.params, -6.0, 6.0, 0.05)

    def test_mass_is_integrated_rate(self) -> None:
        """Zero data, no absorption: the mass equals int_0^t N exactly."""
        rates = (RateInput.constant(0.5), RateInput.table([0.0, 0.5, 1.0], [0.0, 1.0, 0.3]),
                 RateInput.inverse_sqrt(0.5, 1.5))
        for rate in rates:
            with self.subTest(kind=rate.kind):
                result = run_pbar(self.params, self.grid, rate, 1.0, sample_every=0.25)
                np.testing.assert_allclose(result.mass, result.int_N, atol=1e-12)
                self.assertAlmostEqual(result.final.mass, rate.integral(0.0, 1.0), places=12)
                self.assertGreater(result.growth_constant, 0.0)

    def test_zero_rate(self) -> None:
        result = run_pbar(self.params, self.grid, RateInput.zero(), 0.5)
        self.assertEqual(result.final.mass, 0.0)
        self.assertTrue(np.isnan(result.growth_constant))


class TestRoundtrip(unittest.TestCase):

    def test_timescales_compose_to_identity(self) -> None:
        """tau(t(tau)) = tau up to the discretization of both solvers."""
        grid = make_grid(PARAMS, -4.0, 3.0, 0.02)
        init = gaussian(grid, mean=0.5, sd=0.4)
        traj_tau = run_tau(PARAMS, init, 0.5, sample_every=0.01)
        traj_t = run_t(PARAMS, init, 1.05 * float(traj_tau.int_Q[-1]), sample_every=0.005)
        report = timescale_roundtrip(traj_t, traj_tau)
        self.assertGreater(report.common_tau, 0.4)
        self.assertLess(report.relative_composition_error, 0.05)

    def test_parameters_must_match(self) -> None:
        grid = make_grid(PARAMS, -4.0, 3.0, 0.05)
        init = gaussian(grid, mean=0.5)
        traj_tau = run_tau(PARAMS, init, 0.05)
        traj_t = run_t(PARAMS.with_eps(0.2), init, 0.05)
        with self.assertRaises(ParameterError):
            timescale_roundtrip(traj_t, traj_tau)


if __name__ == "__main__":
    unittest.main()
