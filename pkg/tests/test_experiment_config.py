"""
Tests for experiment-file parsing and the CSV/manifest writers.

    pytest tests/test_experiment_config.py -v
"""
from __future__ import annotations

import json
import unittest
from pathlib import Path
from tempfile import TemporaryDirectory
from textwrap import dedent

import numpy as np

from config import DESK_SEED
from helpers.csv_export import (format_float, read_columns, write_columns, write_manifest, write_profile, write_rows,
                                write_summary)
from helpers.experiment_config import parse_config
from lib.errors import ConfigValidationError
from lib.model import ModelParams, make_grid, project_density
from lib.utils import setup_logging

setup_logging()

TAU_CONFIG = """
[model]
a = 1.0
b = 0.3
V_R = 0.0
V_F = 1.0

[grid]
v_min = -4.0
v_max = 3.0
dv = 0.05

[run]
mode = tau
eps = 0.1
tau_end = 0.1
sample_every = 0.05

[init]
kind = gaussian
mean = 0.0
sd = 0.4
"""


class TestParseConfig(unittest.TestCase):

    def setUp(self) -> None:
        self.temp_dir = TemporaryDirectory()
        self.root = Path(self.temp_dir.name)

    def tearDown(self) -> None:
        self.temp_dir.cleanup()

    def write(self, text: str, name: str = "experiment.ini") -> Path:
        path = self.root / name
        path.write_text(dedent(text), encoding="utf-8")
        return path

    def problems(self, text: str) -> list[str]:
        with self.assertRaises(ConfigValidationError) as ctx:
            parse_config(self.write(text))
        return ctx.exception.problems

    def test_valid_tau_config(self) -> None:
        cfg = parse_config(self.write(TAU_CONFIG))
        self.assertEqual(cfg.name, "experiment")
        self.assertEqual(cfg.run.mode, "tau")
        self.assertEqual(cfg.run.seed, DESK_SEED)
        self.assertEqual(cfg.params(), ModelParams(1.0, 0.3, 0.0, 1.0, 0.1))
        self.assertIsNone(cfg.output_directory)
        grid = cfg.build_grid()
        self.assertEqual(grid.n_cells, 140)
        self.assertAlmostEqual(cfg.build_init(grid).mass, 1.0, places=12)
        self.assertEqual(cfg.echo["run"]["mode"], "tau")

    def test_default_bounds(self) -> None:
        cfg = parse_config(self.write(TAU_CONFIG.replace("v_min = -4.0\n", "").replace("v_max = 3.0\n", "")))
        grid = cfg.build_grid()
        self.assertAlmostEqual(grid.v_min, -5.5, places=9)
        self.assertAlmostEqual(grid.v_max, 7.5, places=9)

    def test_with_seed(self) -> None:
        cfg = parse_config(self.write(TAU_CONFIG))
        self.assertIs(cfg.with_seed(None), cfg)
        seeded = cfg.with_seed(7)
        self.assertEqual(seeded.run.seed, 7)
        self.assertEqual(seeded.echo["run"]["seed"], "7")
        self.assertNotIn("seed", cfg.echo["run"])

    def test_all_problems_reported_together(self) -> None:
        text = TAU_CONFIG.replace("eps = 0.1", "eps = -0.1").replace("dv = 0.05", "dv = fine") + "\n[extra]\nkey = 1\n"
        text = text.replace("sd = 0.4", "sd = 0.4\ncolour = red")
        problems = self.problems(text)
        self.assertEqual(len(problems), 4, problems)
        joined = "; ".join(problems)
        for fragment in ("unknown section [extra]", "unknown key 'colour'", "eps must be positive", "dv = 'fine'"):
            self.assertIn(fragment, joined)

    def test_missing_mode_keys(self) -> None:
        problems = self.problems(TAU_CONFIG.replace("tau_end = 0.1\n", ""))
        self.assertEqual(problems, ["[run] mode tau needs 'tau_end'"])
        self.assertIn("is not one of", "; ".join(self.problems(TAU_CONFIG.replace("mode = tau", "mode = fly"))))

    def test_model_preconditions(self) -> None:
        self.assertIn("V_R must be below V_F", "; ".join(self.problems(TAU_CONFIG.replace("V_R = 0.0", "V_R = 2.0"))))
        blowup = TAU_CONFIG.replace("mode = tau", "mode = blowup").replace("b = 0.3", "b = -1.0")
        self.assertEqual(self.problems(blowup), ["[model] mode blowup needs b > 0, got b=-1.0"])

    def test_init_rules(self) -> None:
        uniform = TAU_CONFIG.replace("kind = gaussian\nmean = 0.0\nsd = 0.4", "kind = uniform\nlow = 1.0\nhigh = 0.0")
        self.assertEqual(self.problems(uniform), ["[init] uniform needs low < high"])
        plateau = TAU_CONFIG.replace("kind = gaussian\nmean = 0.0\nsd = 0.4", "kind = plateau")
        self.assertEqual(len(self.problems(plateau)), 1)
        missing = TAU_CONFIG.replace("kind = gaussian\nmean = 0.0\nsd = 0.4", "kind = file\npath = nowhere.csv")
        self.assertIn("file not found", self.problems(missing)[0])

    def test_eps_list_ordering(self) -> None:
        sweep = TAU_CONFIG.replace("mode = tau", "mode = sweep").replace("eps = 0.1", "eps_list = 0.01, 0.1")
        self.assertIn("strictly decreasing", self.problems(sweep)[0])
        cfg = parse_config(self.write(sweep.replace("0.01, 0.1", "0.1, 0.01")))
        self.assertEqual(cfg.run.eps_list, (0.1, 0.01))

    def test_validate_mode_needs_no_model(self) -> None:
        cfg = parse_config(self.write("[run]\nmode = validate\nonly = conservation, toy_problems\n"))
        self.assertIsNone(cfg.model)
        self.assertEqual(cfg.run.only, ("conservation", "toy_problems"))

    def test_missing_file(self) -> None:
        with self.assertRaises(ConfigValidationError) as ctx:
            parse_config(self.root / "absent.ini")
        self.assertIn("config file not found", str(ctx.exception))

    def test_init_from_file(self) -> None:
        """A v,n profile written by the exporter is read back as initial data."""
        params = ModelParams(1.0, 0.3, 0.0, 1.0)
        grid = make_grid(params, -4.0, 3.0, 0.05)
        source = project_density(grid, lambda v: np.exp(-v ** 2))
        write_profile(self.root / "profile.csv", source)
        text = TAU_CONFIG.replace("kind = gaussian\nmean = 0.0\nsd = 0.4", "kind = file\npath = profile.csv")
        cfg = parse_config(self.write(text))
        self.assertEqual(cfg.init.path, (self.root / "profile.csv").resolve())
        loaded = cfg.build_init(cfg.build_grid())
        self.assertAlmostEqual(loaded.mass, 1.0, places=12)
        self.assertLess(loaded.l1_distance(source), 0.01)

    def test_init_from_quoted_export(self) -> None:
        """Spreadsheet exports quote the header and may start with a BOM."""
        v = np.linspace(-3.0, 2.0, 101)
        rows = "".join(f"{format_float(x)},{format_float(np.exp(-x ** 2))}\n" for x in v)
        (self.root / "export.csv").write_text('\ufeff"v","n"\n' + rows, encoding="utf-8")
        text = TAU_CONFIG.replace("kind = gaussian\nmean = 0.0\nsd = 0.4", "kind = file\npath = export.csv")
        cfg = parse_config(self.write(text))
        loaded = cfg.build_init(cfg.build_grid())
        self.assertAlmostEqual(loaded.mass, 1.0, places=12)
        self.assertGreater(loaded.values[np.argmin(np.abs(loaded.grid.centers))], 0.5)

    def test_output_directory_is_relative_to_file(self) -> None:
        cfg = parse_config(self.write(TAU_CONFIG + "\n[output]\ndirectory = out/tau\n"))
        self.assertEqual(cfg.output_directory, (self.root / "out" / "tau").resolve())


class TestCsvExport(unittest.TestCase):

    def setUp(self) -> None:
        self.temp_dir = TemporaryDirectory()
        self.root = Path(self.temp_dir.name)

    def tearDown(self) -> None:
        self.temp_dir.cleanup()

    def test_floats_read_back_exactly(self) -> None:
        values = np.array([0.1, 1.0 / 3.0, 2.0 ** -40, 1e300, -7.25])
        for x in values:
            self.assertEqual(float(format_float(x)), x)
        columns = read_columns(write_columns(self.root / "x.csv", {"x": values, "gap": None}))
        np.testing.assert_array_equal(columns["x"], values)
        self.assertTrue(np.all(np.isnan(columns["gap"])))

    def test_cells(self) -> None:
        lines = write_rows(self.root / "rows.csv", ["name", "flag", "count", "value"],
                           [("a", True, 3, 0.5), ("b", np.bool_(False), np.int64(4), 2.0)]).read_text().splitlines()
        self.assertEqual(lines, ["name,flag,count,value", "a,1,3,0.5", "b,0,4,2"])

    def test_quoted_header_and_blank_fields(self) -> None:
        (self.root / "quoted.csv").write_text('\ufeff"t","N"\n0.0,1.5\n0.5,\n', encoding="utf-8")
        columns = read_columns(self.root / "quoted.csv")
        self.assertEqual(list(columns), ["t", "N"])
        np.testing.assert_array_equal(columns["t"], [0.0, 0.5])
        self.assertEqual(columns["N"][0], 1.5)
        self.assertTrue(np.isnan(columns["N"][1]))

    def test_read_errors(self) -> None:
        (self.root / "short.csv").write_text("v,n\n")
        (self.root / "ragged.csv").write_text("v,n\n1,2,3\n")
        (self.root / "text.csv").write_text("v,n\n1,x\n")
        for name in ("missing.csv", "short.csv", "ragged.csv", "text.csv"):
            with self.subTest(name=name):
                with self.assertRaises(ConfigValidationError):
                    read_columns(self.root / name)

    def test_manifest_and_summary(self) -> None:
        manifest = json.loads(write_manifest(self.root / "m.json", {"seed": 1, "mode": "tau"}).read_text())
        self.assertEqual(manifest, {"mode": "tau", "seed": 1})
        lines = write_summary(self.root / "s.txt", "tau run", {"eps": "0.1"}).read_text().splitlines()
        self.assertEqual(lines[:2], ["tau run", "======="])
        self.assertTrue(lines[2].startswith("eps"))


if __name__ == "__main__":
    unittest.main()
