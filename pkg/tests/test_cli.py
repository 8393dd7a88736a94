"""End-to-end tests of the configuration layer, the report and the command line."""
import json
import os
import sys
import tempfile
import unittest
from pathlib import Path

import pandas as pd

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config_ops import SNAPSHOT_NAME, config_from_dict, load_config
from errors import ConfigError, MissingInputError
from main import main
from report_ops import BUDGET_FILE, FIT_FILE, REPORT_FILE, cmd_report, write_budget_inputs

PERIOD_M = 670.962e-9 / 2.0


class TestConfig(unittest.TestCase):

    def test_unknown_key_rejected(self):
        with self.assertRaises(ConfigError):
            config_from_dict({"beam": {"sped_mps": 1000.0}})
        with self.assertRaises(ConfigError):
            config_from_dict({"gratings": [{"power_w": 0.04}]})

    def test_resolved_defaults(self):
        cfg = config_from_dict()
        self.assertAlmostEqual(cfg.value("beam.mean_speed_mps"), 1045.0, delta=10.0)
        self.assertAlmostEqual(cfg.value("gratings.1.theta_y_urad"), 80.7, delta=1.0)
        self.assertIsNotNone(cfg.value("bragg.coupling_scale"))
        self.assertAlmostEqual(cfg.value("detector.slit_x_um"), 98.0, delta=6.0)
        self.assertEqual(cfg.value("detector.slit_width_um"), cfg.value("geometry.detector_slit_width_um"))

    def test_bad_values(self):
        with self.assertRaises(ConfigError):
            config_from_dict({"species": [{"abundance": 0.5}, {"abundance": 0.6}]})
        with self.assertRaises(ConfigError):
            config_from_dict(overrides={"bragg.model": "three-level"})
        with self.assertRaises(ConfigError):
            config_from_dict(overrides={"geometry.mirror_z_mm": [1410.0, 2015.0, 2700.0]})

    def test_one_based_paths(self):
        cfg = config_from_dict()
        changed = cfg.with_value("gratings.2.power_mw", 55.0)
        self.assertEqual(changed.value("gratings.2.power_mw"), 55.0)
        self.assertAlmostEqual(changed.interferometer.gratings[1].power_w, 0.055)
        self.assertEqual(cfg.value("gratings.2.power_mw"), 80.0)
        for bad in ("gratings.0.power_mw", "gratings.4.power_mw", "gratings.two.power_mw", "beam.nope"):
            with self.assertRaises(ConfigError):
                cfg.value(bad)

    def test_auto_values_follow_their_inputs(self):
        cfg = config_from_dict()
        hot = cfg.with_value("beam.temperature_k", 4200.0)
        speed_ratio = hot.value("beam.mean_speed_mps") / cfg.value("beam.mean_speed_mps")
        print("\n[Test Config] 4x temperature scales v0 by %.4f" % speed_ratio)
        self.assertAlmostEqual(speed_ratio, 2.0, delta=1e-9)
        self.assertAlmostEqual(hot.value("gratings.2.theta_y_urad") / cfg.value("gratings.2.theta_y_urad"),
                               0.5, delta=1e-6)
        self.assertAlmostEqual(hot.value("detector.slit_x_um") / cfg.value("detector.slit_x_um"), 0.5, delta=1e-6)
        self.assertEqual(hot.value("bragg.coupling_scale"), cfg.value("bragg.coupling_scale"))
        self.assertIn("gratings.2.theta_y_urad", hot.auto)

    def test_explicit_values_stay_put(self):
        cfg = config_from_dict(overrides={"gratings.2.theta_y_urad": 90.0})
        hot = cfg.with_value("beam.temperature_k", 4200.0)
        self.assertEqual(hot.value("gratings.2.theta_y_urad"), 90.0)
        self.assertNotEqual(hot.value("gratings.1.theta_y_urad"), cfg.value("gratings.1.theta_y_urad"))

        pinned = config_from_dict().with_value("gratings.3.theta_y_urad", 70.0)
        self.assertNotIn("gratings.3.theta_y_urad", pinned.auto)
        self.assertEqual(pinned.with_value("beam.temperature_k", 2000.0).value("gratings.3.theta_y_urad"), 70.0)

        fixed_speed = config_from_dict(overrides={"beam.mean_speed_mps": 1000.0})
        self.assertEqual(fixed_speed.with_value("beam.temperature_k", 4200.0).value("beam.mean_speed_mps"), 1000.0)

    def test_snapshot_reloads_to_the_same_config(self):
        cfg = config_from_dict(overrides={"run.seed": 7, "gratings.1.theta_z_urad": 12.5})
        with tempfile.TemporaryDirectory() as tmp:
            path = cfg.save_snapshot(tmp)
            self.assertEqual(path.name, SNAPSHOT_NAME)
            again = load_config(path)
        self.assertEqual(again, cfg)
        self.assertEqual(again.seed, 7)
        self.assertEqual(again.auto, frozenset())

    def test_example_config_loads(self):
        root = Path(__file__).resolve().parent.parent
        cfg = load_config(root / "example_config.json")
        self.assertEqual(cfg.threads, 4)
        self.assertAlmostEqual(cfg.interferometer.phase_sigma_rad, 0.63)

    def test_missing_config_file(self):
        with self.assertRaises(ConfigError):
            load_config("/nonexistent/run.json")


class TestReport(unittest.TestCase):

    def _write_fit(self, run_dir, contrast=0.74):
        pd.DataFrame([{"contrast": contrast, "sigma_contrast": 0.01, "mean_rate_hz": 1.4e4,
                       "background_hz": 3370.0}]).to_csv(Path(run_dir) / FIT_FILE, index=False)

    def test_missing_inputs(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(MissingInputError) as ctx:
                cmd_report(tmp)
            self.assertEqual(ctx.exception.missing, [BUDGET_FILE, FIT_FILE])
            self.assertEqual(main(["report", tmp]), 3)

    def test_budget_product(self):
        with tempfile.TemporaryDirectory() as tmp:
            write_budget_inputs(tmp, 0.90, 1.0, 0.82, 0.9984)
            self._write_fit(tmp)
            text = cmd_report(tmp)
            lines = dict(line.split(" = ") for line in text.splitlines())
            self.assertEqual(lines["predicted_contrast"], "0.736819")
            self.assertEqual(lines["contrast_after_dispersion"], "0.738")
            self.assertEqual(lines["measured_contrast"], "0.74")
            self.assertAlmostEqual(float(lines["wavefront_rms_waves"]), 0.10027, delta=1e-5)
            self.assertAlmostEqual(float(lines["measured_minus_predicted"]), 0.74 - 0.736819, places=5)
            first = (Path(tmp) / REPORT_FILE).read_bytes()
            cmd_report(tmp)
            self.assertEqual((Path(tmp) / REPORT_FILE).read_bytes(), first)


class TestCommandLine(unittest.TestCase):

    def test_optimize_budget_below_minimum(self):
        with tempfile.TemporaryDirectory() as tmp:
            code = main(["optimize", "--param", "gratings.1.power_mw:5:75", "--budget", "0", "--out", tmp])
            self.assertEqual(code, 2)

    def test_bad_config_exit_code(self):
        with tempfile.TemporaryDirectory() as tmp:
            cfg = Path(tmp) / "run.json"
            cfg.write_text(json.dumps({"detector": {"efficency": 0.4}}), encoding="utf-8")
            self.assertEqual(main(["diffract", "--config", str(cfg), "--out", tmp]), 2)

    def test_diffract_is_reproducible(self):
        with tempfile.TemporaryDirectory() as tmp:
            runs = [Path(tmp) / "a", Path(tmp) / "b"]
            for out in runs:
                self.assertEqual(main(["diffract", "--samples", "2000", "--seed", "3", "--out", str(out)]), 0)
            first, second = ((out / "diffraction_profile.csv").read_bytes() for out in runs)
            self.assertEqual(first, second)
            summary = (runs[0] / "diffraction_summary.txt").read_text(encoding="utf-8")
            self.assertIn("n_peaks = 2", summary)
            self.assertTrue((runs[0] / SNAPSHOT_NAME).is_file())

    def test_scan_writes_curve(self):
        with tempfile.TemporaryDirectory() as tmp:
            code = main(["scan", "--param", "gratings.3.x_nm", "--values", "0", "80", "160",
                         "--metric", "port_rate", "--samples", "500", "--out", tmp])
            self.assertEqual(code, 0)
            df = pd.read_csv(Path(tmp) / "scan.csv")
            self.assertEqual(list(df["param_value"]), [0.0, 80.0, 160.0])

    def test_fringes_then_report(self):
        with tempfile.TemporaryDirectory() as tmp:
            cfg = Path(tmp) / "run.json"
            cfg.write_text(json.dumps({"fringes": {"duration_s": 100.0}}), encoding="utf-8")
            out = Path(tmp) / "run"
            code = main(["fringes", "--config", str(cfg), "--samples", "4000", "--seed", "2", "--out", str(out)])
            self.assertEqual(code, 0)
            for name in ("fringe_scan.csv", "counts.csv", "fringe_fit.csv", "fringe_fit.txt",
                         BUDGET_FILE, SNAPSHOT_NAME):
                self.assertTrue((out / name).is_file(), name)

            fit = pd.read_csv(out / FIT_FILE).iloc[0]
            print("\n[Test Fringes] fitted C = %.4f, expected %.4f, period %.1f nm"
                  % (fit["contrast"], fit["expected_contrast"], fit["fringe_period_m"] * 1e9))
            self.assertAlmostEqual(fit["fringe_period_m"] / PERIOD_M, 1.0, delta=0.01)
            self.assertAlmostEqual(fit["contrast"], fit["expected_contrast"], delta=0.04)

            counts = pd.read_csv(out / "counts.csv")
            self.assertEqual(len(counts), 1100)
            self.assertEqual(int((counts["beam_on"] == 0).sum()), 100)

            self.assertEqual(main(["report", str(out)]), 0)
            report = (out / REPORT_FILE).read_text(encoding="utf-8")
            self.assertIn("predicted_contrast = ", report)
            self.assertIn("measured_contrast = ", report)

    def test_example_config_fringe_contrast(self):
        root = Path(__file__).resolve().parent.parent
        with tempfile.TemporaryDirectory() as tmp:
            code = main(["fringes", "--config", str(root / "example_config.json"), "--samples", "4000",
                         "--out", tmp])
            self.assertEqual(code, 0)
            fit = pd.read_csv(Path(tmp) / FIT_FILE).iloc[0]
        print("\n[Test Fringes] example config: C = %.4f" % fit["contrast"])
        self.assertGreaterEqual(fit["contrast"], 0.70)
        self.assertLessEqual(fit["contrast"], 0.78)

    def test_fringes_rerun_is_byte_identical(self):
        with tempfile.TemporaryDirectory() as tmp:
            runs = [Path(tmp) / "a", Path(tmp) / "b"]
            for out in runs:
                self.assertEqual(main(["fringes", "--samples", "1500", "--seed", "5", "--threads", "2",
                                       "--out", str(out)]), 0)
            for name in ("fringe_scan.csv", "counts.csv", FIT_FILE, BUDGET_FILE):
                self.assertEqual((runs[0] / name).read_bytes(), (runs[1] / name).read_bytes(), name)

    def test_ladder_model_runs(self):
        with tempfile.TemporaryDirectory() as tmp:
            code = main(["fringes", "--model", "ladder", "--samples", "200", "--seed", "4", "--out", tmp])
            self.assertEqual(code, 0)
            fit = pd.read_csv(Path(tmp) / FIT_FILE).iloc[0]
            snapshot = json.loads((Path(tmp) / SNAPSHOT_NAME).read_text(encoding="utf-8"))
        self.assertEqual(snapshot["bragg"]["model"], "ladder")
        self.assertGreater(fit["expected_contrast"], 0.5)
        self.assertLessEqual(fit["expected_contrast"], 1.0)


if __name__ == '__main__':
    unittest.main()
