import os
import sys
import unittest

import numpy as np

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from analysis_ops import (
    contrast, figure_of_merit, figure_of_merit_table, fit_fringe_series, fit_fringes, fringe_period,
    integration_time, min_detectable_perturbation, phase_noise_contrast_budget,
    phase_scatter_at_mid_fringe, sensitivity_report, shot_noise_limit, wavefront_rms_fraction,
)
from detector_ops import DetectorModel, simulate_counts
from errors import DomainError, FitError, InsufficientDataError

PERIOD = 670.962e-9 / 2.0
SWEEP_MPS = 120e-9
PHI1 = 2 * np.pi * SWEEP_MPS / PERIOD          # 2.2475 rad/s
PHI2 = 2 * np.pi * 0.05e-9 / PERIOD            # 9.4e-4 rad/s^2
MEAN_RATE = 1.4e4
BACKGROUND = 3370.0
CONTRAST = 0.74


def synthetic_record(duration_s=40.0, bin_s=0.1, seed=1, beam_off=None, phi0=0.4):
    def rate(t):
        return MEAN_RATE * (1.0 + CONTRAST * np.cos(phi0 + PHI1 * t + PHI2 * t ** 2))

    det = DetectorModel(efficiency=1.0, background_hz=BACKGROUND)
    return simulate_counts(rate, det, bin_s=bin_s, duration_s=duration_s, seed=seed, beam_off=beam_off)


class TestSimpleFigures(unittest.TestCase):

    def test_contrast(self):
        self.assertAlmostEqual(contrast(3.0, 1.0), 0.5)
        with self.assertRaises(DomainError):
            contrast(0.0, 0.0)

    def test_shot_noise_limit(self):
        self.assertAlmostEqual(shot_noise_limit(MEAN_RATE, BACKGROUND, CONTRAST), 12.72e-3, delta=0.01e-3)
        with self.assertRaises(DomainError):
            shot_noise_limit(MEAN_RATE, BACKGROUND, 0.0)

    def test_min_detectable_perturbation(self):
        self.assertAlmostEqual(min_detectable_perturbation(1e-4, 1e-4) / 1e-16, 6.58, delta=0.01)
        with self.assertRaises(DomainError):
            min_detectable_perturbation(1e-4, 0.0)

    def test_contrast_budget(self):
        self.assertAlmostEqual(phase_noise_contrast_budget(1.0, [0.63]), 0.820, delta=1e-3)
        both = phase_noise_contrast_budget(0.9, [0.63, 2 * np.pi * 3e-9 / PERIOD])
        self.assertAlmostEqual(both, 0.9 * 0.8200 * 0.9984, delta=1e-3)
        with self.assertRaises(DomainError):
            phase_noise_contrast_budget(1.0, [-0.1])

    def test_integration_time(self):
        self.assertAlmostEqual(integration_time(1e-2, 1e-3), 100.0)

    def test_phase_scatter_matches_shot_noise(self):
        scatter = phase_scatter_at_mid_fringe(MEAN_RATE, BACKGROUND, CONTRAST, repeats=4000, seed=2)
        self.assertAlmostEqual(scatter / shot_noise_limit(MEAN_RATE, BACKGROUND, CONTRAST), 1.0, delta=0.05)

    def test_figure_of_merit_table(self):
        table = figure_of_merit_table()
        foms = [row[3] for row in table]
        self.assertEqual(foms, sorted(foms, reverse=True))
        self.assertIn("lithium", table[0][0])
        self.assertAlmostEqual(figure_of_merit(MEAN_RATE, CONTRAST), 7666.4)


class TestFringeFit(unittest.TestCase):

    def test_recovers_synthetic_fringe(self):
        rec = synthetic_record()
        fit = fit_fringes(rec, background=BACKGROUND, phase_guess=PHI1)
        print("\n[Test Fit] C = %.4f +- %.4f, phi1 = %.4f" % (fit.contrast, fit.sigma["contrast"], fit.phi1))
        self.assertAlmostEqual(fit.contrast, CONTRAST, delta=0.015)
        self.assertAlmostEqual(fit.mean_rate / MEAN_RATE, 1.0, delta=0.01)
        self.assertAlmostEqual(fit.phi1, PHI1, delta=0.01)
        self.assertAlmostEqual(fringe_period(fit, SWEEP_MPS) / PERIOD, 1.0, delta=0.01)
        self.assertGreater(fit.sigma["contrast"], 0.0)
        self.assertLess(fit.sigma["contrast"], 0.01)

    def test_finds_phase_rate_without_guess(self):
        fit = fit_fringes(synthetic_record(seed=3), background=BACKGROUND)
        self.assertAlmostEqual(fit.phi1, PHI1, delta=0.01)
        self.assertAlmostEqual(fit.contrast, CONTRAST, delta=0.015)

    def test_frozen_quadratic_and_phase_rate(self):
        rec = synthetic_record(seed=4)
        fit = fit_fringes(rec, background=BACKGROUND, freeze_quadratic=True, freeze_phase_rate=PHI1 + 40 * PHI2)
        self.assertEqual(fit.phi2, 0.0)
        self.assertEqual(fit.phi1, PHI1 + 40 * PHI2)
        self.assertEqual(fit.sigma["phi1"], 0.0)

    def test_fitted_background(self):
        rec = synthetic_record(duration_s=50.0, seed=5, beam_off=(40.0, 50.0))
        fit = fit_fringes(rec, background="fit", phase_guess=PHI1)
        self.assertTrue(fit.background_fitted)
        self.assertAlmostEqual(fit.background, BACKGROUND, delta=100.0)
        self.assertGreater(fit.sigma["background"], 0.0)
        self.assertEqual(fit.as_dict()["background_fitted"], 1)

    def test_background_fit_needs_beam_off_bins(self):
        with self.assertRaises(FitError):
            fit_fringes(synthetic_record(), background="fit")
        with self.assertRaises(FitError):
            fit_fringes(synthetic_record(), background="guess")

    def test_too_few_bins(self):
        t = 0.1 * np.arange(5) + 0.05
        with self.assertRaises(InsufficientDataError):
            fit_fringe_series(t, np.full(5, 1000.0), 0.1)

    def test_bootstrap_errors(self):
        rec = synthetic_record(duration_s=20.0, seed=6)
        fit = fit_fringes(rec, background=BACKGROUND, phase_guess=PHI1, bootstrap=8)
        self.assertIsNotNone(fit.sigma_bootstrap)
        self.assertGreater(fit.sigma_bootstrap["contrast"], 0.0)

    def test_as_dict_keys(self):
        fit = fit_fringes(synthetic_record(seed=7), background=BACKGROUND, phase_guess=PHI1)
        d = fit.as_dict()
        for key in ("mean_rate_hz", "contrast", "sigma_contrast", "phi1_rad_s", "chi2", "dof"):
            self.assertIn(key, d)
        self.assertEqual(d["dof"], 400 - 5)

    def test_null_contrast_within_two_sigma(self):
        det = DetectorModel(efficiency=1.0, background_hz=BACKGROUND)
        inside = 0
        for seed in range(100):
            rec = simulate_counts(lambda t: np.full_like(t, MEAN_RATE), det, bin_s=0.1, duration_s=40.0,
                                  seed=1000 + seed)
            fit = fit_fringes(rec, background=BACKGROUND, phase_guess=PHI1)
            inside += int(fit.contrast <= 2.0 * fit.sigma["contrast"])
        print("\n[Test Null] %d of 100 fits with C <= 2 sigma" % inside)
        self.assertGreaterEqual(inside, 90)

    def test_pull_statistics(self):
        pulls = {"contrast": [], "mean_rate": []}
        for seed in range(200):
            fit = fit_fringes(synthetic_record(seed=2000 + seed), background=BACKGROUND, phase_guess=PHI1)
            pulls["contrast"].append((fit.contrast - CONTRAST) / fit.sigma["contrast"])
            pulls["mean_rate"].append((fit.mean_rate - MEAN_RATE) / fit.sigma["mean_rate"])
        for key, values in pulls.items():
            values = np.asarray(values)
            print("\n[Test Pulls] %s: mean %.3f, variance %.3f" % (key, values.mean(), values.var(ddof=1)))
            self.assertLess(abs(values.mean()), 0.2)
            self.assertGreater(values.var(ddof=1), 0.7)
            self.assertLess(values.var(ddof=1), 1.3)

    def test_phase_rate_window_around_guess(self):
        # a strong fringe at three times the guessed rate lies outside the window
        def rate(t):
            return MEAN_RATE * (1.0 + 0.3 * np.cos(PHI1 * t) + 0.5 * np.cos(3.0 * PHI1 * t))

        det = DetectorModel(efficiency=1.0, background_hz=BACKGROUND)
        rec = simulate_counts(rate, det, bin_s=0.1, duration_s=40.0, seed=12)
        windowed = fit_fringes(rec, background=BACKGROUND, freeze_quadratic=True, phase_guess=PHI1)
        free = fit_fringes(rec, background=BACKGROUND, freeze_quadratic=True)
        self.assertAlmostEqual(windowed.phi1, PHI1, delta=0.01)
        self.assertAlmostEqual(free.phi1, 3.0 * PHI1, delta=0.01)


class TestSensitivity(unittest.TestCase):

    def test_poisson_data_reaches_shot_noise(self):
        rec = synthetic_record(duration_s=100.0, seed=8)
        fit = fit_fringes(rec, background=BACKGROUND, phase_guess=PHI1)
        report = sensitivity_report(rec, fit)
        print("\n[Test Sensitivity] measured %.4g, shot noise %.4g" % (report.measured, report.shot_noise))
        self.assertAlmostEqual(report.measured / report.shot_noise, 1.0, delta=0.15)
        self.assertAlmostEqual(report.figure_of_merit, fit.mean_rate * fit.contrast ** 2)

    def test_phase_noise_raises_measured_sensitivity(self):
        rng = np.random.default_rng(9)
        jitter = rng.normal(0.0, 0.3, size=1000)

        def rate(t):
            k = np.minimum((t / 0.1).astype(int), jitter.size - 1)
            return MEAN_RATE * (1.0 + CONTRAST * np.cos(0.4 + PHI1 * t + PHI2 * t ** 2 + jitter[k]))

        det = DetectorModel(efficiency=1.0, background_hz=BACKGROUND)
        rec = simulate_counts(rate, det, bin_s=0.1, duration_s=100.0, seed=9)
        fit = fit_fringes(rec, background=BACKGROUND, phase_guess=PHI1)
        report = sensitivity_report(rec, fit)
        self.assertGreater(report.measured, 2.0 * report.shot_noise)
        self.assertGreater(report.phase_variance_per_bin, 0.0)

    def test_infinite_count_limit_reaches_jitter_floor(self):
        scale = 1e6
        sigma = 0.05
        rng = np.random.default_rng(10)
        jitter = rng.normal(0.0, sigma, size=1000)

        def rate(t):
            k = np.minimum((t / 0.1).astype(int), jitter.size - 1)
            return scale * MEAN_RATE * (1.0 + CONTRAST * np.cos(0.4 + PHI1 * t + PHI2 * t ** 2 + jitter[k]))

        det = DetectorModel(efficiency=1.0, background_hz=scale * BACKGROUND)
        rec = simulate_counts(rate, det, bin_s=0.1, duration_s=100.0, seed=10)
        fit = fit_fringes(rec, background=scale * BACKGROUND, phase_guess=PHI1)
        report = sensitivity_report(rec, fit)
        floor = sigma * np.sqrt(0.1)
        print("\n[Test Sensitivity] measured %.4g, jitter floor %.4g, shot noise %.3g"
              % (report.measured, floor, report.shot_noise))
        self.assertLess(report.shot_noise, 0.01 * floor)
        self.assertAlmostEqual(report.measured / floor, 1.0, delta=0.15)

    def test_wavefront_rms_of_dispersion_factor(self):
        sigma = np.sqrt(-2.0 * np.log(0.82))
        self.assertAlmostEqual(wavefront_rms_fraction(sigma), 0.1003, delta=1e-4)
        self.assertAlmostEqual(wavefront_rms_fraction(0.63), 0.63 / (2 * np.pi))


if __name__ == '__main__':
    unittest.main()
