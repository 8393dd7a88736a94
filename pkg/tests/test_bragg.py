import os
import sys
import unittest

import numpy as np
from scipy.special import jv

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import bragg_ops
from beam_ops import LITHIUM6, LITHIUM7, AtomBatch, AtomSample, bragg_angle, de_broglie, recoil_frequency
from bragg_ops import (
    BraggSettings, StandingWave, calibrate_coupling_scale, grating_propagators, ladder_integrate, order_energies,
    order_minus_one_suppression, pulse_params, two_level_bragg, two_level_unitary,
)
from errors import ConfigError, DomainError, LadderStepError

F2 = LITHIUM7.hyperfine_levels[1]


def bragg_wave(speed, **kwargs):
    theta_b = bragg_angle(de_broglie(LITHIUM7.mass_kg, speed), LITHIUM7.grating_period_m)
    return StandingWave(theta_y_rad=theta_b, **kwargs)


def atom_at(speed, theta_x=0.0, species=LITHIUM7, level=F2):
    return AtomSample(species=species, level=level, weight=1.0, speed_mps=speed,
                      theta_x_rad=theta_x, x_m=0.0)


class TestPulseParams(unittest.TestCase):

    def test_interaction_time(self):
        p = pulse_params(StandingWave(), atom_at(1000.0))
        self.assertAlmostEqual(p.tau, np.sqrt(np.pi / 2) * 6.5e-3 / 1000.0)

    def test_rabi_frequency_scales_with_power(self):
        a = pulse_params(StandingWave(power_w=0.04), atom_at(1000.0))
        b = pulse_params(StandingWave(power_w=0.08), atom_at(1000.0))
        self.assertAlmostEqual(b.omega_eff / a.omega_eff, 2.0)

    def test_detuning_zero_at_bragg_incidence(self):
        p = pulse_params(bragg_wave(1000.0), atom_at(1000.0))
        self.assertAlmostEqual(p.detuning, 0.0, delta=1e-6)
        off = pulse_params(bragg_wave(1000.0), atom_at(1000.0, theta_x=10e-6))
        self.assertNotAlmostEqual(off.detuning, 0.0)

    def test_uncoupled_isotope(self):
        atom = atom_at(1000.0, species=LITHIUM6, level=LITHIUM6.hyperfine_levels[0])
        self.assertEqual(pulse_params(StandingWave(), atom).omega_eff, 0.0)

    def test_zero_waist(self):
        with self.assertRaises(ConfigError):
            StandingWave(waist_m=0.0)
        with self.assertRaises(ConfigError):
            StandingWave(waist_m=-1e-3)

    def test_calibration_hits_target_area(self):
        wave = bragg_wave(1050.0)
        scale = calibrate_coupling_scale(LITHIUM7, F2, wave, 1050.0, target_area=np.pi)
        p = pulse_params(wave, atom_at(1050.0), coupling_scale=scale)
        self.assertAlmostEqual(p.area, np.pi)


class TestTwoLevel(unittest.TestCase):

    def test_unitarity(self):
        rng = np.random.default_rng(0)
        u = two_level_unitary(rng.uniform(0, 1e6, 50), rng.uniform(-1e6, 1e6, 50), rng.uniform(1e-6, 1e-5, 50))
        eye = np.einsum("nji,njk->nik", np.conj(u), u)
        np.testing.assert_allclose(eye, np.broadcast_to(np.eye(2), eye.shape), atol=1e-9)

    def test_zero_coupling_is_identity(self):
        u = two_level_unitary(0.0, 3e5, 1e-5)[0]
        np.testing.assert_allclose(u, np.eye(2), atol=1e-12)

    def test_mirror_and_splitter(self):
        wave = bragg_wave(1050.0)
        scale = calibrate_coupling_scale(LITHIUM7, F2, wave, 1050.0)
        mirror = two_level_bragg(pulse_params(wave, atom_at(1050.0), coupling_scale=scale))
        self.assertAlmostEqual(mirror.population(1), 1.0, places=9)
        splitter = two_level_bragg(pulse_params(wave, atom_at(1050.0), coupling_scale=scale / 2))
        self.assertAlmostEqual(splitter.population(0), 0.5, places=9)
        self.assertAlmostEqual(splitter.norm(), 1.0, places=9)

    def test_off_bragg_reduces_transfer(self):
        wave = bragg_wave(1050.0)
        scale = calibrate_coupling_scale(LITHIUM7, F2, wave, 1050.0)
        off = two_level_bragg(pulse_params(wave, atom_at(1050.0, theta_x=30e-6), coupling_scale=scale))
        self.assertLess(off.population(1), 0.9)

    def test_rabi_period_is_two_pi_in_area(self):
        tau = 1e-5
        areas = np.linspace(0.0, 3.0 * np.pi, 13)
        a = two_level_unitary(areas / tau, 0.0, tau)
        b = two_level_unitary((areas + 2.0 * np.pi) / tau, 0.0, tau)
        np.testing.assert_allclose(np.abs(a[:, 1, 0]) ** 2, np.abs(b[:, 1, 0]) ** 2, atol=1e-6)
        np.testing.assert_allclose(np.abs(a[:, 1, 0]) ** 2, np.sin(areas / 2.0) ** 2, atol=1e-12)


class TestLadder(unittest.TestCase):

    def test_deep_bragg_matches_two_level(self):
        speed = 1000.0
        wave = bragg_wave(speed, waist_m=0.02)
        scale = calibrate_coupling_scale(LITHIUM7, F2, wave, speed, target_area=np.pi / 2)
        atom = atom_at(speed)
        ladder = ladder_integrate(wave, atom, p_max=2, coupling_scale=scale)
        closed = two_level_bragg(pulse_params(wave, atom, coupling_scale=scale))
        print("\n[Test Deep Bragg] ladder P0, P1:", ladder.population(0), ladder.population(1))
        self.assertAlmostEqual(ladder.population(0), closed.population(0), delta=1e-3)
        self.assertAlmostEqual(ladder.population(1), closed.population(1), delta=1e-3)
        self.assertAlmostEqual(ladder.norm(), 1.0, delta=1e-9)

    def test_raman_nath_matches_bessel(self):
        speed = 1000.0
        wave = StandingWave(waist_m=0.3e-6)
        area = 2.0
        scale = calibrate_coupling_scale(LITHIUM7, F2, wave, speed, target_area=area)
        amps = ladder_integrate(wave, atom_at(speed), p_max=6, coupling_scale=scale)
        for p in range(-3, 4):
            self.assertAlmostEqual(amps.population(p), jv(p, area) ** 2, delta=1e-3)

    def test_order_minus_one_suppressed_at_bragg_incidence(self):
        wave = bragg_wave(1050.0)
        scale = calibrate_coupling_scale(LITHIUM7, F2, wave, 1050.0)
        value = order_minus_one_suppression(wave, atom_at(1050.0), p_max=2, coupling_scale=scale)
        self.assertLess(value, 1e-3)

    def test_reflected_incidence_swaps_orders(self):
        speed = 1050.0
        wave = bragg_wave(speed)
        scale = calibrate_coupling_scale(LITHIUM7, F2, wave, speed)
        mirrored = StandingWave(theta_y_rad=-wave.theta_y_rad)
        plus = ladder_integrate(wave, atom_at(speed), p_max=3, coupling_scale=scale)
        minus = ladder_integrate(mirrored, atom_at(speed), p_max=3, coupling_scale=scale)
        np.testing.assert_allclose(minus.populations(), plus.populations()[::-1], atol=1e-9)
        self.assertGreater(plus.population(1), 0.95)

    def test_theta_y_sweep_through_negative_bragg_angle(self):
        speed = 1050.0
        theta_b = bragg_wave(speed).theta_y_rad
        scale = calibrate_coupling_scale(LITHIUM7, F2, bragg_wave(speed), speed)
        minus_one, plus_one = [], []
        for factor in (-1.5, -1.0, -0.5):
            amps = ladder_integrate(StandingWave(theta_y_rad=factor * theta_b), atom_at(speed),
                                    p_max=3, coupling_scale=scale)
            minus_one.append(amps.population(-1))
            plus_one.append(amps.population(1))
        print("\n[Test Ladder] |c-1|^2 at -1.5, -1, -0.5 theta_B:", np.round(minus_one, 4))
        self.assertEqual(int(np.argmax(minus_one)), 1)
        self.assertGreater(minus_one[1], 0.95)
        self.assertLess(plus_one[1], 1e-3)

    def test_doubling_p_max_leaves_populations(self):
        wave = bragg_wave(1050.0)
        scale = calibrate_coupling_scale(LITHIUM7, F2, wave, 1050.0, target_area=np.pi / 2)
        small = ladder_integrate(wave, atom_at(1050.0, theta_x=4e-6), p_max=4, coupling_scale=scale)
        large = ladder_integrate(wave, atom_at(1050.0, theta_x=4e-6), p_max=8, coupling_scale=scale)
        for p in range(-4, 5):
            self.assertAlmostEqual(small.population(p), large.population(p), delta=1e-6)

    def test_two_level_limit_leakage(self):
        speed = 1000.0
        wave = bragg_wave(speed, waist_m=0.02)
        scale = calibrate_coupling_scale(LITHIUM7, F2, wave, speed)
        atom = atom_at(speed)
        splitting = 2.0 * recoil_frequency(LITHIUM7)        # gap from orders 0, 1 to -1 and 2
        self.assertGreater(splitting / pulse_params(wave, atom, coupling_scale=scale).omega_eff, 20.0)
        amps = ladder_integrate(wave, atom, p_max=3, coupling_scale=scale)
        leakage = amps.norm() - amps.population(0) - amps.population(1)
        self.assertLess(leakage, 1e-3)

    def test_normal_incidence_raman_nath_is_symmetric(self):
        wave = StandingWave(waist_m=0.5e-6)
        scale = calibrate_coupling_scale(LITHIUM7, F2, wave, 1000.0, target_area=1.5)
        amps = ladder_integrate(wave, atom_at(1000.0), p_max=5, coupling_scale=scale)
        self.assertAlmostEqual(amps.population(-1), amps.population(1), delta=1e-9)
        self.assertGreater(amps.population(-1), 0.1)

    def test_coarse_step_raises(self):
        wave = bragg_wave(1050.0)
        with self.assertRaises(LadderStepError) as ctx:
            ladder_integrate(wave, atom_at(1050.0), p_max=2, dt=1e-6)
        self.assertIsNotNone(ctx.exception.max_dt)
        self.assertLess(ctx.exception.max_dt, 1e-6)

    def test_p_max_too_small(self):
        with self.assertRaises(DomainError):
            ladder_integrate(StandingWave(), atom_at(1050.0), p_max=1)


class TestPropagators(unittest.TestCase):

    def _batch(self):
        atoms = [atom_at(v, theta_x=t) for v, t in ((900.0, 0.0), (1050.0, 5e-6), (1200.0, -8e-6))]
        atoms.append(atom_at(1050.0, species=LITHIUM6, level=LITHIUM6.hyperfine_levels[1]))
        return AtomBatch.from_atoms(atoms)

    def test_zero_power_is_identity(self):
        settings = BraggSettings(spontaneous_loss=0.02)
        u = grating_propagators(StandingWave(power_w=0.0), self._batch(), settings)
        np.testing.assert_allclose(u, np.broadcast_to(np.eye(2), u.shape), atol=1e-12)

    def test_spontaneous_loss_scales_coupled_atoms(self):
        batch = self._batch()
        settings = BraggSettings(spontaneous_loss=0.04)
        u = grating_propagators(bragg_wave(1050.0), batch, settings)
        norms = np.sum(np.abs(u[:, :, 0]) ** 2, axis=1)
        np.testing.assert_allclose(norms[:3], 0.96, atol=1e-9)
        self.assertAlmostEqual(norms[3], 1.0)

    def test_ideal_model(self):
        settings = BraggSettings(model="ideal", spontaneous_loss=0.0)
        u = grating_propagators(bragg_wave(1050.0), self._batch(), settings, ideal_area=np.pi / 2)
        np.testing.assert_allclose(np.abs(u[:3, 1, 0]) ** 2, 0.5, atol=1e-12)
        np.testing.assert_allclose(u[3], np.eye(2), atol=1e-12)

    def test_ladder_propagators_unitary(self):
        settings = BraggSettings(model="ladder", p_max=2, spontaneous_loss=0.0)
        wave = bragg_wave(1050.0, power_w=0.02)
        u = grating_propagators(wave, self._batch(), settings)
        self.assertEqual(u.shape, (4, 5, 5))
        eye = np.einsum("nji,njk->nik", np.conj(u), u)
        np.testing.assert_allclose(eye, np.broadcast_to(np.eye(5), eye.shape), atol=1e-9)

    def test_ladder_unitary_over_random_draws(self):
        rng = np.random.default_rng(11)
        settings = BraggSettings(model="ladder", p_max=3, spontaneous_loss=0.0)
        for _ in range(12):
            speed = rng.uniform(800.0, 1300.0)
            wave = bragg_wave(speed, power_w=rng.uniform(0.01, 0.12), waist_m=rng.uniform(1e-3, 8e-3))
            atoms = [atom_at(rng.uniform(800.0, 1300.0), theta_x=rng.uniform(-20e-6, 20e-6)) for _ in range(3)]
            u = grating_propagators(wave, AtomBatch.from_atoms(atoms), settings)
            eye = np.einsum("nji,njk->nik", np.conj(u), u)
            np.testing.assert_allclose(eye, np.broadcast_to(np.eye(7), eye.shape), atol=1e-9)

    def test_automatic_step_count_ignores_outer_orders(self):
        wave = bragg_wave(1050.0)
        batch = AtomBatch.from_atoms([atom_at(1050.0)])
        scale = calibrate_coupling_scale(LITHIUM7, F2, wave, 1050.0)
        omega = pulse_params(wave, batch, coupling_scale=scale).omega_eff
        counts = []
        for p_max in (4, 12):
            states = np.arange(-p_max, p_max + 1)
            energies = order_energies(wave, batch, states)
            counts.append(bragg_ops._ladder_steps(energies, states, omega, batch.speed_mps, wave.waist_m, None))
        self.assertEqual(counts[0], counts[1])
        self.assertLess(counts[0], 2000)

    def test_settings_validation(self):
        with self.assertRaises(ConfigError):
            BraggSettings(model="three-level")
        with self.assertRaises(ConfigError):
            BraggSettings(spontaneous_loss=1.0)


if __name__ == '__main__':
    unittest.main()
