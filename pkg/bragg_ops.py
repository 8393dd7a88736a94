"""
Bragg Operations Module
=======================
Diffraction of atoms by one laser standing wave.

Two dynamical models are provided:
- two-level: closed-form Rabi oscillation between orders 0 and +1
- ladder: numerical integration over orders -p_max..+p_max with a Gaussian
  time envelope (Bragg, Raman-Nath and everything in between)

plus an `ideal` model (exact splitter / mirror, velocity independent) used
for contrast predictions.

Amplitudes are returned in the interaction picture referenced to the pulse
centre, so a grating with zero power acts as the identity and the free
propagation between gratings can be added by the caller.

Public API:
    pulse_params()                  Rabi frequency, detuning, interaction time
    two_level_bragg()               closed-form amplitudes over {0, 1}
    ladder_integrate()              momentum-ladder amplitudes over +-p_max
    order_minus_one_suppression()   |c_-1|^2 at the ladder level
    calibrate_coupling_scale()      Rabi calibration for a target pulse area
    grating_propagators()           per-atom unitaries for the interferometer
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from beam_ops import HBAR, AtomBatch, AtomSample, bragg_angle, de_broglie
from errors import ConfigError, DomainError, LadderStepError

logger = logging.getLogger("Bragg")

# =============================================================================
# CONFIGURATION
# =============================================================================

MODELS = ("two-level", "ladder", "ideal")
DEFAULT_P_MAX = 4
DEFAULT_SPONTANEOUS_LOSS = 0.02

ENVELOPE_HALF_WIDTH = 3.0       # integrate s = v t / w over [-3, 3]
MIN_LADDER_STEPS = 200
MAX_PHASE_PER_STEP = 0.1        # explicit dt: dt * max|diagonal| must stay below this
RESOLVED_ORDERS = 2             # automatic dt resolves the kinetic phase of |n| <= 2
AUTO_PHASE_PER_STEP = 0.5       # kinetic phase per step of those orders
AUTO_COUPLING_PER_STEP = 0.05   # Omega_eff dt per step
NORM_TOLERANCE = 1e-6

# Fourth-order triple-jump weights
_YOSHIDA_W1 = 1.0 / (2.0 - 2.0 ** (1.0 / 3.0))
_YOSHIDA_W0 = 1.0 - 2.0 * _YOSHIDA_W1

SQRT_HALF_PI = math.sqrt(math.pi / 2.0)


# =============================================================================
# DOMAIN TYPES
# =============================================================================

@dataclass(frozen=True)
class StandingWave:
    """
    One retro-reflected laser standing wave.

    theta_y tilts the grating planes in the horizontal plane (Bragg tuning),
    theta_z tilts the grating vector out of it (the Delta-k alignment axis).
    `detunings_rad_s` overrides species detunings by hyperfine F.
    """
    x_m: float = 0.0
    theta_y_rad: float = 0.0
    theta_z_rad: float = 0.0
    power_w: float = 0.080
    waist_m: float = 6.5e-3
    wavelength_m: float = 670.962e-9
    detunings_rad_s: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.power_w < 0:
            raise ConfigError("Standing-wave power must be >= 0")
        if self.wavelength_m <= 0:
            raise ConfigError("Standing-wave wavelength must be > 0")
        if self.waist_m <= 0:
            raise ConfigError("Standing-wave waist must be > 0")

    @property
    def period_m(self):
        return self.wavelength_m / 2.0

    @property
    def grating_wavevector(self):
        return 4.0 * np.pi / self.wavelength_m

    def peak_intensity(self):
        return 2.0 * self.power_w / (np.pi * self.waist_m ** 2)


@dataclass(frozen=True)
class PulseParams:
    """Effective two-photon Rabi frequency, off-Bragg detuning, interaction time."""
    omega_eff: float
    detuning: float
    tau: float

    def __post_init__(self):
        if np.any(np.asarray(self.tau) <= 0):
            raise DomainError("Interaction time must be > 0")
        if np.any(np.asarray(self.omega_eff) < 0):
            raise DomainError("Effective Rabi frequency must be >= 0")

    @property
    def area(self):
        return self.omega_eff * self.tau


@dataclass(frozen=True)
class DiffractionAmplitudes:
    orders: np.ndarray
    amplitudes: np.ndarray

    def populations(self):
        return np.abs(self.amplitudes) ** 2

    def population(self, p):
        idx = np.nonzero(self.orders == p)[0]
        return float(self.populations()[idx[0]]) if idx.size else 0.0

    def amplitude(self, p):
        idx = np.nonzero(self.orders == p)[0]
        return complex(self.amplitudes[idx[0]]) if idx.size else 0j

    def norm(self):
        return float(np.sum(self.populations()))

    def as_dict(self):
        return {int(p): complex(c) for p, c in zip(self.orders, self.amplitudes)}


@dataclass(frozen=True)
class BraggSettings:
    """Model selection and calibration shared by all three gratings."""
    model: str = "two-level"
    p_max: int = DEFAULT_P_MAX
    dt_s: float = None
    coupling_scale: float = 1.0
    spontaneous_loss: float = DEFAULT_SPONTANEOUS_LOSS
    strays: bool = True

    def __post_init__(self):
        if self.model not in MODELS:
            raise ConfigError(f"Unknown Bragg model '{self.model}', expected one of {MODELS}")
        if self.p_max < 2:
            raise ConfigError("Ladder p_max must be >= 2")
        if self.dt_s is not None and self.dt_s <= 0:
            raise ConfigError("Ladder dt must be > 0")
        if self.coupling_scale is not None and self.coupling_scale < 0:
            raise ConfigError("Coupling scale must be >= 0")
        if not 0.0 <= self.spontaneous_loss < 1.0:
            raise ConfigError("Spontaneous loss must lie in [0, 1)")

    def states(self):
        """Absolute momentum orders carried by the propagators of this model."""
        if self.model == "ladder":
            return np.arange(-self.p_max, self.p_max + 1)
        return np.array([0, 1])


# =============================================================================
# INTERNAL HELPERS
# =============================================================================

def _as_batch(atom):
    if isinstance(atom, AtomSample):
        return AtomBatch.from_atoms([atom]), True
    return atom, False


def _level_detunings(wave, batch):
    out = batch.detuning_rad_s()
    if wave.detunings_rad_s:
        for i, sp in enumerate(batch.species):
            if not sp.laser_coupled:
                continue
            for j, lv in enumerate(sp.hyperfine_levels):
                if lv.f in wave.detunings_rad_s:
                    mask = (batch.species_index == i) & (batch.level_index == j)
                    out[mask] = wave.detunings_rad_s[lv.f]
    return out


def _batch_pulse(wave, batch, coupling_scale):
    """Vectorised pulse parameters: (omega_eff, detuning, tau) arrays."""
    speed = batch.speed_mps
    if np.any(speed <= 0):
        raise DomainError("pulse_params: atom speed must be > 0")

    intensity = wave.peak_intensity()
    omega = np.zeros(len(batch))
    coupled = batch.coupled()
    if np.any(coupled) and wave.power_w > 0:
        gamma = np.array([sp.linewidth_rad_s for sp in batch.species])[batch.species_index]
        i_sat = np.array([sp.saturation_intensity_w_m2 for sp in batch.species])[batch.species_index]
        delta_f = np.abs(_level_detunings(wave, batch))
        if np.any(coupled & (delta_f == 0)):
            raise DomainError("pulse_params: laser-coupled level with zero detuning")
        with np.errstate(divide="ignore", invalid="ignore"):
            rabi1_sq = gamma ** 2 * intensity / (2.0 * i_sat)
            omega = np.where(coupled, rabi1_sq / (2.0 * np.where(delta_f > 0, delta_f, 1.0)), 0.0)
        omega = omega * coupling_scale

    tau = SQRT_HALF_PI * wave.waist_m / speed
    theta_b = bragg_angle(de_broglie(batch.mass_kg(), speed), wave.period_m)
    theta_inc = wave.theta_y_rad - batch.theta_x_rad
    detuning = wave.grating_wavevector * speed * (theta_inc - theta_b)
    return omega, detuning, tau


def order_energies(wave, batch, states):
    """
    Kinetic energy (rad/s) of each absolute order n relative to order 0, in
    the frame of this grating: hbar (2 n q0 k_g + n^2 k_g^2) / 2m with
    q0 = -k theta_inc. Shape (n_atoms, len(states)).
    """
    k_g = wave.grating_wavevector
    mass = batch.mass_kg()
    k_atom = mass * batch.speed_mps / HBAR
    theta_inc = wave.theta_y_rad - batch.theta_x_rad
    q0 = -k_atom * theta_inc
    n = np.asarray(states, dtype=float)[None, :]
    return HBAR * (2.0 * n * q0[:, None] * k_g + n ** 2 * k_g ** 2) / (2.0 * mass[:, None])


def two_level_unitary(omega_eff, detuning, tau):
    """
    Pulse-centre referenced unitaries on {0, +1}, shape (n, 2, 2).

    Frame diag(0, -detuning); zero Rabi frequency gives the identity.
    """
    omega = np.atleast_1d(np.asarray(omega_eff, dtype=float))
    delta = np.atleast_1d(np.asarray(detuning, dtype=float))
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    omega, delta, tau = np.broadcast_arrays(omega, delta, tau)

    rabi = np.sqrt(omega ** 2 + delta ** 2)
    half = rabi * tau / 2.0
    c = np.cos(half)
    s_over = (tau / 2.0) * np.sinc(half / np.pi)        # sin(half) / rabi, finite at rabi = 0
    drift = np.exp(-0.5j * delta * tau)

    u = np.empty(omega.shape + (2, 2), dtype=complex)
    u[..., 0, 0] = np.conj(drift) * (c - 1j * s_over * delta)
    u[..., 0, 1] = -1j * s_over * omega
    u[..., 1, 0] = -1j * s_over * omega
    u[..., 1, 1] = drift * (c + 1j * s_over * delta)
    return u


def _filtered_coupling(diag, length):
    """
    Eigensystem of the ladder coupling T with each neighbour element damped
    by sinc(dE L / 2), dE the scaled energy gap of the pair and L the
    substep. Resolved pairs keep T; gaps the step cannot follow only keep
    their step average. Returns per-atom (eigenvalues, real eigenvectors).
    """
    n_atoms, size = diag.shape
    gap = np.diff(diag, axis=1)                                  # (n, D-1)
    damp = np.sinc(gap * length / (2.0 * np.pi))
    t = np.zeros((n_atoms, size, size))
    idx = np.arange(size - 1)
    t[:, idx, idx + 1] = damp
    t[:, idx + 1, idx] = damp
    return np.linalg.eigh(t)


def _ladder_steps(energies, states, omega_eff, speed, waist, dt):
    """Number of steps over the scaled window [-3, 3]."""
    max_diag = np.max(np.abs(energies), axis=1)
    duration = 2.0 * ENVELOPE_HALF_WIDTH * waist / speed

    if dt is not None:
        worst = float(np.max(dt * max_diag))
        if worst >= MAX_PHASE_PER_STEP:
            max_dt = MAX_PHASE_PER_STEP / float(np.max(max_diag))
            raise LadderStepError(
                f"Ladder step too coarse: dt*max|diagonal| = {worst:.3g} >= {MAX_PHASE_PER_STEP}; "
                f"use dt < {max_dt:.3e} s", max_dt=max_dt)
        needed = duration / dt
    else:
        band = np.abs(np.asarray(states)) <= RESOLVED_ORDERS
        band_rate = np.max(np.abs(energies[:, band]), axis=1)
        needed = duration * np.maximum(omega_eff / AUTO_COUPLING_PER_STEP,
                                       band_rate / AUTO_PHASE_PER_STEP)
    return max(MIN_LADDER_STEPS, int(np.ceil(np.max(needed))))


def _ladder_evolve(energies, states, omega_eff, speed, waist, c0, dt):
    """
    Integrates i dc/dt = diag(energies) c + (Omega(t)/2) T c over the pulse,
    Omega(t) = omega_eff exp(-2 (v t / w)^2), in scaled time s = v t / w.

    Filtered Strang splitting (diagonal half-steps exact, coupling step
    solved exactly in the eigenbasis of the filtered T) composed into a
    fourth-order triple jump, so every step is exactly unitary. The
    automatic step follows the coupling and the orders |n| <= 2, not the
    kinetic energy of the outermost orders. c0: (n, D, K). Returns the
    interaction-picture state at the pulse centre.
    """
    n_atoms, size = energies.shape
    n_steps = _ladder_steps(energies, states, omega_eff, speed, waist, dt)
    h = 2.0 * ENVELOPE_HALF_WIDTH / n_steps
    logger.debug("[Bragg] ladder: %d atoms, %d orders, %d steps", n_atoms, size, n_steps)

    scale = (waist / speed)[:, None]                     # dt/ds per atom
    diag = scale * energies                              # (n, D)
    rate = scale * (omega_eff[:, None] / 2.0)            # (n, 1)

    w1, w0 = _YOSHIDA_W1, _YOSHIDA_W0
    outer_vals, outer_vecs = _filtered_coupling(diag, w1 * h)
    inner_vals, inner_vecs = _filtered_coupling(diag, w0 * h)
    systems = ((outer_vals, outer_vecs), (inner_vals, inner_vecs), (outer_vals, outer_vecs))
    edge = np.exp(-0.5j * w1 * h * diag)[:, :, None]
    inner = np.exp(-0.5j * (w1 + w0) * h * diag)[:, :, None]
    substeps = ((w1 * h, 0.5 * w1 * h), (w0 * h, 0.5 * h), (w1 * h, h - 0.5 * w1 * h))

    # interaction picture centred on the pulse: exp(iA T/2) U exp(iA T/2)
    centre = np.exp(1j * ENVELOPE_HALF_WIDTH * diag)[:, :, None]
    c = centre * np.array(c0, dtype=complex)
    norm0 = np.sum(np.abs(c) ** 2, axis=1)
    for k in range(n_steps):
        s = -ENVELOPE_HALF_WIDTH + k * h
        c = c * edge
        for j, ((length, mid), (vals, vecs)) in enumerate(zip(substeps, systems)):
            g = math.exp(-2.0 * (s + mid) ** 2)
            phase = np.exp(-1j * length * g * rate * vals)[:, :, None]
            c = vecs @ (phase * (np.swapaxes(vecs, 1, 2) @ c))
            c = c * (inner if j < 2 else edge)

    norm = np.sum(np.abs(c) ** 2, axis=1)
    drift = float(np.max(np.abs(norm - norm0)))
    if drift > NORM_TOLERANCE:
        raise LadderStepError(f"Ladder norm drifted by {drift:.2e}; reduce dt", max_dt=dt)

    return centre * c


# =============================================================================
# PUBLIC API
# =============================================================================

def pulse_params(wave, atom, coupling_scale=1.0):
    """
    Omega_eff = Omega_1^2 / (2 |delta_F|), Omega_1^2 = Gamma^2 I / (2 I_sat),
    I = 2P / (pi w^2); tau = sqrt(pi/2) w / v; Delta = k_g v (theta_inc - theta_B).

    Accepts an AtomSample (scalar result) or an AtomBatch (array result).
    """
    batch, single = _as_batch(atom)
    omega, detuning, tau = _batch_pulse(wave, batch, coupling_scale)
    if single:
        return PulseParams(float(omega[0]), float(detuning[0]), float(tau[0]))
    return PulseParams(omega, detuning, tau)


def two_level_bragg(p):
    """Closed-form Bragg amplitudes over orders {0, +1} starting from order 0."""
    u = two_level_unitary(p.omega_eff, p.detuning, p.tau)[0]
    return DiffractionAmplitudes(orders=np.array([0, 1]), amplitudes=u[:, 0].copy())


def ladder_integrate(wave, atom, p_max=DEFAULT_P_MAX, dt=None, coupling_scale=1.0):
    """Momentum-ladder amplitudes over orders -p_max..p_max for one atom."""
    if p_max < 2:
        raise DomainError("ladder_integrate: p_max must be >= 2")
    batch, _ = _as_batch(atom)
    states = np.arange(-p_max, p_max + 1)
    omega, _, _ = _batch_pulse(wave, batch, coupling_scale)
    energies = order_energies(wave, batch, states)
    c0 = np.zeros((len(batch), states.size, 1), dtype=complex)
    c0[:, p_max, 0] = 1.0
    c = _ladder_evolve(energies, states, omega, batch.speed_mps, wave.waist_m, c0, dt)
    return DiffractionAmplitudes(orders=states, amplitudes=c[0, :, 0])


def order_minus_one_suppression(wave, atom, p_max=DEFAULT_P_MAX, dt=None, coupling_scale=1.0):
    """Population left in order -1 after the pulse."""
    return ladder_integrate(wave, atom, p_max=p_max, dt=dt,
                            coupling_scale=coupling_scale).population(-1)


def calibrate_coupling_scale(species, level, wave, speed_mps, target_area=np.pi):
    """Scale factor on Omega_eff that gives `target_area` at Bragg incidence."""
    atom = AtomSample(species=species, level=level, weight=1.0, speed_mps=speed_mps,
                      theta_x_rad=0.0, x_m=0.0)
    area = pulse_params(wave, atom, coupling_scale=1.0).area
    if area <= 0:
        raise DomainError("calibrate_coupling_scale: grating produces no coupling")
    scale = target_area / area
    logger.info("[Bragg] coupling scale %.4f (uncalibrated area %.3f pi)", scale, area / np.pi)
    return float(scale)


def grating_propagators(wave, batch, settings, ideal_area=None):
    """
    Per-atom unitaries of one grating in the absolute order basis
    settings.states(), shape (n, D, D), element [out, in].

    Incoherent spontaneous-emission loss scales the unitary by sqrt(1 - loss)
    for laser-coupled atoms when the grating carries power. `ideal_area`
    (pi/2 or pi) selects the fixed splitter or mirror of the ideal model.
    """
    states = settings.states()
    n_atoms = len(batch)
    coupled = batch.coupled() & (wave.power_w > 0)

    if settings.model == "ideal":
        if ideal_area is None:
            raise ConfigError("Ideal model needs the pulse area of each grating")
        u = np.broadcast_to(np.eye(2, dtype=complex), (n_atoms, 2, 2)).copy()
        half = ideal_area / 2.0
        ideal = np.array([[np.cos(half), -1j * np.sin(half)],
                          [-1j * np.sin(half), np.cos(half)]])
        u[coupled] = ideal
    elif settings.model == "two-level":
        omega, detuning, tau = _batch_pulse(wave, batch, settings.coupling_scale)
        u = two_level_unitary(omega, detuning, tau)
    else:
        omega, _, _ = _batch_pulse(wave, batch, settings.coupling_scale)
        energies = order_energies(wave, batch, states)
        eye = np.broadcast_to(np.eye(states.size, dtype=complex), (n_atoms, states.size, states.size))
        u = _ladder_evolve(energies, states, omega, batch.speed_mps, wave.waist_m, eye, settings.dt_s)

    if settings.spontaneous_loss > 0:
        survive = np.where(coupled, math.sqrt(1.0 - settings.spontaneous_loss), 1.0)
        u = u * survive[:, None, None]
    return u
