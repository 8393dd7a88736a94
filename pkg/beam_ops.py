"""
Beam Operations Module
======================
Physical constants, atomic species data, supersonic-beam sampling and the
two-slit collimation geometry of the lithium beamline.

This module provides:
- de_broglie(), diffraction_angle(), bragg_angle(): matter-wave kinematics
- supersonic_terminal_velocity(): beam speed from nozzle temperature
- acceptance_angle(), beam_width_at(): collimation geometry
- sample_atom() / sample_atoms(): Monte Carlo draws of atoms that pass both slits

Coordinates: z along the beam (distance from the nozzle), x transverse in the
horizontal plane (the grating-vector direction), y vertical. Transverse
positions are stored at the plane of slit S1.

All sampling functions take an explicit numpy Generator and never touch
global random state.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import constants

from errors import ConfigError, DomainError

logger = logging.getLogger("Beam")

# =============================================================================
# CONFIGURATION
# =============================================================================

PLANCK = constants.h
HBAR = constants.hbar
BOLTZMANN = constants.k
ATOMIC_MASS_UNIT = constants.atomic_mass

ARGON_MASS = 39.948 * ATOMIC_MASS_UNIT

DEFAULT_SPEED_RATIO = 8.0              # not given by the experiment, a free knob
ABUNDANCE_TOLERANCE = 1e-9
MAX_RESAMPLE_ROUNDS = 200              # rejection-sampling rounds before giving up
SUPERSONIC_CUTOFF_SIGMAS = 6.0         # v^3 envelope is bounded at v0 + 6 sigma

SPEED_DISTRIBUTIONS = ("gaussian", "supersonic")


# =============================================================================
# DOMAIN TYPES
# =============================================================================

@dataclass(frozen=True)
class HyperfineLevel:
    """Ground hyperfine level F with its degeneracy and laser detuning."""
    f: float
    degeneracy: int
    detuning_rad_s: float


@dataclass(frozen=True)
class Species:
    """
    Atomic species data for one isotope.

    `laser_coupled` is False for isotopes the standing waves leave untouched
    (6Li with the laser tuned near the 7Li line): they stay in order 0.
    """
    name: str
    mass_kg: float
    abundance: float
    resonance_wavelength_m: float
    linewidth_rad_s: float
    saturation_intensity_w_m2: float
    hyperfine_levels: tuple
    laser_coupled: bool = True

    def __post_init__(self):
        if self.mass_kg <= 0:
            raise ConfigError(f"Species {self.name}: mass must be > 0")
        if self.resonance_wavelength_m <= 0:
            raise ConfigError(f"Species {self.name}: resonance wavelength must be > 0")
        if not 0.0 <= self.abundance <= 1.0:
            raise ConfigError(f"Species {self.name}: abundance must lie in [0, 1]")
        if not self.hyperfine_levels:
            raise ConfigError(f"Species {self.name}: at least one hyperfine level required")
        for level in self.hyperfine_levels:
            if level.degeneracy < 1:
                raise ConfigError(f"Species {self.name}: degeneracy of F={level.f} must be >= 1")
        if self.laser_coupled:
            if self.linewidth_rad_s <= 0 or self.saturation_intensity_w_m2 <= 0:
                raise ConfigError(f"Species {self.name}: linewidth and I_sat must be > 0")
            for level in self.hyperfine_levels:
                # far-detuned regime: coherent diffraction, negligible excitation
                if abs(level.detuning_rad_s) < 10.0 * self.linewidth_rad_s:
                    raise ConfigError(
                        f"Species {self.name}: |detuning| of F={level.f} must be >> linewidth")

    @property
    def grating_period_m(self):
        return self.resonance_wavelength_m / 2.0

    @property
    def grating_wavevector(self):
        return 4.0 * np.pi / self.resonance_wavelength_m

    def level_weights(self):
        """Degeneracy-weighted (2F+1) populations of the hyperfine levels."""
        deg = np.array([lv.degeneracy for lv in self.hyperfine_levels], dtype=float)
        return deg / deg.sum()


def _lithium7():
    two_pi = 2.0 * np.pi
    return Species(
        name="Li7",
        mass_kg=7.016003 * ATOMIC_MASS_UNIT,
        abundance=0.926,
        resonance_wavelength_m=670.962e-9,
        linewidth_rad_s=two_pi * 5.87e6,
        saturation_intensity_w_m2=25.4,          # 2.54 mW/cm^2
        hyperfine_levels=(
            HyperfineLevel(f=1, degeneracy=3, detuning_rad_s=two_pi * 2.1e9),
            HyperfineLevel(f=2, degeneracy=5, detuning_rad_s=two_pi * 2.9e9),
        ),
    )


def _lithium6():
    two_pi = 2.0 * np.pi
    return Species(
        name="Li6",
        mass_kg=6.015122 * ATOMIC_MASS_UNIT,
        abundance=0.074,
        resonance_wavelength_m=670.962e-9,
        linewidth_rad_s=two_pi * 5.87e6,
        saturation_intensity_w_m2=25.4,
        hyperfine_levels=(
            HyperfineLevel(f=0.5, degeneracy=2, detuning_rad_s=0.0),
            HyperfineLevel(f=1.5, degeneracy=4, detuning_rad_s=0.0),
        ),
        laser_coupled=False,
    )


LITHIUM7 = _lithium7()
LITHIUM6 = _lithium6()
DEFAULT_SPECIES = (LITHIUM7, LITHIUM6)


@dataclass(frozen=True)
class BeamSource:
    """Supersonic beam: mean speed, parallel speed ratio and flux through S1."""
    mean_speed_mps: float
    speed_ratio: float = DEFAULT_SPEED_RATIO
    temperature_k: float = 1050.0
    carrier_mass_kg: float = ARGON_MASS
    flux_hz: float = 1.4e5
    distribution: str = "gaussian"

    def __post_init__(self):
        if self.mean_speed_mps <= 0:
            raise ConfigError("Beam mean speed must be > 0")
        if self.speed_ratio <= 1:
            raise ConfigError("Beam speed ratio must be > 1")
        if self.flux_hz < 0:
            raise ConfigError("Beam flux must be >= 0")
        if self.distribution not in SPEED_DISTRIBUTIONS:
            raise ConfigError(f"Unknown speed distribution '{self.distribution}'")

    @property
    def speed_spread_mps(self):
        return self.mean_speed_mps / self.speed_ratio


@dataclass(frozen=True)
class CollimationGeometry:
    """
    Beamline positions (z from the nozzle) and aperture widths.

    Defaults are the apparatus values: S0 20 um at 480 mm, S1 12 um at
    1260 mm, mirrors at 1410/2015/2620 mm, detector slit at 3020 mm,
    760 um rhenium ribbon at 3370 mm, 3 mm vertical entrance hole.
    """
    slit0_width_m: float = 20e-6
    slit0_z_m: float = 0.480
    slit1_width_m: float = 12e-6
    slit1_z_m: float = 1.260
    mirror_z_m: tuple = (1.410, 2.015, 2.620)
    detector_slit_z_m: float = 3.020
    detector_z_m: float = 3.370
    detector_slit_width_m: float = 30e-6
    ribbon_width_m: float = 760e-6
    aperture_height_m: float = 3e-3

    def __post_init__(self):
        if self.slit1_z_m == self.slit0_z_m:
            raise ConfigError("Zero separation between collimation slits S0 and S1")
        z = [self.slit0_z_m, self.slit1_z_m, *self.mirror_z_m,
             self.detector_slit_z_m, self.detector_z_m]
        if len(self.mirror_z_m) != 3:
            raise ConfigError("Exactly three mirror positions are required")
        if any(b <= a for a, b in zip(z, z[1:])):
            raise ConfigError(f"Beamline z positions must be strictly increasing, got {z}")
        widths = (self.slit0_width_m, self.slit1_width_m, self.detector_slit_width_m,
                  self.ribbon_width_m, self.aperture_height_m)
        if any(w <= 0 for w in widths):
            raise ConfigError("All slit widths and aperture sizes must be > 0")

    @property
    def slit_separation_m(self):
        return self.slit1_z_m - self.slit0_z_m


@dataclass(frozen=True)
class AtomSample:
    """One sampled atom. x is the transverse offset at the plane of S1."""
    species: Species
    level: HyperfineLevel
    weight: float
    speed_mps: float
    theta_x_rad: float
    x_m: float
    y_m: float = 0.0

    def __post_init__(self):
        if self.weight <= 0:
            raise DomainError("Atom weight must be > 0")
        if self.speed_mps <= 0:
            raise DomainError("Atom speed must be > 0")

    def x_at(self, z_m, geom):
        return self.x_m + self.theta_x_rad * (z_m - geom.slit1_z_m)


@dataclass
class AtomBatch:
    """Column-oriented batch of atoms for vectorised Monte Carlo."""
    species: tuple
    species_index: np.ndarray
    level_index: np.ndarray
    weight: np.ndarray
    speed_mps: np.ndarray
    theta_x_rad: np.ndarray
    x_m: np.ndarray
    y_m: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.y_m is None:
            self.y_m = np.zeros_like(self.x_m)

    def __len__(self):
        return int(self.speed_mps.shape[0])

    def x_at(self, z_m, geom):
        return self.x_m + self.theta_x_rad * (z_m - geom.slit1_z_m)

    def mass_kg(self):
        masses = np.array([sp.mass_kg for sp in self.species])
        return masses[self.species_index]

    def detuning_rad_s(self):
        """Laser detuning of each atom's hyperfine level (0 for uncoupled species)."""
        out = np.zeros(len(self))
        for i, sp in enumerate(self.species):
            for j, lv in enumerate(sp.hyperfine_levels):
                out[(self.species_index == i) & (self.level_index == j)] = lv.detuning_rad_s
        return out

    def coupled(self):
        flags = np.array([sp.laser_coupled for sp in self.species])
        return flags[self.species_index]

    def atom(self, i):
        sp = self.species[self.species_index[i]]
        return AtomSample(
            species=sp,
            level=sp.hyperfine_levels[self.level_index[i]],
            weight=float(self.weight[i]),
            speed_mps=float(self.speed_mps[i]),
            theta_x_rad=float(self.theta_x_rad[i]),
            x_m=float(self.x_m[i]),
            y_m=float(self.y_m[i]),
        )

    @classmethod
    def from_atoms(cls, atoms):
        species = []
        for a in atoms:
            if a.species not in species:
                species.append(a.species)
        sp_idx = np.array([species.index(a.species) for a in atoms], dtype=int)
        lv_idx = np.array([a.species.hyperfine_levels.index(a.level) for a in atoms], dtype=int)
        return cls(
            species=tuple(species),
            species_index=sp_idx,
            level_index=lv_idx,
            weight=np.array([a.weight for a in atoms], dtype=float),
            speed_mps=np.array([a.speed_mps for a in atoms], dtype=float),
            theta_x_rad=np.array([a.theta_x_rad for a in atoms], dtype=float),
            x_m=np.array([a.x_m for a in atoms], dtype=float),
            y_m=np.array([a.y_m for a in atoms], dtype=float),
        )


# =============================================================================
# KINEMATICS
# =============================================================================

def de_broglie(mass_kg, speed_mps):
    """lambda_dB = h / (m v). Accepts scalars or arrays."""
    mass = np.asarray(mass_kg, dtype=float)
    speed = np.asarray(speed_mps, dtype=float)
    if np.any(mass <= 0) or np.any(speed <= 0):
        raise DomainError("de_broglie: mass and speed must be > 0")
    out = PLANCK / (mass * speed)
    return float(out) if out.ndim == 0 else out


def diffraction_angle(wavelength_m, period_m):
    """First-order diffraction angle theta_1 = lambda_dB / a."""
    if period_m <= 0:
        raise DomainError("diffraction_angle: grating period must be > 0")
    out = np.asarray(wavelength_m, dtype=float) / period_m
    return float(out) if out.ndim == 0 else out


def bragg_angle(wavelength_m, period_m):
    """Bragg incidence angle, half the first-order diffraction angle."""
    return 0.5 * diffraction_angle(wavelength_m, period_m)


def supersonic_terminal_velocity(temperature_k, carrier_mass_kg):
    """Full-expansion terminal speed of a monatomic carrier, sqrt(5 kT / m)."""
    if temperature_k <= 0 or carrier_mass_kg <= 0:
        raise DomainError("supersonic_terminal_velocity: temperature and mass must be > 0")
    return float(np.sqrt(5.0 * BOLTZMANN * temperature_k / carrier_mass_kg))


def recoil_frequency(species, period_m=None):
    """hbar k_g^2 / (2 m): kinetic energy of one grating momentum, in rad/s."""
    a = species.grating_period_m if period_m is None else period_m
    if a <= 0:
        raise DomainError("recoil_frequency: grating period must be > 0")
    k_g = 2.0 * np.pi / a
    return HBAR * k_g ** 2 / (2.0 * species.mass_kg)


# =============================================================================
# COLLIMATION GEOMETRY
# =============================================================================

def acceptance_angle(geom):
    """Full-width angular acceptance of the two-slit collimator."""
    return (geom.slit0_width_m + geom.slit1_width_m) / geom.slit_separation_m


def beam_width_at(geom, z_m):
    """Full geometric width of the collimated beam at plane z (trapezoid support)."""
    s = (z_m - geom.slit0_z_m) / geom.slit_separation_m
    return abs(1.0 - s) * geom.slit0_width_m + abs(s) * geom.slit1_width_m


def propagate_x(atom, geom, z_m):
    """Straight-line transverse position of an atom (or batch) at plane z."""
    return atom.x_at(z_m, geom)


def passes_slits(theta_x, x_at_s1, geom):
    """True where the straight line crosses both collimation slits."""
    x0 = np.asarray(x_at_s1) - np.asarray(theta_x) * geom.slit_separation_m
    tol = 1e-15
    ok1 = np.abs(x_at_s1) <= geom.slit1_width_m / 2.0 + tol
    ok0 = np.abs(x0) <= geom.slit0_width_m / 2.0 + tol
    return ok0 & ok1


# =============================================================================
# SAMPLING
# =============================================================================

def _sample_speeds(source, rng, n):
    v0 = source.mean_speed_mps
    sigma = source.speed_spread_mps
    out = np.empty(0)
    for _ in range(MAX_RESAMPLE_ROUNDS):
        need = n - out.size
        if need <= 0:
            break
        draw = rng.normal(v0, sigma, size=2 * need + 8)
        draw = draw[draw > 0]
        if source.distribution == "supersonic":
            v_max = v0 + SUPERSONIC_CUTOFF_SIGMAS * sigma
            draw = draw[draw < v_max]
            keep = rng.uniform(size=draw.size) < (draw / v_max) ** 3
            draw = draw[keep]
        out = np.concatenate([out, draw[:need]])
    if out.size < n:
        raise DomainError("Speed sampling failed: distribution has no positive support")
    return out


def sample_atoms(source, geom, species, rng, n):
    """
    Draws n atoms uniformly over the phase-space acceptance of the two slits.

    Uniform positions in S0 and S1 map linearly (constant Jacobian) onto a
    uniform (x, theta) distribution over the acceptance parallelogram, so
    every returned atom passes both slits by construction.
    """
    species = tuple(species)
    if not species:
        raise ConfigError("sample_atoms: species list is empty")
    abundances = np.array([sp.abundance for sp in species], dtype=float)
    if abs(abundances.sum() - 1.0) > ABUNDANCE_TOLERANCE:
        raise ConfigError(f"Species abundances sum to {abundances.sum():.12f}, expected 1")
    if n < 0:
        raise DomainError("sample_atoms: n must be >= 0")

    speed = _sample_speeds(source, rng, n)
    x0 = rng.uniform(-geom.slit0_width_m / 2.0, geom.slit0_width_m / 2.0, size=n)
    x1 = rng.uniform(-geom.slit1_width_m / 2.0, geom.slit1_width_m / 2.0, size=n)
    theta = (x1 - x0) / geom.slit_separation_m
    y = rng.uniform(-geom.aperture_height_m / 2.0, geom.aperture_height_m / 2.0, size=n)

    sp_idx = rng.choice(len(species), size=n, p=abundances)
    lv_idx = np.zeros(n, dtype=int)
    u = rng.uniform(size=n)
    for i, sp in enumerate(species):
        cdf = np.cumsum(sp.level_weights())
        mask = sp_idx == i
        lv_idx[mask] = np.minimum(np.searchsorted(cdf, u[mask], side="right"), len(cdf) - 1)

    return AtomBatch(
        species=species,
        species_index=sp_idx,
        level_index=lv_idx,
        weight=np.ones(n),
        speed_mps=speed,
        theta_x_rad=theta,
        x_m=x1,
        y_m=y,
    )


def sample_atom(source, geom, species, rng):
    """Single-atom draw; same distribution and stream as sample_atoms(n=1)."""
    batch = sample_atoms(source, geom, species, rng, 1)
    atom = batch.atom(0)
    assert passes_slits(atom.theta_x_rad, atom.x_m, geom), "sampled atom misses a slit"
    return atom
