"""
Interferometer Operations Module
================================
Three-grating Bragg Mach-Zehnder: path enumeration, mirror-position phase,
transport of every path to the detector slit, and Monte Carlo synthesis of
fringe and diffraction-profile scans.

How a Monte Carlo chunk is evaluated:
1. Sample a batch of atoms through the two collimation slits
2. Build each grating's unitary in the absolute momentum basis n
3. Combine them with the free-flight phases into path amplitudes A[n1, n2, n3]
4. Group paths by (n3, n1 + n2): members leave the interferometer at the same
   place, so they add coherently; different groups add in intensity
5. Store each group as Fourier harmonics of the mirror phase
   Phi = k_g (x_M1 - 2 x_M2 + x_M3), so any mirror sweep is a cheap sum
6. Keep the groups whose exit ray falls inside the detector slit and on the ribbon

Sweeps run over fixed-size chunks whose random streams depend only on
(seed, chunk index), so results do not depend on the number of threads.
"""

import itertools
import logging
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from scipy.signal import find_peaks

from beam_ops import (
    DEFAULT_SPECIES, AtomBatch, BeamSource, CollimationGeometry,
    de_broglie, diffraction_angle, sample_atoms, HBAR,
)
from bragg_ops import BraggSettings, StandingWave, grating_propagators
from errors import ConfigError, DomainError
from worker_ops import run_ordered

logger = logging.getLogger("Interferometer")

# =============================================================================
# CONFIGURATION
# =============================================================================

DEFAULT_CHUNK_SIZE = 2048
DEFAULT_SPACING_TOLERANCE = 1e-3    # |L12 - L23| allowed, m
IDEAL_AREAS = (np.pi / 2.0, np.pi, np.pi / 2.0)

PORT_STRAY = 0
PORT_ONE = 1
PORT_TWO = 2
SLIT_SCAN_PORT = 0                  # label for detector-slit sweeps

STREAM_ATOMS = 0

SWEEP_VARIABLES = ("x_m1", "x_m2", "x_m3", "slit_x", "time")
CSV_FLOAT_FORMAT = "%.9g"


# =============================================================================
# DOMAIN TYPES
# =============================================================================

def _default_gratings():
    return (StandingWave(power_w=0.040), StandingWave(power_w=0.080), StandingWave(power_w=0.040))


@dataclass(frozen=True)
class InterferometerConfig:
    """
    Everything the forward model needs for one run.

    `slit_x_m` applies to `port`; None puts the slit on the nominal centre of
    that port. `slit_width_m` None uses the geometry's detector-slit width.
    """
    gratings: tuple = field(default_factory=_default_gratings)
    geometry: CollimationGeometry = field(default_factory=CollimationGeometry)
    source: BeamSource = field(default_factory=lambda: BeamSource(mean_speed_mps=1050.0))
    species: tuple = DEFAULT_SPECIES
    bragg: BraggSettings = field(default_factory=BraggSettings)
    active: tuple = (True, True, True)
    port: int = PORT_ONE
    slit_x_m: float = None
    slit_width_m: float = None
    phase_sigma_rad: float = 0.0
    washout: bool = True
    spacing_tolerance_m: float = DEFAULT_SPACING_TOLERANCE

    def __post_init__(self):
        if len(self.gratings) != 3 or len(self.active) != 3:
            raise ConfigError("Exactly three standing waves (and active flags) are required")
        z1, z2, z3 = self.geometry.mirror_z_m
        if abs((z2 - z1) - (z3 - z2)) > self.spacing_tolerance_m:
            raise ConfigError(
                f"Grating spacings {z2 - z1:.4f} m and {z3 - z2:.4f} m differ by more "
                f"than {self.spacing_tolerance_m} m")
        if self.slit_width_m is not None and self.slit_width_m <= 0:
            raise ConfigError("Detector slit width must be > 0")
        if self.port not in (PORT_ONE, PORT_TWO):
            raise ConfigError("Port must be 1 or 2")
        if self.phase_sigma_rad < 0:
            raise ConfigError("Phase dispersion sigma must be >= 0")

    @property
    def detector_slit_width_m(self):
        return self.geometry.detector_slit_width_m if self.slit_width_m is None else self.slit_width_m

    def with_grating(self, index, **changes):
        gratings = list(self.gratings)
        gratings[index] = replace(gratings[index], **changes)
        return replace(self, gratings=tuple(gratings))


@dataclass(frozen=True)
class PathState:
    """
    One path through the three gratings. `states` are the absolute momentum
    orders after each grating, `orders` the transfers at each grating.
    amplitude, exit_angle_rad and exit_x_m (at the detector slit) are
    filled in by atom_paths() for one atom.
    """
    states: tuple
    port: int
    amplitude: complex = None
    exit_angle_rad: float = None
    exit_x_m: float = None

    @property
    def orders(self):
        n = (0,) + tuple(self.states)
        return tuple(b - a for a, b in zip(n, n[1:]))

    def offset_at(self, z_m, geom):
        """Transverse offset from the undiffracted ray at plane z, per radian of theta_1."""
        planes = list(geom.mirror_z_m)
        n_prev, offset = 0, 0.0
        for j, z_mirror in enumerate(planes):
            if z_m <= z_mirror:
                break
            z_next = planes[j + 1] if j + 1 < len(planes) else np.inf
            n_prev = self.states[j]
            offset += n_prev * (min(z_m, z_next) - z_mirror)
        return offset


@dataclass
class FringeScan:
    """
    Expected rates (and optionally counts) over a sweep.

    harmonics[k, p, m] are the Fourier coefficients of the rate at step k and
    port p in the mirror phase: rate = h_0 + 2 Re sum_m h_m exp(i m Phi_k).
    port_harmonics[k, j, m] hold the same for everything leaving through
    port j + 1, with no detector slit; those two fluxes are complementary.
    """
    variable: str
    values: np.ndarray
    phases: np.ndarray
    ports: tuple
    harmonics: np.ndarray
    n_samples: int
    chunk_rates: np.ndarray = None
    counts: np.ndarray = None
    bin_s: float = 0.0
    port_harmonics: np.ndarray = None

    def __post_init__(self):
        n_steps = len(self.values)
        if self.phases.shape != (n_steps,) or self.harmonics.shape[:2] != (n_steps, len(self.ports)):
            raise DomainError("FringeScan: inconsistent array lengths")
        if self.port_harmonics is not None and self.port_harmonics.shape[:2] != (n_steps, 2):
            raise DomainError("FringeScan: port harmonics must cover both ports at every step")
        if self.counts is not None and self.counts.shape != (n_steps, len(self.ports)):
            raise DomainError("FringeScan: counts shape does not match the sweep")

    @property
    def expected_rates(self):
        return rates_from_harmonics(self.harmonics, self.phases)

    def rates(self, port):
        return self.expected_rates[:, self._port_index(port)]

    def port_flux(self, port):
        """Rate leaving through port 1 or 2 (all atoms, no detector slit) at every step."""
        if self.port_harmonics is None or port not in (PORT_ONE, PORT_TWO):
            raise DomainError(f"No label-integrated flux for port {port}")
        return rates_from_harmonics(self.port_harmonics, self.phases)[:, port - 1]

    def _port_index(self, port):
        if port not in self.ports:
            raise DomainError(f"Port {port} not in scan (ports {self.ports})")
        return self.ports.index(port)

    def rate_error(self, port):
        """Standard error of the expected rate from the spread between chunks."""
        if self.chunk_rates is None or self.chunk_rates.shape[0] < 2:
            return np.zeros(len(self.values))
        per_chunk = self.chunk_rates[:, :, self._port_index(port)]
        return per_chunk.std(axis=0, ddof=1) / np.sqrt(per_chunk.shape[0])

    def to_frame(self):
        rows = []
        rates = self.expected_rates
        for k, value in enumerate(self.values):
            for p, port in enumerate(self.ports):
                rows.append({
                    "sweep_value": value,
                    "port": port,
                    "expected_rate_hz": max(rates[k, p], 0.0),
                    "counts": int(self.counts[k, p]) if self.counts is not None else 0,
                    "bin_s": self.bin_s,
                })
        return pd.DataFrame(rows, columns=["sweep_value", "port", "expected_rate_hz", "counts", "bin_s"])

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)


@dataclass(frozen=True)
class Sweep:
    """
    Swept variable and its values: mirror positions in m, detector-slit x in
    m, or time in s (x_M3 = x_M3(0) + v t + q t^2, a piezo ramp with
    quadratic hysteresis).
    """
    variable: str
    values: tuple
    piezo_speed_mps: float = 120e-9
    piezo_quadratic_mps2: float = 0.0

    def __post_init__(self):
        if self.variable not in SWEEP_VARIABLES:
            raise ConfigError(f"Unknown sweep variable '{self.variable}', expected one of {SWEEP_VARIABLES}")
        if len(self.values) == 0:
            raise ConfigError("Sweep has no values")


@dataclass
class PathGroups:
    """Per-atom coherent groups of one chunk, keyed by (n3, n1 + n2)."""
    harmonics: np.ndarray       # (atoms, n3, s, m)
    x_slit: np.ndarray          # (atoms, n3, s) exit x at the detector-slit plane
    x_detector: np.ndarray      # (atoms, n3, s) x at the detector ribbon
    labels: np.ndarray          # (n3, s) port label
    keep: np.ndarray            # (n3, s) groups propagated to the detector
    final_states: np.ndarray
    sums: np.ndarray

    def probabilities(self, phase):
        """Group probabilities (atoms, n3, s) at mirror phase `phase` (scalar or per atom)."""
        phase = np.broadcast_to(np.asarray(phase, dtype=float), (self.harmonics.shape[0],))
        m = np.arange(self.harmonics.shape[-1])
        rot = np.exp(1j * m[None, :] * phase[:, None])[:, None, None, :]
        h = self.harmonics * rot
        return h[..., 0].real + 2.0 * np.sum(h[..., 1:], axis=-1).real

    def port_harmonics(self):
        """Harmonics summed over atoms and every group labelled port 1, port 2: (2, M)."""
        return np.stack([np.sum(self.harmonics * (self.labels == port)[None, :, :, None], axis=(0, 1, 2))
                         for port in (PORT_ONE, PORT_TWO)])

    def accepted_harmonics(self, centre_m, width_m, ribbon_m):
        """Harmonics summed over atoms and groups that pass the slit and hit the ribbon."""
        ok = (np.abs(self.x_slit - centre_m) <= width_m / 2.0) & (np.abs(self.x_detector) <= ribbon_m / 2.0)
        ok &= self.keep[None, :, :]
        return np.sum(self.harmonics * ok[..., None], axis=(0, 1, 2))


# =============================================================================
# PHASES AND CONTRAST FACTORS
# =============================================================================

def mirror_phase(x_m1, x_m2, x_m3, gratings):
    """Phi = k_g1 x_M1 - 2 k_g2 x_M2 + k_g3 x_M3."""
    k1, k2, k3 = (g.grating_wavevector for g in gratings)
    return k1 * np.asarray(x_m1) - 2.0 * k2 * np.asarray(x_m2) + k3 * np.asarray(x_m3)


def port_intensity(phase_sum, contrast):
    """Normalised port intensities (1 + C cos phi, 1 - C cos phi); they sum to 2."""
    if not 0.0 <= contrast <= 1.0:
        raise DomainError("port_intensity: contrast must lie in [0, 1]")
    c = contrast * np.cos(phase_sum)
    return 1.0 + c, 1.0 - c


def delta_k_washout(theta_z, aperture_height_m, grating_wavevector=None):
    """
    Contrast factor |sinc(dk_y H / 2)| from the vertical grating-vector
    mismatch dk_y = k_g (theta_z1 + theta_z3 - 2 theta_z2), averaged over a
    uniform aperture of height H.
    """
    if aperture_height_m <= 0:
        raise DomainError("delta_k_washout: aperture height must be > 0")
    if grating_wavevector is None:
        grating_wavevector = StandingWave().grating_wavevector
    t1, t2, t3 = theta_z
    dk_y = grating_wavevector * (t1 + t3 - 2.0 * t2)
    return float(abs(np.sinc(dk_y * aperture_height_m / 2.0 / np.pi)))


def phase_dispersion_contrast(sigma_rad):
    """Contrast factor exp(-sigma^2 / 2) of a Gaussian phase spread."""
    if sigma_rad < 0:
        raise DomainError("phase_dispersion_contrast: sigma must be >= 0")
    return float(np.exp(-0.5 * sigma_rad ** 2))


def rates_from_harmonics(harmonics, phases):
    m = np.arange(harmonics.shape[-1])
    rot = np.exp(1j * np.outer(phases, m))[:, None, :]
    h = harmonics * rot
    return h[..., 0].real + 2.0 * np.sum(h[..., 1:], axis=-1).real


# =============================================================================
# PATHS
# =============================================================================

def port_label(final_state, state_sum):
    if state_sum == 1 and final_state == 0:
        return PORT_ONE
    if state_sum == 1 and final_state == 1:
        return PORT_TWO
    return PORT_STRAY


def enumerate_paths(orders_per_grating):
    """
    All |set|^3 sequences of absolute orders (n1, n2, n3) with their port
    labels. Port 1 holds (1, 0, 0) and (0, 1, 0), port 2 holds (1, 0, 1) and
    (0, 1, 1); everything else is a stray path.
    """
    orders = sorted(set(int(o) for o in orders_per_grating))
    paths = []
    for states in itertools.product(orders, repeat=3):
        paths.append(PathState(states=states, port=port_label(states[2], states[0] + states[1])))
    return paths


def primary_species(species):
    coupled = [sp for sp in species if sp.laser_coupled]
    if not coupled:
        raise ConfigError("No laser-coupled species in the beam")
    return max(coupled, key=lambda sp: sp.abundance)


def nominal_diffraction_angle(config, speed_mps=None):
    sp = primary_species(config.species)
    v = config.source.mean_speed_mps if speed_mps is None else speed_mps
    return diffraction_angle(de_broglie(sp.mass_kg, v), config.gratings[1].period_m)


def _levers(geom, z_m, final_states, state_sums):
    """Offset per radian of theta_1 for group (n3, s) at plane z."""
    z1, z2, z3 = geom.mirror_z_m
    spacing = 0.5 * (z3 - z1)
    return state_sums[None, :] * spacing + final_states[:, None] * (z_m - z3)


def port_centre(config, port):
    """Nominal exit position of a port at the detector-slit plane (mean speed, axial ray)."""
    if port not in (PORT_ONE, PORT_TWO):
        raise ConfigError("Port must be 1 or 2")
    geom = config.geometry
    members = [p for p in enumerate_paths((0, 1)) if p.port == port]
    lever = np.mean([p.offset_at(geom.detector_slit_z_m, geom) for p in members])
    return float(nominal_diffraction_angle(config) * lever)


def slit_centre(config, port):
    if port == config.port and config.slit_x_m is not None:
        return float(config.slit_x_m)
    return port_centre(config, port)


def _identity_propagators(n_atoms, size):
    return np.broadcast_to(np.eye(size, dtype=complex), (n_atoms, size, size))


def _free_flight(config, batch, states):
    """exp(-i omega_x(n) L / v) for the two drift segments, each (atoms, D)."""
    k_g = config.gratings[1].grating_wavevector
    mass = batch.mass_kg()
    q = mass * batch.speed_mps * batch.theta_x_rad / HBAR
    n = states[None, :].astype(float)
    omega = HBAR * (2.0 * n * q[:, None] * k_g + n ** 2 * k_g ** 2) / (2.0 * mass[:, None])
    z1, z2, z3 = config.geometry.mirror_z_m
    t12 = ((z2 - z1) / batch.speed_mps)[:, None]
    t23 = ((z3 - z2) / batch.speed_mps)[:, None]
    return np.exp(-1j * omega * t12), np.exp(-1j * omega * t23)


def path_amplitudes(config, batch):
    """
    Amplitudes A[i, n1, n2, n3] for every atom, excluding mirror-position
    phases (those enter through the group harmonics).
    """
    states = config.bragg.states()
    size = states.size
    units = []
    for j, wave in enumerate(config.gratings):
        if config.active[j]:
            units.append(grating_propagators(wave, batch, config.bragg, ideal_area=IDEAL_AREAS[j]))
        else:
            units.append(_identity_propagators(len(batch), size))
    f12, f23 = _free_flight(config, batch, states)
    start = int(np.nonzero(states == 0)[0][0])

    first = units[0][:, :, start] * f12                       # (i, n1)
    second = units[1] * first[:, None, :] * f23[:, :, None]   # (i, n2, n1)
    return np.einsum("icb,iba->iabc", units[2], second)


def atom_phase_offsets(config, batch, rng):
    """Per-atom shift of the mirror phase: Delta-k washout plus Gaussian dispersion."""
    psi = np.zeros(len(batch))
    if config.washout:
        k_g = config.gratings[1].grating_wavevector
        t1, t2, t3 = (g.theta_z_rad for g in config.gratings)
        psi += k_g * batch.y_m * (t1 + t3 - 2.0 * t2)
    if config.phase_sigma_rad > 0:
        psi += rng.normal(0.0, config.phase_sigma_rad, size=len(batch))
    return psi


def path_groups(config, batch, phase_offsets=None):
    """Coherent groups with exit positions for one batch of atoms."""
    amp = path_amplitudes(config, batch)
    n_atoms, size = amp.shape[0], amp.shape[1]
    states = config.bragg.states()
    n_sums = 2 * size - 1
    harm = np.zeros((n_atoms, size, n_sums, size), dtype=complex)

    for s_idx in range(n_sums):
        first = list(range(max(0, s_idx - size + 1), min(size, s_idx + 1)))
        members = np.stack([amp[:, a, s_idx - a, :] for a in first], axis=1)   # (i, L, n3)
        for m in range(len(first)):
            harm[:, :, s_idx, m] = np.sum(members[:, m:, :] * np.conj(members[:, :len(first) - m, :]), axis=1)

    if phase_offsets is not None:
        m = np.arange(size)
        harm *= np.exp(1j * np.outer(phase_offsets, m))[:, None, None, :]

    final_states = states
    state_sums = 2 * states[0] + np.arange(n_sums)
    labels = np.array([[port_label(n3, s) for s in state_sums] for n3 in final_states])
    keep = np.ones_like(labels, dtype=bool) if config.bragg.strays else labels != PORT_STRAY

    geom = config.geometry
    theta1 = diffraction_angle(de_broglie(batch.mass_kg(), batch.speed_mps), config.gratings[1].period_m)
    lever_slit = _levers(geom, geom.detector_slit_z_m, final_states, state_sums)
    lever_det = _levers(geom, geom.detector_z_m, final_states, state_sums)
    x_slit = batch.x_at(geom.detector_slit_z_m, geom)[:, None, None] + theta1[:, None, None] * lever_slit[None]
    x_det = batch.x_at(geom.detector_z_m, geom)[:, None, None] + theta1[:, None, None] * lever_det[None]

    return PathGroups(harmonics=harm, x_slit=x_slit, x_detector=x_det, labels=labels, keep=keep,
                      final_states=final_states, sums=state_sums)


def port_probabilities(config, batch, phase=None):
    """
    Per-atom probabilities of leaving through port 1, port 2, a stray path,
    or being lost to spontaneous emission, at mirror phase `phase` (defaults
    to the configured mirror positions). The four sum to one.
    """
    if phase is None:
        phase = mirror_phase(*(g.x_m for g in config.gratings), config.gratings)
    groups = path_groups(config, batch)
    prob = groups.probabilities(phase)
    port1 = np.sum(prob * (groups.labels == PORT_ONE), axis=(1, 2))
    port2 = np.sum(prob * (groups.labels == PORT_TWO), axis=(1, 2))
    total = np.sum(prob, axis=(1, 2))
    return {"port1": port1, "port2": port2, "stray": total - port1 - port2, "loss": 1.0 - total}


def atom_paths(config, atom, phase=0.0):
    """
    Every path of one AtomSample with its amplitude at mirror phase `phase`,
    its exit angle and its x at the detector slit. Amplitudes of a port add
    coherently: |sum|^2 over the port-1 paths is port_probabilities' port1.
    """
    batch = AtomBatch.from_atoms([atom])
    amp = path_amplitudes(config, batch)[0]
    states = config.bragg.states()
    geom = config.geometry
    theta1 = float(diffraction_angle(de_broglie(atom.species.mass_kg, atom.speed_mps),
                                     config.gratings[1].period_m))
    x_slit = atom.x_at(geom.detector_slit_z_m, geom)
    out = []
    for path in enumerate_paths(states):
        n1, n2, n3 = path.states
        i1, i2, i3 = (int(np.searchsorted(states, n)) for n in path.states)
        out.append(replace(
            path,
            amplitude=complex(amp[i1, i2, i3] * np.exp(1j * n1 * phase)),
            exit_angle_rad=atom.theta_x_rad + n3 * theta1,
            exit_x_m=x_slit + theta1 * path.offset_at(geom.detector_slit_z_m, geom),
        ))
    return out


# =============================================================================
# MONTE CARLO
# =============================================================================

def _check_active(config):
    if not any(config.active):
        raise ConfigError("No active gratings")


def sweep_phases(config, sweep):
    x = np.array([g.x_m for g in config.gratings], dtype=float)
    values = np.asarray(sweep.values, dtype=float)
    positions = np.tile(x, (values.size, 1))
    if sweep.variable in ("x_m1", "x_m2", "x_m3"):
        positions[:, int(sweep.variable[-1]) - 1] = values
    elif sweep.variable == "time":
        positions[:, 2] = x[2] + sweep.piezo_speed_mps * values + sweep.piezo_quadratic_mps2 * values ** 2
    return mirror_phase(positions[:, 0], positions[:, 1], positions[:, 2], config.gratings)


def _chunk_sizes(n_samples, chunk_size):
    sizes = [chunk_size] * (n_samples // chunk_size)
    if n_samples % chunk_size:
        sizes.append(n_samples % chunk_size)
    return sizes


def _run_chunk(config, chunk_index, n_atoms, seed, centres, width):
    rng = np.random.default_rng([seed, chunk_index, STREAM_ATOMS])
    batch = sample_atoms(config.source, config.geometry, config.species, rng, n_atoms)
    psi = atom_phase_offsets(config, batch, rng)
    groups = path_groups(config, batch, psi)
    ribbon = config.geometry.ribbon_width_m
    accepted = np.stack([groups.accepted_harmonics(c, width, ribbon) for c in centres])
    return accepted, groups.port_harmonics()


def _simulate(config, sweep, centres, ports, n_samples, seed, threads, chunk_size):
    """centres: (n_steps, n_ports) slit positions."""
    _check_active(config)
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    if n_samples < 1000:
        logger.warning("[Interferometer] %d samples is below the 1e3 needed for a stable contrast",
                       n_samples)

    phases = sweep_phases(config, sweep)
    unique, inverse = np.unique(centres.ravel(), return_inverse=True)
    sizes = _chunk_sizes(n_samples, chunk_size)
    width = config.detector_slit_width_m
    flux = config.source.flux_hz

    logger.info("[Interferometer] %s sweep: %d steps, %d atoms in %d chunks (%s model)",
                sweep.variable, len(sweep.values), n_samples, len(sizes), config.bragg.model)
    results = run_ordered(_run_chunk,
                          [(config, i, n, seed, unique, width) for i, n in enumerate(sizes)],
                          threads=threads)

    total = np.zeros_like(results[0][0])
    port_total = np.zeros_like(results[0][1])
    for accepted, by_port in results:      # index order keeps the sum reproducible
        total = total + accepted
        port_total = port_total + by_port
    shape = centres.shape + (total.shape[-1],)
    harmonics = (flux / n_samples) * total[inverse].reshape(shape)
    port_harmonics = np.broadcast_to((flux / n_samples) * port_total, (len(phases),) + port_total.shape).copy()

    chunk_rates = np.stack([
        rates_from_harmonics((flux / n) * accepted[inverse].reshape(shape), phases)
        for (accepted, _), n in zip(results, sizes)
    ])
    return FringeScan(variable=sweep.variable, values=np.asarray(sweep.values, dtype=float),
                      phases=phases, ports=tuple(ports), harmonics=harmonics,
                      n_samples=n_samples, chunk_rates=chunk_rates, port_harmonics=port_harmonics)


def monte_carlo_fringe(config, sweep, n_samples, seed, threads=1, chunk_size=DEFAULT_CHUNK_SIZE):
    """
    Expected rates at both exit ports for every sweep value. For a
    `slit_x` sweep the single detector slit is scanned instead (port 0).
    """
    n_steps = len(sweep.values)
    if sweep.variable == "slit_x":
        centres = np.asarray(sweep.values, dtype=float)[:, None]
        ports = (SLIT_SCAN_PORT,)
    else:
        ports = (PORT_ONE, PORT_TWO)
        centres = np.tile([slit_centre(config, p) for p in ports], (n_steps, 1))
    return _simulate(config, sweep, centres, ports, n_samples, seed, threads, chunk_size)


def diffraction_profile(config, slit_values, n_samples, seed, threads=1, chunk_size=DEFAULT_CHUNK_SIZE):
    """Rate versus detector-slit position with exactly one grating active."""
    if sum(bool(a) for a in config.active) != 1:
        raise ConfigError("Diffraction profile needs exactly one active grating")
    return monte_carlo_fringe(config, Sweep("slit_x", tuple(slit_values)), n_samples, seed,
                              threads=threads, chunk_size=chunk_size)


def _chunk_populations(config, chunk_index, n_atoms, seed, phase):
    rng = np.random.default_rng([seed, chunk_index, STREAM_ATOMS])
    batch = sample_atoms(config.source, config.geometry, config.species, rng, n_atoms)
    prob = path_groups(config, batch).probabilities(phase)
    return np.sum(prob, axis=(0, 2)) / n_atoms


def order_populations(config, n_samples, seed, threads=1, chunk_size=DEFAULT_CHUNK_SIZE):
    """
    Fraction of atoms leaving in each final momentum order, no slit.
    Returns (states, per-chunk fractions of shape (chunks, D), chunk sizes).
    """
    _check_active(config)
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    phase = mirror_phase(*(g.x_m for g in config.gratings), config.gratings)
    sizes = _chunk_sizes(n_samples, chunk_size)
    per_chunk = run_ordered(_chunk_populations,
                            [(config, i, n, seed, phase) for i, n in enumerate(sizes)],
                            threads=threads)
    return config.bragg.states(), np.stack(per_chunk), np.asarray(sizes)


def order_rates(config, n_samples, seed, chunk_size=DEFAULT_CHUNK_SIZE):
    """Integrated rate (atoms/s) leaving in each final momentum order, no slit."""
    states, per_chunk, sizes = order_populations(config, n_samples, seed, chunk_size=chunk_size)
    totals = np.zeros(states.size)
    for frac, n in zip(per_chunk, sizes):
        totals = totals + frac * n
    rates = config.source.flux_hz * totals / n_samples
    return {int(n): float(r) for n, r in zip(states, rates)}


def fringe_coefficients(phases, rates):
    """Mean rate and contrast of `rates` regressed on [1, cos Phi, sin Phi]."""
    phases = np.asarray(phases, dtype=float)
    if np.ptp(np.mod(phases, 2.0 * np.pi)) < 1e-12:
        raise DomainError("fringe_contrast: the sweep does not move the mirror phase")
    design = np.column_stack([np.ones_like(phases), np.cos(phases), np.sin(phases)])
    coef, *_ = np.linalg.lstsq(design, np.asarray(rates, dtype=float), rcond=None)
    if coef[0] <= 0:
        raise DomainError("fringe_contrast: mean rate is not positive")
    return float(coef[0]), float(np.hypot(coef[1], coef[2]) / coef[0])


def fringe_contrast(scan, port):
    """Contrast of the expected rates by linear regression on [1, cos Phi, sin Phi]."""
    return fringe_coefficients(scan.phases, scan.rates(port))[1]


def profile_peaks(scan, min_fraction=0.05):
    """
    Peak centres of a slit scan: scipy find_peaks on the expected rates,
    each refined to the rate-weighted centroid of its half-maximum region.
    """
    x = np.asarray(scan.values)
    rate = scan.expected_rates[:, 0]
    if rate.max() <= 0:
        return np.array([])
    padded = np.concatenate([[0.0], rate, [0.0]])
    idx, _ = find_peaks(padded, prominence=min_fraction * rate.max())
    idx = idx - 1
    centres = []
    for i in idx:
        lo = i
        while lo > 0 and rate[lo - 1] >= 0.5 * rate[i]:
            lo -= 1
        hi = i
        while hi < rate.size - 1 and rate[hi + 1] >= 0.5 * rate[i]:
            hi += 1
        w = rate[lo:hi + 1]
        centres.append(float(np.sum(w * x[lo:hi + 1]) / np.sum(w)))
    return np.array(centres)
