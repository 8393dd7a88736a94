"""
Detector Operations Module
==========================
Hot-wire detector counting model and vibration-induced phase noise.

This module provides:
- DetectorModel: efficiency, background rate, optional noise bursts
- VibrationModel: rms of x_M1 + x_M3 - 2 x_M2 and its bandwidth
- CountRecord: binned counts with a beam-on flag per bin
- simulate_counts(): Poisson counts from a rate function, with an optional
  flagged-beam interval that measures the background alone
- apply_vibration_jitter(): per-bin random phase on a FringeScan

Vibration is taken as white inside its band and fast compared with a bin,
so each bin gets an independent Gaussian phase.
"""

import logging
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from errors import ConfigError, DomainError

logger = logging.getLogger("Detector")

# =============================================================================
# CONFIGURATION
# =============================================================================

DEFAULT_EFFICIENCY = 0.4
DEFAULT_BACKGROUND_HZ = 3370.0
DEFAULT_VIBRATION_RMS_M = 3e-9
DEFAULT_VIBRATION_BANDWIDTH_HZ = 50e3

STREAM_COUNTS = 1
STREAM_VIBRATION = 2

BIN_WIDTH_TOLERANCE = 1e-9
CSV_FLOAT_FORMAT = "%.9g"


# =============================================================================
# DOMAIN TYPES
# =============================================================================

@dataclass(frozen=True)
class DetectorModel:
    efficiency: float = DEFAULT_EFFICIENCY
    background_hz: float = DEFAULT_BACKGROUND_HZ
    burst_rate_hz: float = 0.0
    burst_amplitude_counts: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.efficiency <= 1.0:
            raise ConfigError("Detector efficiency must lie in [0, 1]")
        if self.background_hz < 0:
            raise ConfigError("Detector background must be >= 0")
        if self.burst_rate_hz < 0 or self.burst_amplitude_counts < 0:
            raise ConfigError("Burst rate and amplitude must be >= 0")


@dataclass(frozen=True)
class VibrationModel:
    rms_m: float = DEFAULT_VIBRATION_RMS_M
    bandwidth_hz: float = DEFAULT_VIBRATION_BANDWIDTH_HZ

    def __post_init__(self):
        if self.rms_m < 0:
            raise ConfigError("Vibration rms must be >= 0")
        if self.bandwidth_hz <= 0:
            raise ConfigError("Vibration bandwidth must be > 0")


@dataclass
class CountRecord:
    """Uniformly binned counts. beam_on is False in flagged (background-only) bins."""
    t_start_s: np.ndarray
    bin_s: float
    counts: np.ndarray
    beam_on: np.ndarray = None

    def __post_init__(self):
        self.t_start_s = np.asarray(self.t_start_s, dtype=float)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.beam_on is None:
            self.beam_on = np.ones(self.counts.shape, dtype=bool)
        self.beam_on = np.asarray(self.beam_on, dtype=bool)
        if self.bin_s <= 0:
            raise DomainError("CountRecord: bin width must be > 0")
        if not (self.t_start_s.shape == self.counts.shape == self.beam_on.shape):
            raise DomainError("CountRecord: array lengths differ")
        if np.any(self.counts < 0):
            raise DomainError("CountRecord: counts must be >= 0")
        if self.t_start_s.size > 1:
            steps = np.diff(self.t_start_s)
            if np.max(np.abs(steps - self.bin_s)) > BIN_WIDTH_TOLERANCE * max(1.0, self.bin_s):
                raise DomainError("CountRecord: bins are not uniform")

    def __len__(self):
        return int(self.counts.size)

    @property
    def t_centre_s(self):
        return self.t_start_s + 0.5 * self.bin_s

    def to_frame(self):
        return pd.DataFrame({
            "t_start_s": self.t_start_s,
            "bin_s": np.full(len(self), self.bin_s),
            "counts": self.counts,
            "beam_on": self.beam_on.astype(int),
        })

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)

    @classmethod
    def from_frame(cls, df):
        beam_on = df["beam_on"].to_numpy().astype(bool) if "beam_on" in df else None
        return cls(t_start_s=df["t_start_s"].to_numpy(), bin_s=float(df["bin_s"].iloc[0]),
                   counts=df["counts"].to_numpy(), beam_on=beam_on)


# =============================================================================
# PUBLIC API
# =============================================================================

def vibration_phase_rms(vib, period_m):
    """Interferometer phase noise 2 pi rms / a from the mirror-combination rms."""
    if period_m <= 0:
        raise DomainError("vibration_phase_rms: grating period must be > 0")
    return 2.0 * np.pi * vib.rms_m / period_m


def _draw_counts(expected_rate, det, bin_s, rng):
    mean = bin_s * (det.efficiency * expected_rate + det.background_hz)
    counts = rng.poisson(mean)
    if det.burst_rate_hz > 0 and det.burst_amplitude_counts > 0:
        bursts = rng.poisson(det.burst_rate_hz * bin_s, size=np.shape(mean))
        counts = counts + np.rint(bursts * det.burst_amplitude_counts).astype(np.int64)
    return counts


def simulate_counts(rate_fn, det, bin_s, duration_s, seed, beam_off=None, t0_s=0.0):
    """
    Poisson counts per bin with mean bin * (efficiency * rate + background).

    rate_fn maps an array of bin-centre times to atom rates (atoms/s at the
    detector, before efficiency). `beam_off` is an optional (start, stop)
    interval during which the atomic beam is flagged and only background is
    counted.
    """
    if bin_s <= 0:
        raise DomainError("simulate_counts: bin width must be > 0")
    if duration_s <= 0:
        raise DomainError("simulate_counts: duration must be > 0")
    n_bins = int(round(duration_s / bin_s))
    if n_bins < 1:
        raise DomainError("simulate_counts: duration shorter than one bin")

    t_start = t0_s + bin_s * np.arange(n_bins)
    centres = t_start + 0.5 * bin_s
    rate = np.asarray(rate_fn(centres), dtype=float)
    if rate.shape != centres.shape:
        rate = np.broadcast_to(rate, centres.shape).astype(float)
    if np.any(rate < 0):
        raise DomainError("simulate_counts: negative atom rate")

    beam_on = np.ones(n_bins, dtype=bool)
    if beam_off is not None:
        start, stop = beam_off
        beam_on = ~((centres >= start) & (centres < stop))

    rng = np.random.default_rng([seed, STREAM_COUNTS])
    counts = _draw_counts(np.where(beam_on, rate, 0.0), det, bin_s, rng)
    logger.debug("[Detector] %d bins of %.3g s, %d flagged", n_bins, bin_s, int(np.sum(~beam_on)))
    return CountRecord(t_start_s=t_start, bin_s=bin_s, counts=counts, beam_on=beam_on)


def scan_counts(scan, det, bin_s, seed):
    """Attach Poisson counts of duration bin_s to every step and port of a FringeScan."""
    if bin_s <= 0:
        raise DomainError("scan_counts: bin width must be > 0")
    rates = np.clip(scan.expected_rates, 0.0, None)
    rng = np.random.default_rng([seed, STREAM_COUNTS])
    return replace(scan, counts=_draw_counts(rates, det, bin_s, rng), bin_s=bin_s)


def apply_vibration_jitter(scan, vib, period_m, seed):
    """
    Rotates the fringe harmonics of every sweep step by an independent
    Gaussian phase of rms 2 pi rms / a. Zero rms returns the scan unchanged.
    """
    sigma = vibration_phase_rms(vib, period_m)
    if sigma == 0:
        return scan
    rng = np.random.default_rng([seed, STREAM_VIBRATION])
    delta = rng.normal(0.0, sigma, size=len(scan.values))
    m = np.arange(scan.harmonics.shape[-1])
    rot = np.exp(1j * np.outer(delta, m))[:, None, :]
    logger.debug("[Detector] vibration jitter %.4f rad rms on %d steps", sigma, delta.size)
    by_port = None if scan.port_harmonics is None else scan.port_harmonics * rot
    return replace(scan, harmonics=scan.harmonics * rot, port_harmonics=by_port, chunk_rates=None)
