"""
Analysis Operations Module
==========================
Fringe fitting, contrast extraction, figure of merit and phase sensitivity.

This module provides:
- fit_fringes(): Poisson maximum-likelihood fit of B + I (1 + C cos(phi0 + phi1 t + phi2 t^2))
- contrast(), figure_of_merit(), shot_noise_limit()
- measured_sensitivity(), sensitivity_report(): phase noise from fit residuals
- min_detectable_perturbation(), phase_noise_contrast_budget()
- helpers for fringe period, wavefront rms and integration time

Fit strategy:
1. Coarse grid over the phase rate phi1 (a window around phase_guess when
   one is given); at each point the model is linear in the remaining
   amplitudes and is solved by weighted least squares
2. The best grid points seed a Levenberg-Marquardt refinement of the
   Poisson deviance residuals
3. If a refinement fails, the next grid candidate is tried (MAX_FIT_RETRIES)
4. The fringe amplitude is corrected for the noise a search over N phase
   rates picks up: r^2 -> r^2 - H_N (var u + var w), H_N the harmonic number

The oscillating part is refined in Cartesian form u cos(x) + w sin(x), so
the contrast is never negative and stays well defined near zero.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import constants
from scipy.optimize import least_squares, nnls
from scipy.special import xlogy

from errors import ConvergenceError, DomainError, FitError, InsufficientDataError, SensitivityError

logger = logging.getLogger("Fit")

# =============================================================================
# CONFIGURATION
# =============================================================================

MIN_BINS = 6
MAX_FIT_RETRIES = 3             # grid candidates tried before giving up
GRID_OVERSAMPLING = 8           # phase-rate grid points per Fourier bin
PHASE_RATE_WINDOW = 0.1         # grid half-width around phase_guess, fraction of the guess
MIN_WINDOW_STEPS = 4
QUADRATIC_TRIALS = 3            # extra search freedom of a free phi2
MIN_EXPECTED_COUNTS = 1e-12
FIT_TOLERANCE = 1e-12
MAX_FIT_EVALUATIONS = 20000
DEFAULT_BOOTSTRAP_SEED = 0

HBAR_EV_S = constants.hbar / constants.e


# =============================================================================
# DOMAIN TYPES
# =============================================================================

@dataclass
class FringeFit:
    """Fitted fringe: rates in counts/s, phase polynomial in rad, rad/s, rad/s^2."""
    mean_rate: float
    background: float
    contrast: float
    phi0: float
    phi1: float
    phi2: float
    sigma: dict
    chi2: float
    dof: int
    bin_s: float
    background_fitted: bool = False
    sigma_bootstrap: dict = field(default=None)

    def phase(self, t):
        t = np.asarray(t, dtype=float)
        return self.phi0 + self.phi1 * t + self.phi2 * t ** 2

    def rate(self, t, beam_on=True):
        """Expected detected rate B + I (1 + C cos phi(t))."""
        signal = self.mean_rate * (1.0 + self.contrast * np.cos(self.phase(t)))
        return self.background + np.where(beam_on, signal, 0.0)

    def slope(self, t):
        """d rate / d phi at time t (counts/s per rad)."""
        return -self.mean_rate * self.contrast * np.sin(self.phase(t))

    def as_dict(self):
        out = {
            "mean_rate_hz": self.mean_rate,
            "background_hz": self.background,
            "contrast": self.contrast,
            "phi0_rad": self.phi0,
            "phi1_rad_s": self.phi1,
            "phi2_rad_s2": self.phi2,
            "chi2": self.chi2,
            "dof": self.dof,
            "background_fitted": int(self.background_fitted),
        }
        for key, unit in (("mean_rate", "hz"), ("background", "hz"), ("contrast", ""),
                          ("phi0", "rad"), ("phi1", "rad_s"), ("phi2", "rad_s2")):
            name = f"sigma_{key}" + (f"_{unit}" if unit else "")
            out[name] = self.sigma.get(key, 0.0)
        return out


@dataclass(frozen=True)
class SensitivityReport:
    measured: float             # rad/sqrt(Hz)
    shot_noise: float           # rad/sqrt(Hz)
    figure_of_merit: float      # counts/s
    shot_scale: float = 1.0     # fitted variance scale of the counting noise
    phase_variance_per_bin: float = 0.0

    def as_dict(self):
        return {
            "measured_sensitivity_rad_sqrt_hz": self.measured,
            "shot_noise_limit_rad_sqrt_hz": self.shot_noise,
            "figure_of_merit_hz": self.figure_of_merit,
            "shot_noise_scale": self.shot_scale,
            "phase_variance_per_bin_rad2": self.phase_variance_per_bin,
        }


# =============================================================================
# SIMPLE FIGURES
# =============================================================================

def contrast(i_max, i_min):
    """(I_max - I_min) / (I_max + I_min)."""
    if i_max < 0 or i_min < 0:
        raise DomainError("contrast: intensities must be >= 0")
    if i_max + i_min == 0:
        raise DomainError("contrast: both intensities are zero")
    return (i_max - i_min) / (i_max + i_min)


def figure_of_merit(mean_rate, contrast_value):
    """I C^2."""
    if mean_rate < 0 or not 0.0 <= contrast_value <= 1.0:
        raise DomainError("figure_of_merit: need I >= 0 and 0 <= C <= 1")
    return mean_rate * contrast_value ** 2


def shot_noise_limit(mean_rate, background, contrast_value):
    """Mid-fringe Poisson limit sqrt(I + B) / (C I), rad/sqrt(Hz)."""
    if mean_rate <= 0 or contrast_value <= 0:
        raise DomainError("shot_noise_limit: I and C must be > 0")
    if background < 0:
        raise DomainError("shot_noise_limit: background must be >= 0")
    return float(np.sqrt(mean_rate + background) / (contrast_value * mean_rate))


def min_detectable_perturbation(delta_phi, tau_s):
    """Energy hbar dphi / tau in eV."""
    if tau_s <= 0:
        raise DomainError("min_detectable_perturbation: tau must be > 0")
    return HBAR_EV_S * delta_phi / tau_s


def phase_noise_contrast_budget(ideal_contrast, sigmas):
    """ideal_C times exp(-sigma^2 / 2) for every independent phase noise."""
    factor = 1.0
    for s in sigmas:
        if s < 0:
            raise DomainError("phase_noise_contrast_budget: sigma must be >= 0")
        factor *= np.exp(-0.5 * s ** 2)
    return float(ideal_contrast * factor)


def wavefront_rms_fraction(sigma_rad):
    """Wavefront rms in units of the wavelength, sigma / 2 pi."""
    return sigma_rad / (2.0 * np.pi)


def integration_time(sensitivity, target_phase):
    """Seconds needed to reach `target_phase` at `sensitivity` rad/sqrt(Hz)."""
    if target_phase <= 0:
        raise DomainError("integration_time: target phase must be > 0")
    return (sensitivity / target_phase) ** 2


def fringe_period(fit, sweep_rate_mps):
    """Mirror displacement per fringe, 2 pi v / phi1."""
    if fit.phi1 == 0:
        raise DomainError("fringe_period: phase rate is zero")
    return float(2.0 * np.pi * sweep_rate_mps / abs(fit.phi1))


# Thermal-beam interferometers with elastic diffraction: (description, I in 1/s, C)
_REFERENCE_INTERFEROMETERS = (
    ("sodium, material gratings (1991)", 290.0, 0.13),
    ("sodium, material gratings (1997, contrast)", 1900.0, 0.49),
    ("sodium, material gratings (1997, flux)", 2e5, 0.17),
    ("metastable argon, Raman-Nath light gratings (1995)", 1.4e4, 0.10),
    ("metastable neon, Bragg light gratings (1995)", 1.5e3, 0.62),
    ("helium, material gratings (2001)", 1e3, 0.71),
    ("lithium, Bragg light gratings", 1.4e4, 0.74),
)


def figure_of_merit_table():
    """List of (description, I, C, I C^2), best figure of merit first."""
    rows = [(name, i, c, figure_of_merit(i, c)) for name, i, c in _REFERENCE_INTERFEROMETERS]
    return sorted(rows, key=lambda r: r[3], reverse=True)


# =============================================================================
# FRINGE FIT - INTERNAL HELPERS
# =============================================================================

class _FitProblem:
    """Data plus which parameters are free. Parameter vector: [I, u, w, (B), (phi1), (phi2)]."""

    def __init__(self, t, counts, bin_s, beam_on, background, phase_rate, freeze_quadratic):
        self.t = t
        self.counts = counts
        self.bin_s = bin_s
        self.on = beam_on.astype(float)
        self.weights = 1.0 / np.sqrt(np.maximum(counts, 1.0))
        self.fit_background = background == "fit"
        self.fixed_background = None if self.fit_background else float(background)
        self.fixed_phase_rate = phase_rate
        self.freeze_quadratic = freeze_quadratic
        self.trials = 1

    def unpack(self, p):
        i, u, w = p[0], p[1], p[2]
        k = 3
        if self.fit_background:
            b = p[k]
            k += 1
        else:
            b = self.fixed_background
        if self.fixed_phase_rate is None:
            phi1 = p[k]
            k += 1
        else:
            phi1 = self.fixed_phase_rate
        phi2 = 0.0 if self.freeze_quadratic else p[k]
        return i, u, w, b, phi1, phi2

    def expected(self, p):
        i, u, w, b, phi1, phi2 = self.unpack(p)
        x = phi1 * self.t + phi2 * self.t ** 2
        return self.bin_s * (b + self.on * (i + u * np.cos(x) + w * np.sin(x)))

    def residuals(self, p):
        """Signed Poisson deviance residuals; their squares sum to the deviance."""
        mu = np.maximum(self.expected(p), MIN_EXPECTED_COUNTS)
        n = self.counts
        dev = 2.0 * (mu - n + xlogy(n, n) - xlogy(n, mu))
        return np.sign(n - mu) * np.sqrt(np.maximum(dev, 0.0))

    @property
    def n_linear(self):
        return 4 if self.fit_background else 3

    def linear_solve(self, phi1, phi2=0.0):
        """Weighted linear solve for (B?, I, u, w) at fixed phase polynomial."""
        x = phi1 * self.t + phi2 * self.t ** 2
        cols = [self.on, self.on * np.cos(x), self.on * np.sin(x)]
        rhs = self.counts / self.bin_s
        if self.fit_background:
            cols.append(np.ones_like(self.t))
        else:
            rhs = rhs - self.fixed_background
        design = np.column_stack(cols) * (self.weights * self.bin_s)[:, None]
        target = rhs * self.weights * self.bin_s
        coef, *_ = np.linalg.lstsq(design, target, rcond=None)
        cost = float(np.sum((design @ coef - target) ** 2))
        b = coef[3] if self.fit_background else self.fixed_background
        return cost, coef[0], coef[1], coef[2], b

    def start_vector(self, i, u, w, b, phi1, phi2):
        p = [i, u, w]
        if self.fit_background:
            p.append(b)
        if self.fixed_phase_rate is None:
            p.append(phi1)
        if not self.freeze_quadratic:
            p.append(phi2)
        return np.array(p, dtype=float)


def _phase_rate_grid(problem, phase_guess):
    span = np.ptp(problem.t) + problem.bin_s
    step = 2.0 * np.pi / (span * GRID_OVERSAMPLING)
    nyquist = np.pi / problem.bin_s
    if phase_guess is None:
        return np.arange(step, nyquist, step), step
    half = max(PHASE_RATE_WINDOW * abs(phase_guess), MIN_WINDOW_STEPS * step)
    grid = phase_guess + np.arange(-half, half + 0.5 * step, step)
    grid = grid[(grid > 0) & (grid < nyquist)]
    return np.concatenate([[phase_guess], grid]), step


def _phase_rate_candidates(problem, phase_guess):
    """Grid points of phi1 ordered by the linear-solve cost, best first. Sets problem.trials."""
    quadratic = 1 if problem.freeze_quadratic else QUADRATIC_TRIALS
    if problem.fixed_phase_rate is not None:
        problem.trials = quadratic
        return [problem.fixed_phase_rate]
    grid, step = _phase_rate_grid(problem, phase_guess)
    problem.trials = grid.size * quadratic
    costs = np.array([problem.linear_solve(g)[0] for g in grid])

    # local minima only, so retries land on genuinely different fringes
    order = np.argsort(costs)
    picked = []
    for idx in order:
        if all(abs(grid[idx] - grid[j]) > 2.0 * step for j in picked):
            picked.append(idx)
        if len(picked) >= MAX_FIT_RETRIES:
            break
    return [float(grid[j]) for j in picked]


def _covariance(jac):
    return np.linalg.pinv(jac.T @ jac)


def _harmonic_number(n):
    return float(np.sum(1.0 / np.arange(1, max(int(n), 1) + 1)))


def _amplitude_noise(problem, jac):
    """var u + var w with the phase polynomial held at its fitted value."""
    lin = jac[:, :problem.n_linear]
    cov = np.linalg.pinv(lin.T @ lin)
    return float(max(cov[1, 1] + cov[2, 2], 0.0))


def _polar(problem, p, cov, amplitude_noise=0.0):
    """
    Maps the Cartesian fit vector and its covariance to (I, C, phi0) with
    1-sigma errors. C is corrected for the search over problem.trials phase
    rates: an amplitude of pure noise has E[max r^2] = H_N amplitude_noise.
    """
    i, u, w, b, phi1, phi2 = problem.unpack(p)
    r = float(np.hypot(u, w))
    r_signal = np.sqrt(max(r ** 2 - _harmonic_number(problem.trials) * amplitude_noise, 0.0))
    c = r_signal / i if i > 0 else 0.0
    phi0 = float(np.arctan2(-w, u))

    # gradients of C and phi0 with respect to (I, u, w)
    if r > 0:
        g_c = np.array([-r / i ** 2, u / (i * r), w / (i * r)])
        g_phi = np.array([0.0, w / r ** 2, -u / r ** 2])
    else:
        g_c = np.array([0.0, 1.0 / i, 0.0])
        g_phi = np.zeros(3)
    cov3 = cov[:3, :3]
    sigma = {
        "mean_rate": float(np.sqrt(max(cov[0, 0], 0.0))),
        "contrast": float(np.sqrt(max(g_c @ cov3 @ g_c, 0.0))),
        "phi0": float(np.sqrt(max(g_phi @ cov3 @ g_phi, 0.0))),
        "background": 0.0,
        "phi1": 0.0,
        "phi2": 0.0,
    }
    k = 3
    if problem.fit_background:
        sigma["background"] = float(np.sqrt(max(cov[k, k], 0.0)))
        k += 1
    if problem.fixed_phase_rate is None:
        sigma["phi1"] = float(np.sqrt(max(cov[k, k], 0.0)))
        k += 1
    if not problem.freeze_quadratic:
        sigma["phi2"] = float(np.sqrt(max(cov[k, k], 0.0)))
    return i, c, phi0, b, phi1, phi2, sigma


def _refine(problem, start):
    result = least_squares(problem.residuals, start, method="lm", xtol=FIT_TOLERANCE,
                           ftol=FIT_TOLERANCE, gtol=FIT_TOLERANCE, max_nfev=MAX_FIT_EVALUATIONS)
    if not result.success or not np.all(np.isfinite(result.x)):
        raise ConvergenceError(f"Levenberg-Marquardt stopped: {result.message}")
    i = problem.unpack(result.x)[0]
    if i <= 0:
        raise ConvergenceError("Fitted mean rate is not positive")
    return result


def _fit_series(t, counts, bin_s, beam_on, background, freeze_quadratic, phase_rate, phase_guess):
    problem = _FitProblem(t, counts, bin_s, beam_on, background, phase_rate, freeze_quadratic)
    candidates = _phase_rate_candidates(problem, phase_guess)

    best_guess = None
    last_error = None
    for attempt, phi1 in enumerate(candidates):
        cost, i, u, w, b = problem.linear_solve(phi1)
        if best_guess is None:
            best_guess = {"phi1": phi1, "mean_rate": i, "contrast": float(np.hypot(u, w) / i) if i else 0.0,
                          "background": b, "cost": cost}
        start = problem.start_vector(i, u, w, b, phi1, 0.0)
        try:
            result = _refine(problem, start)
            return problem, result
        except (ConvergenceError, np.linalg.LinAlgError, ValueError) as e:
            last_error = e
            if attempt < len(candidates) - 1:
                logger.warning("[Fit] Attempt %d failed: %s. Trying next grid candidate...",
                               attempt + 1, e)
            else:
                logger.warning("[Fit] All %d attempts failed: %s", len(candidates), e)
    raise ConvergenceError(f"Fringe fit did not converge: {last_error}", best_guess=best_guess)


# =============================================================================
# PUBLIC API
# =============================================================================

def fit_fringe_series(t, counts, bin_s, beam_on=None, background=3370.0, freeze_quadratic=False,
                      phase_rate=None, phase_guess=None, bootstrap=0, bootstrap_seed=DEFAULT_BOOTSTRAP_SEED):
    """
    Fits binned counts (floats allowed) at bin-centre times t.

    background: fixed rate in counts/s, or "fit" (needs beam-off bins).
    phase_rate: freezes phi1 at this value. phase_guess: known phase rate
    (e.g. from the piezo speed); the phi1 grid is then limited to
    PHASE_RATE_WINDOW around it.
    bootstrap: number of parametric-bootstrap refits used for sigma_bootstrap.
    """
    t = np.asarray(t, dtype=float)
    counts = np.asarray(counts, dtype=float)
    beam_on = np.ones(t.shape, dtype=bool) if beam_on is None else np.asarray(beam_on, dtype=bool)
    if t.size < MIN_BINS:
        raise InsufficientDataError(f"Need at least {MIN_BINS} bins, got {t.size}")
    if int(np.sum(beam_on)) < MIN_BINS:
        raise InsufficientDataError(f"Need at least {MIN_BINS} beam-on bins")
    if background == "fit":
        if np.all(beam_on):
            raise FitError("Fitting the background needs flagged (beam-off) bins")
    elif isinstance(background, str) or background < 0:
        raise FitError(f"Invalid background specification: {background!r}")

    problem, result = _fit_series(t, counts, bin_s, beam_on, background, freeze_quadratic,
                                  phase_rate, phase_guess)
    cov = _covariance(result.jac)
    noise = _amplitude_noise(problem, result.jac)
    i, c, phi0, b, phi1, phi2, sigma = _polar(problem, result.x, cov, amplitude_noise=noise)
    if c > 1.0:
        logger.warning("[Fit] Contrast %.4f above 1, clipped", c)
        c = 1.0
    chi2 = float(np.sum(result.fun ** 2))
    dof = int(t.size - result.x.size)

    fit = FringeFit(mean_rate=float(i), background=float(b), contrast=float(c), phi0=phi0,
                    phi1=float(phi1), phi2=float(phi2), sigma=sigma, chi2=chi2, dof=dof,
                    bin_s=bin_s, background_fitted=problem.fit_background)
    logger.info("[Fit] C = %.4f +- %.4f, I = %.1f /s, phi1 = %.4f rad/s (chi2/dof %.2f)",
                fit.contrast, sigma["contrast"], fit.mean_rate, fit.phi1, chi2 / max(dof, 1))

    if bootstrap:
        fit.sigma_bootstrap = _bootstrap(fit, t, bin_s, beam_on, background, freeze_quadratic,
                                         phase_rate, bootstrap, bootstrap_seed)
    return fit


def _bootstrap(fit, t, bin_s, beam_on, background, freeze_quadratic, phase_rate, n, seed):
    rng = np.random.default_rng([seed, 7])
    mean = bin_s * fit.rate(t, beam_on)
    samples = []
    for _ in range(n):
        synthetic = rng.poisson(mean).astype(float)
        try:
            problem, result = _fit_series(t, synthetic, bin_s, beam_on, background, freeze_quadratic,
                                          phase_rate, fit.phi1)
        except ConvergenceError:
            continue
        noise = _amplitude_noise(problem, result.jac)
        i, c, phi0, b, phi1, phi2, _ = _polar(problem, result.x, np.zeros((result.x.size,) * 2), noise)
        samples.append((i, c, b, phi1, phi2))
    if len(samples) < 2:
        return None
    arr = np.array(samples)
    keys = ("mean_rate", "contrast", "background", "phi1", "phi2")
    return {k: float(v) for k, v in zip(keys, arr.std(axis=0, ddof=1))}


def fit_fringes(rec, background=3370.0, freeze_quadratic=False, freeze_phase_rate=None,
                phase_guess=None, bootstrap=0):
    """Fits a CountRecord; see fit_fringe_series for the options."""
    return fit_fringe_series(rec.t_centre_s, rec.counts, rec.bin_s, beam_on=rec.beam_on,
                             background=background, freeze_quadratic=freeze_quadratic,
                             phase_rate=freeze_phase_rate, phase_guess=phase_guess, bootstrap=bootstrap)


def _noise_decomposition(rec, fit):
    """
    Splits the residual variance of beam-on bins into a counting term and a
    phase-noise term: Var(r_i) = a * rate_i / T_b + b * slope_i^2, solved with
    non-negative least squares. Returns (a, b).
    """
    on = rec.beam_on
    t = rec.t_centre_s[on]
    rate = fit.rate(t)
    slope = fit.slope(t)
    if not np.any(np.abs(slope) > 0):
        raise SensitivityError("Fringe slope is zero everywhere; phase sensitivity undefined")
    res = rec.counts[on] / rec.bin_s - rate
    inflate = len(rec) / max(fit.dof, 1)        # residuals shrink by the fitted parameters
    design = np.column_stack([rate / rec.bin_s, slope ** 2])
    scale = np.max(np.abs(design), axis=0)
    scale[scale == 0] = 1.0
    coef, _ = nnls(design / scale, inflate * res ** 2)
    return float(coef[0] / scale[0]), float(coef[1] / scale[1])


def measured_sensitivity(rec, fit):
    """
    Phase sensitivity in rad/sqrt(Hz) from the residual scatter:
    S^2 = a (I + B) / (I C)^2 + T_b * b.
    """
    if fit.contrast <= 0 or fit.mean_rate <= 0:
        raise SensitivityError("Zero fringe contrast; phase sensitivity undefined")
    a, b = _noise_decomposition(rec, fit)
    shot = a * (fit.mean_rate + fit.background) / (fit.mean_rate * fit.contrast) ** 2
    return float(np.sqrt(shot + rec.bin_s * b))


def sensitivity_report(rec, fit):
    a, b = _noise_decomposition(rec, fit)
    measured = measured_sensitivity(rec, fit)
    return SensitivityReport(
        measured=measured,
        shot_noise=shot_noise_limit(fit.mean_rate, fit.background, fit.contrast),
        figure_of_merit=figure_of_merit(fit.mean_rate, min(fit.contrast, 1.0)),
        shot_scale=a,
        phase_variance_per_bin=b,
    )


def phase_scatter_at_mid_fringe(mean_rate, background, contrast_value, duration_s=1.0,
                                repeats=1000, seed=0):
    """
    Monte Carlo check of shot_noise_limit: scatter of the phase inferred
    from repeated mid-fringe counts, scaled to 1 s.
    """
    if mean_rate <= 0 or contrast_value <= 0 or duration_s <= 0:
        raise DomainError("phase_scatter_at_mid_fringe: I, C and duration must be > 0")
    rng = np.random.default_rng([seed, 11])
    expected = (mean_rate + background) * duration_s
    counts = rng.poisson(expected, size=repeats)
    phase = (counts / duration_s - (mean_rate + background)) / (mean_rate * contrast_value)
    return float(np.std(phase, ddof=1) * np.sqrt(duration_s))
