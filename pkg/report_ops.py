"""
Report Module
=============
Consolidates the outputs of a `fringes` run directory into one summary.

Reads:
- budget_inputs.csv   ideal contrast and the washout, dispersion and
                      vibration contrast factors
                      (the dispersion factor is also quoted as the
                      wavefront rms in waves)
- fringe_fit.csv      fitted fringe and sensitivity figures

Writes report.txt as flat `key = value` lines. The same inputs always
produce the same bytes.
"""

import logging
from pathlib import Path

import numpy as np
import pandas as pd

from analysis_ops import wavefront_rms_fraction
from errors import ConfigError, MissingInputError

logger = logging.getLogger("Report")

# =============================================================================
# CONFIGURATION
# =============================================================================

BUDGET_FILE = "budget_inputs.csv"
FIT_FILE = "fringe_fit.csv"
REPORT_FILE = "report.txt"
REQUIRED_FILES = (BUDGET_FILE, FIT_FILE)

BUDGET_FACTORS = ("washout_factor", "dispersion_factor", "vibration_factor")
BUDGET_COLUMNS = ("ideal_contrast",) + BUDGET_FACTORS

FIT_KEYS = (
    "contrast", "sigma_contrast", "mean_rate_hz", "background_hz", "figure_of_merit_hz",
    "shot_noise_limit_rad_sqrt_hz", "measured_sensitivity_rad_sqrt_hz", "fringe_period_m",
)


# =============================================================================
# INTERNAL HELPERS
# =============================================================================

def format_value(value):
    if isinstance(value, str):
        return value
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, int):
        return str(value)
    return f"{float(value):.6g}"


def format_lines(pairs):
    """`key = value` lines with a trailing newline."""
    return "".join(f"{k} = {format_value(v)}\n" for k, v in pairs)


def _single_row(path):
    df = pd.read_csv(path)
    if len(df) != 1:
        raise ConfigError(f"{path.name}: expected exactly one row, found {len(df)}")
    return df.iloc[0]


# =============================================================================
# PUBLIC API
# =============================================================================

def contrast_budget(ideal_contrast, washout_factor, dispersion_factor, vibration_factor):
    """Predicted contrast: the ideal contrast times every loss factor."""
    return ideal_contrast * washout_factor * dispersion_factor * vibration_factor


def write_budget_inputs(out_dir, ideal_contrast, washout_factor, dispersion_factor, vibration_factor):
    path = Path(out_dir) / BUDGET_FILE
    pd.DataFrame([{
        "ideal_contrast": ideal_contrast,
        "washout_factor": washout_factor,
        "dispersion_factor": dispersion_factor,
        "vibration_factor": vibration_factor,
    }], columns=list(BUDGET_COLUMNS)).to_csv(path, index=False, float_format="%.9g")
    return path


def cmd_report(run_dir):
    """Builds report.txt in `run_dir`; returns its text."""
    run_dir = Path(run_dir)
    missing = [name for name in REQUIRED_FILES if not (run_dir / name).is_file()]
    if missing:
        raise MissingInputError(missing)

    budget = _single_row(run_dir / BUDGET_FILE)
    absent = [c for c in BUDGET_COLUMNS if c not in budget.index]
    if absent:
        raise ConfigError(f"{BUDGET_FILE}: missing columns {absent}")
    fit = _single_row(run_dir / FIT_FILE)

    ideal = float(budget["ideal_contrast"])
    pairs = [("ideal_contrast", ideal)]
    running = ideal
    for factor in BUDGET_FACTORS:
        running *= float(budget[factor])
        pairs.append((factor, float(budget[factor])))
        pairs.append((f"contrast_after_{factor[:-len('_factor')]}", running))
    predicted = contrast_budget(ideal, *(float(budget[f]) for f in BUDGET_FACTORS))
    pairs.append(("predicted_contrast", predicted))
    dispersion = float(budget["dispersion_factor"])
    if 0.0 < dispersion <= 1.0:
        # Gaussian phase spread sigma with exp(-sigma^2 / 2) = factor
        sigma = np.sqrt(max(-2.0 * np.log(dispersion), 0.0))
        pairs.append(("wavefront_rms_waves", wavefront_rms_fraction(sigma)))

    for key in FIT_KEYS:
        if key in fit.index:
            pairs.append((f"measured_{key}" if key == "contrast" else key, float(fit[key])))
    if "contrast" in fit.index:
        pairs.append(("measured_minus_predicted", float(fit["contrast"]) - predicted))

    text = format_lines(pairs)
    (run_dir / REPORT_FILE).write_text(text, encoding="utf-8")
    logger.info("[Report] predicted contrast %.4f written to %s", predicted, run_dir / REPORT_FILE)
    return text
