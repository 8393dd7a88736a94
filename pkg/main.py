"""
Bragg Interferometer Simulator - Main Entry Point
=================================================
Command-line front end for the three-grating lithium interferometer model.

Commands:
    diffract   one grating on, detector slit swept: diffraction profile
    fringes    mirror-3 piezo ramp: fringe scan, counts, fit, budget inputs
    scan       one config parameter over a grid against a metric
    optimize   coordinate ascent of several parameters against a metric
    report     consolidated contrast budget of a fringes run directory

Usage:
    python main.py fringes --config run.json --seed 3 --out out/run3
    python main.py scan --param gratings.2.theta_y_urad --start 60 --stop 100 --steps 21
    python main.py optimize --param gratings.1.power_mw:5:200 --metric ic2 --budget 90
    python main.py report out/run3

Every command except `report` writes config_snapshot.json next to its
outputs. Exit codes: 0 success, 2 configuration, 3 runtime, 4 fit failure.
"""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd

from analysis_ops import fit_fringes, fringe_period, sensitivity_report
from beam_ops import AtomSample
from bragg_ops import order_minus_one_suppression
from config_ops import load_config
from detector_ops import apply_vibration_jitter, scan_counts, simulate_counts, vibration_phase_rms
from errors import ConfigError, InterferometerError
from interferometer_ops import (
    Sweep, delta_k_washout, diffraction_profile, fringe_contrast, monte_carlo_fringe,
    nominal_diffraction_angle, phase_dispersion_contrast, primary_species, profile_peaks,
)
from report_ops import cmd_report, format_lines, write_budget_inputs
from tuning_ops import METRICS, ParameterBound, ScanSpec, evaluate_metric, optimize, scan

logger = logging.getLogger("Main")

# =============================================================================
# CONFIGURATION
# =============================================================================

VERSION = "1.0"
LOG_FORMAT = "%(message)s"          # messages carry their own [Tag] prefix

FLAG_PATHS = {
    "seed": "run.seed",
    "samples": "run.samples",
    "out": "run.out",
    "model": "bragg.model",
    "threads": "run.threads",
    "port": "detector.port",
}

DEFAULT_BUDGET = 60
CSV_FLOAT_FORMAT = "%.9g"


# =============================================================================
# HELPERS
# =============================================================================

def print_banner(command):
    print("=" * 55)
    print(f"     Bragg Interferometer Simulator v{VERSION}  [{command}]")
    print("=" * 55)


def setup_logging(verbose):
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT,
                        stream=sys.stderr, force=True)


def load_run_config(args):
    overrides = {path: getattr(args, flag, None) for flag, path in FLAG_PATHS.items()}
    return load_config(args.config, overrides)


def _out_dir(run_config):
    out = run_config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_summary(path, pairs):
    Path(path).write_text(format_lines(pairs), encoding="utf-8")
    for key, value in pairs:
        print(f"  {key:<36} {value}")


def _grid(start, stop, steps):
    if steps < 1:
        raise ConfigError("--steps must be >= 1")
    if steps == 1:
        return (float(start),)
    return tuple(float(v) for v in np.linspace(start, stop, steps))


# =============================================================================
# COMMANDS
# =============================================================================

def cmd_diffract(run_config):
    """Diffraction profile of one grating; writes diffraction_profile.csv and a summary."""
    tree = run_config.tree["diffract"]
    grating = int(tree["grating"]) - 1
    config = replace(run_config.interferometer,
                     active=tuple(i == grating for i in range(3)),
                     slit_width_m=tree["slit_width_um"] * 1e-6)
    n_steps = int(round((tree["slit_max_um"] - tree["slit_min_um"]) / tree["slit_step_um"])) + 1
    slits = tuple(1e-6 * (tree["slit_min_um"] + k * tree["slit_step_um"]) for k in range(n_steps))

    profile = diffraction_profile(config, slits, run_config.samples, run_config.seed,
                                  threads=run_config.threads, chunk_size=run_config.chunk_size)
    profile = scan_counts(profile, run_config.detector, tree["bin_s"], run_config.seed)
    out = _out_dir(run_config)
    profile.to_csv(out / "diffraction_profile.csv")

    peaks = profile_peaks(profile)
    geom = config.geometry
    lever = geom.detector_slit_z_m - geom.mirror_z_m[grating]
    expected = nominal_diffraction_angle(config) * lever

    sp = primary_species(config.species)
    level = max(sp.hyperfine_levels, key=lambda lv: lv.degeneracy)
    atom = AtomSample(species=sp, level=level, weight=1.0, speed_mps=config.source.mean_speed_mps,
                      theta_x_rad=0.0, x_m=0.0)
    minus_one = order_minus_one_suppression(config.gratings[grating], atom, p_max=config.bragg.p_max,
                                            dt=config.bragg.dt_s,
                                            coupling_scale=config.bragg.coupling_scale)

    pairs = [
        ("grating", grating + 1),
        ("n_peaks", len(peaks)),
        ("peak_positions_um", " ".join(f"{p * 1e6:.2f}" for p in peaks) or "none"),
        ("peak_separation_um", float(1e6 * (peaks[1] - peaks[0])) if len(peaks) >= 2 else 0.0),
        ("expected_separation_um", float(expected * 1e6)),
        ("order_minus_one_population", float(minus_one)),
    ]
    _write_summary(out / "diffraction_summary.txt", pairs)
    run_config.save_snapshot(out)
    return 0


def _fringe_sweep(run_config):
    fr = run_config.tree["fringes"]
    n_bins = int(round(fr["duration_s"] / fr["bin_s"]))
    if n_bins < 1:
        raise ConfigError("fringes.duration_s is shorter than one bin")
    times = tuple(fr["bin_s"] * (k + 0.5) for k in range(n_bins))
    return Sweep("time", times, piezo_speed_mps=fr["piezo_speed_nm_s"] * 1e-9,
                 piezo_quadratic_mps2=fr["piezo_quadratic_nm_s2"] * 1e-9)


def cmd_fringes(run_config):
    """Simulated piezo ramp of mirror 3; writes scan, counts, fit and budget inputs."""
    config = run_config.interferometer
    fr = run_config.tree["fringes"]
    out = _out_dir(run_config)
    seed = run_config.seed
    period = config.gratings[2].period_m

    sweep = _fringe_sweep(run_config)
    fringe = monte_carlo_fringe(config, sweep, run_config.samples, seed,
                                threads=run_config.threads, chunk_size=run_config.chunk_size)
    fringe = apply_vibration_jitter(fringe, run_config.vibration, period, seed)
    expected_contrast = fringe_contrast(fringe, config.port)
    scan_counts(fringe, run_config.detector, fr["bin_s"], seed).to_csv(out / "fringe_scan.csv")

    times = np.asarray(sweep.values)
    rates = np.clip(fringe.rates(config.port), 0.0, None)
    duration = fr["duration_s"]
    beam_off = (duration, duration + fr["background_s"]) if fr["background_s"] > 0 else None
    record = simulate_counts(lambda t: np.interp(t, times, rates), run_config.detector, fr["bin_s"],
                             duration + fr["background_s"], seed, beam_off=beam_off)
    record.to_csv(out / "counts.csv")

    background = "fit" if fr["fit_background"] == "fit" else run_config.detector.background_hz
    phase_guess = config.gratings[2].grating_wavevector * sweep.piezo_speed_mps
    fit = fit_fringes(record, background=background, phase_guess=phase_guess)
    sens = sensitivity_report(record, fit)

    results = dict(fit.as_dict())
    results.update(sens.as_dict())
    results["expected_contrast"] = expected_contrast
    results["fringe_period_m"] = fringe_period(fit, sweep.piezo_speed_mps) if sweep.piezo_speed_mps else 0.0
    pd.DataFrame([results]).to_csv(out / "fringe_fit.csv", index=False, float_format=CSV_FLOAT_FORMAT)
    _write_summary(out / "fringe_fit.txt", list(results.items()))

    ideal_cfg = run_config.with_values({"dispersion.phase_sigma_rad": 0.0, "dispersion.washout": False})
    ideal, _ = evaluate_metric(ideal_cfg, "contrast", run_config.samples, seed,
                               threads=run_config.threads)
    washout = delta_k_washout(tuple(g.theta_z_rad for g in config.gratings),
                              config.geometry.aperture_height_m, config.gratings[1].grating_wavevector)
    vib_sigma = vibration_phase_rms(run_config.vibration, period)
    write_budget_inputs(out, ideal, washout if config.washout else 1.0,
                        phase_dispersion_contrast(config.phase_sigma_rad),
                        phase_dispersion_contrast(vib_sigma))
    run_config.save_snapshot(out)
    return 0


def cmd_scan(run_config, args):
    values = tuple(args.values) if args.values else _grid(args.start, args.stop, args.steps)
    spec = ScanSpec(path=args.param, values=values, metric=args.metric,
                    samples=run_config.samples, seed=run_config.seed)
    curve = scan(run_config, spec, threads=run_config.threads)
    out = _out_dir(run_config)
    curve.to_csv(out / "scan.csv")
    _write_summary(out / "scan_summary.txt", [
        ("parameter", args.param),
        ("metric", args.metric),
        ("best_value", curve.best_value()),
        ("best_metric", float(np.max(curve.metrics))),
    ])
    run_config.save_snapshot(out)
    return 0


def _parse_bound(text):
    parts = text.split(":")
    if len(parts) != 3:
        raise ConfigError(f"--param expects PATH:LOWER:UPPER, got '{text}'")
    try:
        return ParameterBound(parts[0], float(parts[1]), float(parts[2]))
    except ValueError:
        raise ConfigError(f"--param bounds must be numbers, got '{text}'")


def cmd_optimize(run_config, args):
    bounds = [_parse_bound(p) for p in args.param]
    result = optimize(run_config, bounds, args.metric, args.budget, samples=run_config.samples,
                      seed=run_config.seed, threads=run_config.threads)
    out = _out_dir(run_config)
    result.to_csv(out / "optimize_trace.csv")
    pairs = [("metric", result.metric), ("start_metric", result.start_metric),
             ("final_metric", result.final_metric), ("evaluations", result.evaluations),
             ("iterations", result.iterations), ("budget_exhausted", result.exhausted)]
    pairs += [(path, value) for path, value in result.values.items()]
    _write_summary(out / "optimize_summary.txt", pairs)
    result.config.save_snapshot(out)
    return 0


# =============================================================================
# MAIN ENTRY POINT
# =============================================================================

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (defaults when omitted)")
    common.add_argument("--seed", type=int)
    common.add_argument("--samples", type=int, help="Monte Carlo atoms per evaluation")
    common.add_argument("--out", help="output directory")
    common.add_argument("--model", choices=["two-level", "ladder", "ideal"])
    common.add_argument("--threads", type=int)
    common.add_argument("--port", type=int, choices=[1, 2])
    common.add_argument("--verbose", action="store_true")

    parser = argparse.ArgumentParser(description="Bragg Mach-Zehnder lithium interferometer simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("diffract", parents=[common], help="diffraction profile of one grating")
    sub.add_parser("fringes", parents=[common], help="fringe scan, counts and fit")

    p_scan = sub.add_parser("scan", parents=[common], help="scan one parameter")
    p_scan.add_argument("--param", required=True, help="dotted config path, e.g. gratings.2.theta_y_urad")
    p_scan.add_argument("--metric", choices=METRICS, default="contrast")
    p_scan.add_argument("--start", type=float)
    p_scan.add_argument("--stop", type=float)
    p_scan.add_argument("--steps", type=int, default=11)
    p_scan.add_argument("--values", type=float, nargs="+")

    p_opt = sub.add_parser("optimize", parents=[common], help="optimise parameters")
    p_opt.add_argument("--param", required=True, action="append", help="PATH:LOWER:UPPER (repeatable)")
    p_opt.add_argument("--metric", choices=METRICS, default="ic2")
    p_opt.add_argument("--budget", type=int, default=DEFAULT_BUDGET)

    p_rep = sub.add_parser("report", parents=[common], help="contrast budget of a run directory")
    p_rep.add_argument("run_dir", nargs="?", help="defaults to --out or the configured run.out")
    return parser


def run(args):
    if args.command == "report":
        run_dir = args.run_dir or args.out
        if run_dir is None:
            run_dir = load_run_config(args).out_dir
        print(cmd_report(run_dir), end="")
        return 0

    run_config = load_run_config(args)
    if args.command == "diffract":
        return cmd_diffract(run_config)
    if args.command == "fringes":
        return cmd_fringes(run_config)
    if args.command == "scan":
        if not args.values and (args.start is None or args.stop is None):
            raise ConfigError("scan needs --values or --start and --stop")
        return cmd_scan(run_config, args)
    return cmd_optimize(run_config, args)


def main(argv=None):
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    print_banner(args.command)
    try:
        code = run(args)
    except InterferometerError as e:
        logger.error("[Main] ERROR: %s", e)
        return e.exit_code
    logger.info("[Main] %s finished", args.command)
    return code


if __name__ == "__main__":
    sys.exit(main())
