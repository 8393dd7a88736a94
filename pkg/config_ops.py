"""
Configuration Module
====================
Loads, validates and resolves the JSON run configuration.

The file is a key tree with sections species, beam, geometry, gratings,
bragg, detector, vibration, dispersion, fringes, diffract and run. Every
value carries its unit in the key name (_mm, _um, _nm, _mw, _urad, _hz,
_mps, _s, _u, _ghz, _mhz, ...). Any key not in the defaults is rejected.

Null values are resolved at load time:
- beam.mean_speed_mps      terminal speed of the carrier gas
- gratings.N.theta_y_urad  Bragg angle at the mean speed
- bragg.coupling_scale     grating 2 is a pi pulse at the mean speed
- detector.slit_x_um       nominal centre of the selected port
- detector.slit_width_um   geometry.detector_slit_width_um

A RunConfig remembers which values it filled in. with_value() clears those
that depend on the changed path (transitively) and resolves them again, so
raising beam.temperature_k moves the mean speed, the Bragg angles and the
slit centre with it. Values given explicitly never move. The coupling scale
only follows the species: it calibrates the laser, so power, waist and
speed scans keep their physical effect on the pulse area. A saved snapshot
pins every value.

Parameter paths are dotted key names; list entries are numbered from 1, so
`gratings.2.power_mw` is the power of the second standing wave.
"""

import copy
import json
import logging
from pathlib import Path

import numpy as np

from beam_ops import (
    ATOMIC_MASS_UNIT, DEFAULT_SPECIES, BeamSource, CollimationGeometry, HyperfineLevel, Species,
    bragg_angle, de_broglie, supersonic_terminal_velocity,
)
from bragg_ops import BraggSettings, StandingWave, calibrate_coupling_scale
from detector_ops import DetectorModel, VibrationModel
from errors import ConfigError, InterferometerError
from interferometer_ops import InterferometerConfig, port_centre, primary_species

logger = logging.getLogger("Config")

# =============================================================================
# CONFIGURATION
# =============================================================================

SNAPSHOT_NAME = "config_snapshot.json"
FREE_FORM_KEYS = ("detunings_ghz",)     # maps with user-chosen keys (hyperfine F)

_TWO_PI = 2.0 * np.pi

# auto-value -> the paths it is computed from ("{n}" is the grating number)
AUTO_INPUTS = {
    "beam.mean_speed_mps": ("beam.temperature_k", "beam.carrier_mass_u"),
    "gratings.{n}.theta_y_urad": ("beam.mean_speed_mps", "species", "gratings.{n}.wavelength_nm"),
    "bragg.coupling_scale": ("species",),
    "detector.slit_x_um": ("beam.mean_speed_mps", "species", "geometry", "gratings.2.wavelength_nm",
                           "detector.port"),
    "detector.slit_width_um": ("geometry.detector_slit_width_um",),
}


def _species_tree(sp):
    return {
        "name": sp.name,
        "mass_u": sp.mass_kg / ATOMIC_MASS_UNIT,
        "abundance": sp.abundance,
        "wavelength_nm": sp.resonance_wavelength_m * 1e9,
        "linewidth_mhz": sp.linewidth_rad_s / _TWO_PI / 1e6,
        "saturation_intensity_mw_cm2": sp.saturation_intensity_w_m2 / 10.0,
        "laser_coupled": sp.laser_coupled,
        "levels": [
            {"f": lv.f, "degeneracy": lv.degeneracy, "detuning_ghz": lv.detuning_rad_s / _TWO_PI / 1e9}
            for lv in sp.hyperfine_levels
        ],
    }


def _grating_tree(power_mw):
    return {
        "x_nm": 0.0,
        "theta_y_urad": None,
        "theta_z_urad": 0.0,
        "power_mw": power_mw,
        "waist_mm": 6.5,
        "wavelength_nm": 670.962,
        "active": True,
        "detunings_ghz": {},
    }


def default_tree():
    """The full default configuration, mirroring the apparatus."""
    geom = CollimationGeometry()
    return {
        "species": [_species_tree(sp) for sp in DEFAULT_SPECIES],
        "beam": {
            "mean_speed_mps": None,
            "speed_ratio": 8.0,
            "temperature_k": 1050.0,
            "carrier_mass_u": 39.948,
            "flux_hz": 1.4e5,
            "distribution": "gaussian",
        },
        "geometry": {
            "slit0_width_um": geom.slit0_width_m * 1e6,
            "slit0_z_mm": geom.slit0_z_m * 1e3,
            "slit1_width_um": geom.slit1_width_m * 1e6,
            "slit1_z_mm": geom.slit1_z_m * 1e3,
            "mirror_z_mm": [z * 1e3 for z in geom.mirror_z_m],
            "detector_slit_z_mm": geom.detector_slit_z_m * 1e3,
            "detector_z_mm": geom.detector_z_m * 1e3,
            "detector_slit_width_um": geom.detector_slit_width_m * 1e6,
            "ribbon_width_um": geom.ribbon_width_m * 1e6,
            "aperture_height_mm": geom.aperture_height_m * 1e3,
            "spacing_tolerance_mm": 1.0,
        },
        "gratings": [_grating_tree(40.0), _grating_tree(80.0), _grating_tree(40.0)],
        "bragg": {
            "model": "two-level",
            "p_max": 4,
            "dt_s": None,
            "coupling_scale": None,
            "spontaneous_loss": 0.02,
            "strays": True,
        },
        "detector": {
            "efficiency": 0.4,
            "background_hz": 3370.0,
            "burst_rate_hz": 0.0,
            "burst_amplitude_counts": 0.0,
            "port": 1,
            "slit_x_um": None,
            "slit_width_um": None,
        },
        "vibration": {"rms_nm": 3.0, "bandwidth_khz": 50.0},
        "dispersion": {"phase_sigma_rad": 0.0, "washout": True},
        "fringes": {
            "duration_s": 40.0,
            "bin_s": 0.1,
            "background_s": 10.0,
            "piezo_speed_nm_s": 120.0,
            "piezo_quadratic_nm_s2": 0.05,
            "fit_background": "fixed",
        },
        "diffract": {
            "grating": 2,
            "slit_min_um": -150.0,
            "slit_max_um": 350.0,
            "slit_step_um": 5.0,
            "slit_width_um": 50.0,
            "bin_s": 1.0,
        },
        "run": {
            "seed": 1,
            "samples": 20000,
            "threads": 1,
            "chunk_size": 2048,
            "out": "out",
        },
    }


# =============================================================================
# INTERNAL HELPERS
# =============================================================================

def _merge(default, given, path):
    """Overlays `given` on `default`, rejecting keys the defaults do not have."""
    if isinstance(default, dict):
        if not isinstance(given, dict):
            raise ConfigError(f"Config key '{path}' must be an object")
        if path.split(".")[-1] in FREE_FORM_KEYS:
            return dict(given)
        out = copy.deepcopy(default)
        for key, value in given.items():
            dotted = f"{path}.{key}" if path else key
            if key not in default:
                raise ConfigError(f"Unknown config key '{dotted}'")
            out[key] = _merge(default[key], value, dotted)
        return out
    if isinstance(default, list) and default and isinstance(default[0], dict):
        if not isinstance(given, list) or not given:
            raise ConfigError(f"Config key '{path}' must be a non-empty list")
        return [_merge(default[min(i, len(default) - 1)], item, f"{path}.{i + 1}")
                for i, item in enumerate(given)]
    return given


def _split(path):
    if not path or not isinstance(path, str):
        raise ConfigError("Empty parameter path")
    return path.split(".")


def _locate(tree, path):
    """Returns (container, key) for a dotted path; list indices are 1-based."""
    parts = _split(path)
    node = tree
    for depth, part in enumerate(parts):
        last = depth == len(parts) - 1
        if isinstance(node, list):
            try:
                idx = int(part) - 1
            except ValueError:
                raise ConfigError(f"Unknown parameter path '{path}'")
            if not 0 <= idx < len(node):
                raise ConfigError(f"Unknown parameter path '{path}'")
            if last:
                return node, idx
            node = node[idx]
        elif isinstance(node, dict):
            if part not in node:
                raise ConfigError(f"Unknown parameter path '{path}'")
            if last:
                return node, part
            node = node[part]
        else:
            raise ConfigError(f"Unknown parameter path '{path}'")
    raise ConfigError(f"Unknown parameter path '{path}'")


def _build_species(tree):
    out = []
    for entry in tree["species"]:
        levels = tuple(
            HyperfineLevel(f=lv["f"], degeneracy=int(lv["degeneracy"]),
                           detuning_rad_s=_TWO_PI * lv["detuning_ghz"] * 1e9)
            for lv in entry["levels"]
        )
        out.append(Species(
            name=entry["name"],
            mass_kg=entry["mass_u"] * ATOMIC_MASS_UNIT,
            abundance=entry["abundance"],
            resonance_wavelength_m=entry["wavelength_nm"] * 1e-9,
            linewidth_rad_s=_TWO_PI * entry["linewidth_mhz"] * 1e6,
            saturation_intensity_w_m2=entry["saturation_intensity_mw_cm2"] * 10.0,
            hyperfine_levels=levels,
            laser_coupled=bool(entry["laser_coupled"]),
        ))
    total = sum(sp.abundance for sp in out)
    if abs(total - 1.0) > 1e-9:
        raise ConfigError(f"Species abundances sum to {total:.12f}, expected 1")
    return tuple(out)


def _build_geometry(g):
    return CollimationGeometry(
        slit0_width_m=g["slit0_width_um"] * 1e-6,
        slit0_z_m=g["slit0_z_mm"] * 1e-3,
        slit1_width_m=g["slit1_width_um"] * 1e-6,
        slit1_z_m=g["slit1_z_mm"] * 1e-3,
        mirror_z_m=tuple(z * 1e-3 for z in g["mirror_z_mm"]),
        detector_slit_z_m=g["detector_slit_z_mm"] * 1e-3,
        detector_z_m=g["detector_z_mm"] * 1e-3,
        detector_slit_width_m=g["detector_slit_width_um"] * 1e-6,
        ribbon_width_m=g["ribbon_width_um"] * 1e-6,
        aperture_height_m=g["aperture_height_mm"] * 1e-3,
    )


def _build_wave(g):
    theta_y = 0.0 if g["theta_y_urad"] is None else g["theta_y_urad"] * 1e-6
    return StandingWave(
        x_m=g["x_nm"] * 1e-9,
        theta_y_rad=theta_y,
        theta_z_rad=g["theta_z_urad"] * 1e-6,
        power_w=g["power_mw"] * 1e-3,
        waist_m=g["waist_mm"] * 1e-3,
        wavelength_m=g["wavelength_nm"] * 1e-9,
        detunings_rad_s={float(f): _TWO_PI * d * 1e9 for f, d in g["detunings_ghz"].items()},
    )


def _build_source(b):
    speed = b["mean_speed_mps"]
    if speed is None:
        speed = supersonic_terminal_velocity(b["temperature_k"], b["carrier_mass_u"] * ATOMIC_MASS_UNIT)
    return BeamSource(
        mean_speed_mps=speed,
        speed_ratio=b["speed_ratio"],
        temperature_k=b["temperature_k"],
        carrier_mass_kg=b["carrier_mass_u"] * ATOMIC_MASS_UNIT,
        flux_hz=b["flux_hz"],
        distribution=b["distribution"],
    )


def _auto_inputs(tree):
    out = {}
    for path, inputs in AUTO_INPUTS.items():
        numbers = range(1, len(tree["gratings"]) + 1) if "{n}" in path else (None,)
        for n in numbers:
            out[path.format(n=n)] = tuple(p.format(n=n) for p in inputs)
    return out


def _depends(changed, inputs):
    return any(changed == p or changed.startswith(p + ".") for p in inputs)


def _resolve(tree):
    """
    Replaces every null auto-value by its computed value (in place).
    Returns the tree and the set of paths it filled.
    """
    filled = set()
    species = _build_species(tree)
    source = _build_source(tree["beam"])
    if tree["beam"]["mean_speed_mps"] is None:
        tree["beam"]["mean_speed_mps"] = float(source.mean_speed_mps)
        filled.add("beam.mean_speed_mps")
    if tree["detector"]["slit_width_um"] is None:
        tree["detector"]["slit_width_um"] = tree["geometry"]["detector_slit_width_um"]
        filled.add("detector.slit_width_um")

    primary = primary_species(species)
    for n, g in enumerate(tree["gratings"], start=1):
        if g["theta_y_urad"] is None:
            filled.add(f"gratings.{n}.theta_y_urad")
            period = g["wavelength_nm"] * 1e-9 / 2.0
            theta_b = bragg_angle(de_broglie(primary.mass_kg, source.mean_speed_mps), period)
            g["theta_y_urad"] = float(theta_b * 1e6)

    if tree["bragg"]["coupling_scale"] is None:
        filled.add("bragg.coupling_scale")
        level = max(primary.hyperfine_levels, key=lambda lv: lv.degeneracy)
        tree["bragg"]["coupling_scale"] = calibrate_coupling_scale(
            primary, level, _build_wave(tree["gratings"][1]), source.mean_speed_mps, target_area=np.pi)

    if tree["detector"]["slit_x_um"] is None:
        filled.add("detector.slit_x_um")
        config = _interferometer(tree)
        tree["detector"]["slit_x_um"] = port_centre(config, config.port) * 1e6
    return tree, frozenset(filled)


def _interferometer(tree):
    b = tree["bragg"]
    det = tree["detector"]
    disp = tree["dispersion"]
    return InterferometerConfig(
        gratings=tuple(_build_wave(g) for g in tree["gratings"]),
        geometry=_build_geometry(tree["geometry"]),
        source=_build_source(tree["beam"]),
        species=_build_species(tree),
        bragg=BraggSettings(
            model=b["model"],
            p_max=int(b["p_max"]),
            dt_s=b["dt_s"],
            coupling_scale=1.0 if b["coupling_scale"] is None else b["coupling_scale"],
            spontaneous_loss=b["spontaneous_loss"],
            strays=bool(b["strays"]),
        ),
        active=tuple(bool(g["active"]) for g in tree["gratings"]),
        port=int(det["port"]),
        slit_x_m=None if det["slit_x_um"] is None else det["slit_x_um"] * 1e-6,
        slit_width_m=None if det["slit_width_um"] is None else det["slit_width_um"] * 1e-6,
        phase_sigma_rad=disp["phase_sigma_rad"],
        washout=bool(disp["washout"]),
        spacing_tolerance_m=tree["geometry"]["spacing_tolerance_mm"] * 1e-3,
    )


def _validate(tree):
    if len(tree["gratings"]) != 3:
        raise ConfigError("Exactly three gratings are required")
    if len(tree["geometry"]["mirror_z_mm"]) != 3:
        raise ConfigError("Exactly three mirror positions are required")
    run = tree["run"]
    if int(run["samples"]) < 1:
        raise ConfigError("run.samples must be >= 1")
    if int(run["chunk_size"]) < 1:
        raise ConfigError("run.chunk_size must be >= 1")
    if int(run["threads"]) < 1:
        raise ConfigError("run.threads must be >= 1")
    fr = tree["fringes"]
    if fr["bin_s"] <= 0 or fr["duration_s"] <= 0 or fr["background_s"] < 0:
        raise ConfigError("fringes: bin and duration must be > 0, background segment >= 0")
    if fr["fit_background"] not in ("fixed", "fit"):
        raise ConfigError("fringes.fit_background must be 'fixed' or 'fit'")
    d = tree["diffract"]
    if d["slit_step_um"] <= 0 or d["slit_max_um"] <= d["slit_min_um"]:
        raise ConfigError("diffract: slit range must be increasing with a positive step")
    if not 1 <= int(d["grating"]) <= 3:
        raise ConfigError("diffract.grating must be 1, 2 or 3")


# =============================================================================
# PUBLIC API
# =============================================================================

class RunConfig:
    """A validated, fully resolved configuration tree. `auto` holds the paths filled in by resolution."""

    def __init__(self, tree, auto=frozenset()):
        self.tree = tree
        self.auto = frozenset(auto)
        try:
            _validate(tree)
            self._config = _interferometer(tree)
            self._detector = DetectorModel(
                efficiency=tree["detector"]["efficiency"],
                background_hz=tree["detector"]["background_hz"],
                burst_rate_hz=tree["detector"]["burst_rate_hz"],
                burst_amplitude_counts=tree["detector"]["burst_amplitude_counts"],
            )
            self._vibration = VibrationModel(rms_m=tree["vibration"]["rms_nm"] * 1e-9,
                                             bandwidth_hz=tree["vibration"]["bandwidth_khz"] * 1e3)
        except InterferometerError as e:
            raise ConfigError(str(e)) from e
        except (TypeError, KeyError, ValueError) as e:
            raise ConfigError(f"Invalid configuration value: {e}") from e

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.to_json() == other.to_json()

    @property
    def interferometer(self):
        return self._config

    @property
    def detector(self):
        return self._detector

    @property
    def vibration(self):
        return self._vibration

    @property
    def seed(self):
        return int(self.tree["run"]["seed"])

    @property
    def samples(self):
        return int(self.tree["run"]["samples"])

    @property
    def threads(self):
        return int(self.tree["run"]["threads"])

    @property
    def chunk_size(self):
        return int(self.tree["run"]["chunk_size"])

    @property
    def out_dir(self):
        return Path(self.tree["run"]["out"])

    def value(self, path):
        node, key = _locate(self.tree, path)
        return node[key]

    def with_value(self, path, value):
        """
        Copy with one leaf changed. Auto-values computed from it are cleared
        and resolved again; a null set this way is resolved too.
        """
        tree = copy.deepcopy(self.tree)
        node, key = _locate(tree, path)
        if isinstance(node[key], (dict, list)):
            raise ConfigError(f"Parameter path '{path}' is not a scalar")
        node[key] = value

        auto = set(self.auto) - {path}
        inputs = _auto_inputs(tree)
        stale = {path}
        grew = True
        while grew:
            grew = False
            for target in sorted(auto - stale):
                if any(_depends(s, inputs[target]) for s in stale):
                    stale.add(target)
                    grew = True
        for target in stale - {path}:
            node, key = _locate(tree, target)
            node[key] = None
            logger.debug("[Config] %s changed: re-deriving %s", path, target)
        tree, filled = _resolve_checked(tree)
        return RunConfig(tree, (auto - stale) | filled)

    def with_values(self, changes):
        cfg = self
        for path, value in changes.items():
            cfg = cfg.with_value(path, value)
        return cfg

    def to_json(self):
        return json.dumps(self.tree, indent=2, sort_keys=True)

    def save_snapshot(self, out_dir):
        path = Path(out_dir) / SNAPSHOT_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n", encoding="utf-8")
        return path


def _resolve_checked(tree):
    try:
        return _resolve(tree)
    except ConfigError:
        raise
    except InterferometerError as e:
        raise ConfigError(str(e)) from e
    except (TypeError, KeyError, ValueError) as e:
        raise ConfigError(f"Invalid configuration value: {e}") from e


def config_from_dict(given=None, overrides=None):
    """Builds a RunConfig from a (partial) tree plus dotted-path overrides."""
    tree = _merge(default_tree(), given or {}, "")
    for path, value in (overrides or {}).items():
        if value is None:
            continue
        node, key = _locate(tree, path)
        node[key] = value
    cfg = RunConfig(*_resolve_checked(tree))
    logger.debug("[Config] resolved: v0 = %.1f m/s, coupling scale = %.4f",
                 cfg.tree["beam"]["mean_speed_mps"], cfg.tree["bragg"]["coupling_scale"])
    return cfg


def load_config(path=None, overrides=None):
    """Reads a JSON config file (or the defaults when path is None)."""
    given = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"Config file not found: {p}")
        try:
            given = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {p} is not valid JSON: {e}") from e
        logger.info("[Config] Loaded %s", p)
    return config_from_dict(given, overrides)
