"""
Tuning Operations Module
========================
Parameter scans and derivative-free optimisation of the alignment knobs
and pulse powers against a simulated figure.

This module provides:
- ScanSpec / scan(): one config parameter over a grid, metric per point
- optimize(): coordinate ascent with bounded scalar line searches
- evaluate_metric(): contrast, ic2, port_rate or order1_fraction with an
  error taken from the spread between Monte Carlo chunks

Parameters are dotted config paths (see config_ops). Every evaluation uses
the same seed, so the noisy objective is a smooth function of the knobs.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from scipy.optimize import minimize_scalar

from errors import ConfigError, DomainError
from interferometer_ops import (
    Sweep, fringe_coefficients, monte_carlo_fringe, order_populations,
)
from worker_ops import run_ordered

logger = logging.getLogger("Tuning")

# =============================================================================
# CONFIGURATION
# =============================================================================

METRICS = ("contrast", "ic2", "port_rate", "order1_fraction")

PHASE_STEPS = 8                 # mirror-3 positions per fringe period for contrast metrics
BUDGET_PER_PARAMETER = 10       # minimum evaluations per optimised parameter
LINE_TOLERANCE = 0.01           # line-search xatol, fraction of the bound range

SCAN_COLUMNS = ["param_value", "metric", "metric_err", "n_samples"]
TRACE_COLUMNS = ["iteration", "parameter"] + SCAN_COLUMNS
CSV_FLOAT_FORMAT = "%.9g"


# =============================================================================
# DOMAIN TYPES
# =============================================================================

@dataclass(frozen=True)
class ScanSpec:
    path: str
    values: tuple
    metric: str = "contrast"
    samples: int = 4000
    seed: int = 1
    port: int = None

    def __post_init__(self):
        if len(self.values) == 0:
            raise ConfigError("Scan grid is empty")
        if np.any(np.diff(np.asarray(self.values, dtype=float)) <= 0):
            raise ConfigError("Scan grid must be strictly increasing")
        if self.metric not in METRICS:
            raise ConfigError(f"Unknown metric '{self.metric}', expected one of {METRICS}")
        if self.samples < 1:
            raise ConfigError("Scan samples must be >= 1")


@dataclass(frozen=True)
class ParameterBound:
    path: str
    lower: float
    upper: float

    def __post_init__(self):
        if not self.upper > self.lower:
            raise ConfigError(f"Bounds of '{self.path}' must satisfy lower < upper")


@dataclass
class ScanCurve:
    path: str
    metric: str
    values: np.ndarray
    metrics: np.ndarray
    errors: np.ndarray
    n_samples: int

    def best_value(self):
        return float(self.values[int(np.argmax(self.metrics))])

    def to_frame(self):
        return pd.DataFrame({
            "param_value": self.values,
            "metric": self.metrics,
            "metric_err": self.errors,
            "n_samples": np.full(len(self.values), self.n_samples, dtype=int),
        }, columns=SCAN_COLUMNS)

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)


@dataclass
class OptimizationResult:
    """
    Best configuration seen. `accepted` holds the metric after each cycle
    (start first) and never decreases; `trace` lists every evaluation.
    """
    values: dict
    start_values: dict
    metric: str
    start_metric: float
    final_metric: float
    accepted: list
    trace: list = field(default_factory=list)
    evaluations: int = 0
    iterations: int = 0
    exhausted: bool = False
    config: object = None

    def to_frame(self):
        return pd.DataFrame(self.trace, columns=TRACE_COLUMNS)

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)


class _BudgetExhausted(Exception):
    pass


# =============================================================================
# METRICS
# =============================================================================

def _phase_sweep(config):
    """Mirror-3 positions covering one fringe period around its setting."""
    x3 = config.gratings[2].x_m
    period = config.gratings[2].period_m
    values = tuple(x3 + period * k / PHASE_STEPS for k in range(PHASE_STEPS))
    return Sweep("x_m3", values)


def _spread(per_chunk):
    per_chunk = np.asarray(per_chunk, dtype=float)
    if per_chunk.size < 2:
        return 0.0
    return float(per_chunk.std(ddof=1) / np.sqrt(per_chunk.size))


def evaluate_metric(run_config, metric, samples, seed, threads=1, port=None):
    """
    One fixed-seed evaluation. Returns (value, standard error).

    contrast         fringe contrast at the selected port
    ic2              detected mean rate times contrast squared
    port_rate        expected rate at the configured mirror positions
    order1_fraction  share of atoms in order +1 after the diffract grating alone
    """
    if metric not in METRICS:
        raise ConfigError(f"Unknown metric '{metric}', expected one of {METRICS}")
    config = run_config.interferometer
    port = config.port if port is None else port
    chunk_size = run_config.chunk_size

    if metric == "order1_fraction":
        grating = int(run_config.value("diffract.grating"))
        single = replace(config, active=tuple(i == grating - 1 for i in range(3)))
        states, per_chunk, sizes = order_populations(single, samples, seed, threads, chunk_size)
        idx = int(np.nonzero(states == 1)[0][0])
        value = float(np.sum(per_chunk[:, idx] * sizes) / np.sum(sizes))
        return value, _spread(per_chunk[:, idx])

    if metric == "port_rate":
        sweep = Sweep("x_m3", (config.gratings[2].x_m,))
        scan = monte_carlo_fringe(config, sweep, samples, seed, threads, chunk_size)
        return float(scan.rates(port)[0]), float(scan.rate_error(port)[0])

    scan = monte_carlo_fringe(config, _phase_sweep(config), samples, seed, threads, chunk_size)
    p = scan.ports.index(port)
    efficiency = run_config.detector.efficiency

    def figure(rates):
        try:
            mean, contrast = fringe_coefficients(scan.phases, rates)
        except DomainError:
            return 0.0
        return contrast if metric == "contrast" else efficiency * mean * contrast ** 2

    value = figure(scan.rates(port))
    chunks = scan.chunk_rates
    per_chunk = [] if chunks is None else [figure(c[:, p]) for c in chunks]
    return float(value), _spread(per_chunk)


# =============================================================================
# PUBLIC API
# =============================================================================

def _scan_point(run_config, spec, value):
    cfg = run_config.with_value(spec.path, float(value))
    return evaluate_metric(cfg, spec.metric, spec.samples, spec.seed, port=spec.port)


def scan(run_config, spec, threads=1):
    """Evaluates spec.metric at every grid value of spec.path; points run concurrently."""
    current = run_config.value(spec.path)
    if isinstance(current, (dict, list, bool, str)):
        raise ConfigError(f"Parameter path '{spec.path}' is not numeric")

    logger.info("[Tuning] scanning %s over %d points (%s, %d atoms each)",
                spec.path, len(spec.values), spec.metric, spec.samples)
    results = run_ordered(_scan_point, [(run_config, spec, v) for v in spec.values], threads=threads)
    return ScanCurve(path=spec.path, metric=spec.metric,
                     values=np.asarray(spec.values, dtype=float),
                     metrics=np.array([r[0] for r in results]),
                     errors=np.array([r[1] for r in results]),
                     n_samples=spec.samples)


class _Objective:
    """Budgeted, memoised metric of a parameter vector."""

    def __init__(self, run_config, bounds, metric, samples, seed, threads, port, budget):
        self.run_config = run_config
        self.bounds = bounds
        self.metric = metric
        self.samples = samples
        self.seed = seed
        self.threads = threads
        self.port = port
        self.budget = budget
        self.cache = {}
        self.trace = []
        self.best = None
        self.iteration = 0

    @property
    def used(self):
        return len(self.cache)

    def configure(self, point):
        return self.run_config.with_values({b.path: float(x) for b, x in zip(self.bounds, point)})

    def __call__(self, point, parameter):
        key = tuple(round(float(x), 12) for x in point)
        if key in self.cache:
            return self.cache[key][0]
        if self.used >= self.budget:
            raise _BudgetExhausted()
        value, err = evaluate_metric(self.configure(point), self.metric, self.samples, self.seed,
                                     threads=self.threads, port=self.port)
        self.cache[key] = (value, err)
        if self.best is None or value > self.best[0]:
            self.best = (value, list(point))
        idx = [b.path for b in self.bounds].index(parameter)
        self.trace.append({
            "iteration": self.iteration,
            "parameter": parameter,
            "param_value": float(point[idx]),
            "metric": value,
            "metric_err": err,
            "n_samples": self.samples,
        })
        logger.debug("[Tuning] eval %d: %s = %.6g -> %.6g", self.used, parameter, point[idx], value)
        return value


def _line_search(objective, point, index, bound, tolerance):
    """Bounded scalar search along one coordinate; returns the best (value, metric) seen."""
    seen = []

    def negative(x):
        trial = list(point)
        trial[index] = float(x)
        value = objective(trial, bound.path)
        seen.append((value, float(x)))
        return -value

    negative(point[index])
    minimize_scalar(negative, bounds=(bound.lower, bound.upper), method="bounded",
                    options={"xatol": tolerance})
    value, x = max(seen)
    return x, value


def optimize(run_config, bounds, metric, budget, samples=4000, seed=1, threads=1, port=None,
             tolerance=LINE_TOLERANCE):
    """
    Coordinate ascent over `bounds` (ParameterBound list), one bounded scalar
    line search per parameter and cycle. A line search result is accepted
    only if it does not lower the metric. Cycles stop when one brings no
    improvement or when `budget` evaluations are used (exhausted flag set).
    """
    bounds = list(bounds)
    if not bounds:
        raise ConfigError("Nothing to optimise: no parameters given")
    if metric not in METRICS:
        raise ConfigError(f"Unknown metric '{metric}', expected one of {METRICS}")
    if budget < BUDGET_PER_PARAMETER * len(bounds):
        raise ConfigError(f"Budget {budget} is below {BUDGET_PER_PARAMETER} evaluations per parameter "
                          f"({BUDGET_PER_PARAMETER * len(bounds)} needed)")
    paths = [b.path for b in bounds]
    if len(set(paths)) != len(paths):
        raise ConfigError("Parameter paths must be distinct")

    start = []
    for b in bounds:
        value = run_config.value(b.path)
        if isinstance(value, (dict, list, bool, str)) or value is None:
            raise ConfigError(f"Parameter path '{b.path}' is not numeric")
        start.append(float(value))

    objective = _Objective(run_config, bounds, metric, samples, seed, threads, port, budget)
    point = list(start)
    current = objective(point, bounds[0].path)
    start_metric = current
    accepted = [current]
    exhausted = False
    logger.info("[Tuning] optimising %s over %s, start %.6g, budget %d", metric, paths, current, budget)

    try:
        while True:
            objective.iteration += 1
            improved = False
            for i, b in enumerate(bounds):
                x, value = _line_search(objective, point, i, b, tolerance * (b.upper - b.lower))
                if value >= current:
                    improved = improved or value > current
                    point[i] = x
                    current = value
            accepted.append(current)
            logger.info("[Tuning] cycle %d: %s = %.6g (%d evaluations)",
                        objective.iteration, metric, current, objective.used)
            if not improved:
                break
    except _BudgetExhausted:
        exhausted = True
        if objective.best[0] > current:
            current, point = objective.best[0], list(objective.best[1])
        accepted.append(current)
        logger.warning("[Tuning] budget of %d evaluations exhausted, returning best so far", budget)

    return OptimizationResult(
        values=dict(zip(paths, point)),
        start_values=dict(zip(paths, start)),
        metric=metric,
        start_metric=start_metric,
        final_metric=current,
        accepted=accepted,
        trace=objective.trace,
        evaluations=objective.used,
        iterations=objective.iteration,
        exhausted=exhausted,
        config=objective.configure(point),
    )
