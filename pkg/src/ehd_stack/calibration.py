"""Fitting the model's empirical parameters to measured data.

Measurement logs are CSV files (``time_s,voltage_V,current_A,velocity_mps``)
with an optional JSON sidecar describing the device geometry.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import optimize, stats

from . import core
from .core import FluidEnvironment, LossModel, StageGeometry
from .errors import (FitDivergence, InsufficientData, InsufficientDuration, MismatchedGeometry,
                     ModelViolationWarning, NonConstantVoltage, ParseError, PreconditionError)

log = logging.getLogger(__name__)

CSV_COLUMNS = ("time_s", "voltage_V", "current_A", "velocity_mps")
NOISE_FLOOR = 1e-8  # A
MIN_SAMPLES = 3
MIN_ONSET_SAMPLES = 5

# Published efficiency decrease (percent), keyed by (beta2, stage count).
TABLE1 = {
    (1.0, 3): 1.4, (1.0, 10): 3.3, (1.0, 20): 4.8,
    (0.8, 3): 21.1, (0.8, 10): 22.6, (0.8, 20): 23.8,
}
TABLE1_FIELD = 1e6  # V/m
TABLE1_TOLERANCE_PP = 0.15

QUOTED_PEAK_EFFICIENCY = 1.1e-3  # N/W


@dataclass(frozen=True)
class MeasurementSeries:
    time: np.ndarray
    voltage: np.ndarray
    current: np.ndarray
    velocity: np.ndarray  # NaN where not measured
    geometry: StageGeometry
    metadata: Mapping = field(default_factory=dict)

    def __post_init__(self):
        arrays = {}
        for name in ("time", "voltage", "current", "velocity"):
            arr = np.asarray(getattr(self, name), dtype=float).copy()
            arr.setflags(write=False)
            arrays[name] = arr
            object.__setattr__(self, name, arr)
        sizes = {a.shape for a in arrays.values()}
        if len(sizes) != 1 or arrays["time"].ndim != 1:
            raise PreconditionError("time, voltage, current and velocity must be 1-D and equal length")
        t = arrays["time"]
        if not np.all(np.isfinite(t)) or np.any(np.diff(t) <= 0):
            raise PreconditionError("timestamps must be finite and strictly increasing")
        for name in ("voltage", "current"):
            a = arrays[name]
            if not np.all(np.isfinite(a)) or np.any(a < 0):
                raise PreconditionError(f"{name} must be finite and >= 0")
        v = arrays["velocity"]
        if np.any(v[np.isfinite(v)] < 0) or np.any(np.isinf(v)):
            raise PreconditionError("velocity must be >= 0")

    @property
    def stage_count(self) -> int:
        return self.geometry.stage_count

    def __len__(self):
        return self.time.size

    @classmethod
    def from_samples(cls, voltage, current, velocity=None, time=None, *, geometry, metadata=None):
        voltage = np.asarray(voltage, dtype=float)
        if time is None:
            time = np.arange(voltage.size, dtype=float)
        if velocity is None:
            velocity = np.full(voltage.size, np.nan)
        return cls(time, voltage, current, velocity, geometry, dict(metadata or {}))


@dataclass(frozen=True)
class FitResult:
    residual_rms: float
    onset_voltage: float | None = None  # V
    onset_halfwidth: float | None = None  # V, 95% confidence
    townsend_coefficient: float | None = None  # A/V^2
    fitted_beta1: float | None = None
    fitted_beta2: float | None = None
    effective_drift_speed: float | None = None  # m/s
    residual_units: str = ""
    n_samples: int = 0
    extras: Mapping = field(default_factory=dict)
    warnings: tuple = ()

    def to_dict(self) -> dict:
        out = {
            "residual_rms": self.residual_rms,
            "residual_units": self.residual_units,
            "n_samples": self.n_samples,
            "onset_voltage_V": self.onset_voltage,
            "onset_halfwidth_V": self.onset_halfwidth,
            "townsend_coefficient_ApV2": self.townsend_coefficient,
            "fitted_beta1": self.fitted_beta1,
            "fitted_beta2": self.fitted_beta2,
            "effective_drift_speed_mps": self.effective_drift_speed,
            "warnings": list(self.warnings),
        }
        out.update(self.extras)
        return {k: v for k, v in out.items() if v is not None}


# ----------------------------------------------------------------------------
# ingestion


def _parse_float(text, column, line, path, optional=False):
    text = text.strip()
    if text == "":
        if optional:
            return math.nan
        raise ParseError(f"empty {column}", line=line, path=path)
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"{column} is not a number: {text!r}", line=line, path=path) from None
    if not math.isfinite(value):
        raise ParseError(f"{column} is not finite: {text!r}", line=line, path=path)
    return value


def read_series_csv(path, geometry: StageGeometry | None = None, metadata_path=None) -> MeasurementSeries:
    """Load a measurement CSV plus its JSON sidecar (``<stem>.json`` by default).

    Any malformed row aborts with a ParseError naming the file line.
    """
    path = Path(path)
    rows = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", line=1, path=path) from None
        header = [h.strip() for h in header]
        if tuple(header) != CSV_COLUMNS:
            raise ParseError(f"expected header {','.join(CSV_COLUMNS)}", line=1, path=path)
        for rec in reader:
            line = reader.line_num
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(CSV_COLUMNS):
                raise ParseError(f"expected {len(CSV_COLUMNS)} fields, got {len(rec)}", line=line, path=path)
            t = _parse_float(rec[0], "time_s", line, path)
            v = _parse_float(rec[1], "voltage_V", line, path)
            i = _parse_float(rec[2], "current_A", line, path)
            u = _parse_float(rec[3], "velocity_mps", line, path, optional=True)
            if v < 0 or i < 0 or (u < 0):
                raise ParseError("negative voltage, current or velocity", line=line, path=path)
            if rows and t <= rows[-1][0]:
                raise ParseError("time_s is not strictly increasing", line=line, path=path)
            rows.append((t, v, i, u))
    if not rows:
        raise ParseError("no data rows", path=path)

    metadata = {}
    sidecar = Path(metadata_path) if metadata_path else path.with_suffix(".json")
    if sidecar.exists():
        metadata = read_metadata(sidecar)
        geometry = geometry_from_metadata(metadata, sidecar)
    elif metadata_path:
        raise ParseError("metadata sidecar not found", path=sidecar)
    if geometry is None:
        raise ParseError("no geometry: provide a JSON sidecar", path=path)

    data = np.array(rows, dtype=float)
    return MeasurementSeries(data[:, 0], data[:, 1], data[:, 2], data[:, 3], geometry, metadata)


def read_metadata(path) -> dict:
    path = Path(path)
    try:
        meta = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno, path=path) from None
    if not isinstance(meta, dict):
        raise ParseError("metadata must be a JSON object", path=path)
    return meta


def geometry_from_metadata(meta: Mapping, path=None) -> StageGeometry:
    missing = [k for k in ("stage_count", "drift_gap_m", "area_m2") if k not in meta]
    if missing:
        raise ParseError(f"metadata missing {', '.join(missing)}", path=path)
    try:
        return StageGeometry(
            drift_gap=float(meta["drift_gap_m"]),
            spacing_ratio=float(meta.get("gamma", core.SHIELDING_GAMMA)),
            area=float(meta["area_m2"]),
            stage_count=meta["stage_count"],
        )
    except (TypeError, ValueError) as exc:
        raise ParseError(f"bad metadata: {exc}", path=path) from None


def write_series_csv(series: MeasurementSeries, path, label="") -> None:
    """Write a series and its sidecar in the ingestion format."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for t, v, i, u in zip(series.time, series.voltage, series.current, series.velocity):
            w.writerow([repr(float(t)), repr(float(v)), repr(float(i)), "" if np.isnan(u) else repr(float(u))])
    g = series.geometry
    meta = {"stage_count": g.stage_count, "drift_gap_m": g.drift_gap, "gamma": g.spacing_ratio,
            "area_m2": g.area, "label": label or series.metadata.get("label", "")}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


# ----------------------------------------------------------------------------
# onset


def townsend_current(voltage, coefficient, onset_voltage):
    """Quadratic corona law I = C*V*(V - V0)."""
    voltage = np.asarray(voltage, dtype=float)
    return coefficient * voltage * (voltage - onset_voltage)


def fit_onset(series: MeasurementSeries, noise_floor: float = NOISE_FLOOR, max_evals: int = 2000) -> FitResult:
    """Least-squares fit of I = C*V*(V - V0) to samples above the noise floor."""
    mask = series.current > noise_floor
    v = series.voltage[mask]
    i = series.current[mask]
    if v.size < MIN_ONSET_SAMPLES:
        raise InsufficientData(f"{v.size} samples above the {noise_floor:g} A noise floor, "
                               f"need {MIN_ONSET_SAMPLES}")

    # I = a*V^2 + b*V is linear; solve it directly for the starting point
    design = np.column_stack((v * v, v))
    (a, b), *_ = np.linalg.lstsq(design, i, rcond=None)
    if not a > 0:
        raise FitDivergence("current does not grow quadratically with voltage")
    p0 = (a, -b / a)
    try:
        popt, pcov = optimize.curve_fit(townsend_current, v, i, p0=p0, method="trf",
                                        max_nfev=max_evals, x_scale=(a, max(abs(p0[1]), 1.0)))
    except (RuntimeError, optimize.OptimizeWarning) as exc:
        raise FitDivergence(str(exc)) from None
    coefficient, onset = (float(x) for x in popt)
    if not (np.all(np.isfinite(popt)) and coefficient > 0):
        raise FitDivergence("fit produced a non-physical coefficient")

    resid = i - townsend_current(v, coefficient, onset)
    dof = v.size - 2
    halfwidth = math.nan
    if np.all(np.isfinite(pcov)):
        halfwidth = float(stats.t.ppf(0.975, dof) * math.sqrt(max(pcov[1, 1], 0.0)))
    return FitResult(
        residual_rms=float(np.sqrt(np.mean(resid ** 2))),
        onset_voltage=onset,
        onset_halfwidth=halfwidth,
        townsend_coefficient=coefficient,
        residual_units="A",
        n_samples=int(v.size),
    )


# ----------------------------------------------------------------------------
# loss factors


def momentum_force(velocity, env: FluidEnvironment, area: float):
    """Thrust inferred from a uniform outlet velocity, 0.5*rho*A*v^2."""
    return 0.5 * env.air_density * area * np.square(velocity)


def _ratio_fit(measured, predicted):
    denom = float(np.dot(predicted, predicted))
    if denom == 0:
        raise InsufficientData("model predicts zero force at every sample")
    return float(np.dot(predicted, measured)) / denom


def _check_beta(name, value, notes):
    if value > 1 + 1e-9:
        notes.append(f"fitted {name} = {value:.4g} exceeds 1")
    elif value == 0:
        notes.append(f"fitted {name} = 0: no thrust measured")
    for note in notes:
        warnings.warn(note, ModelViolationWarning, stacklevel=3)


def fit_beta1(series: MeasurementSeries, env: FluidEnvironment = FluidEnvironment()) -> FitResult:
    """Force-transfer loss factor from a single-stage velocity log."""
    if series.stage_count != 1:
        raise PreconditionError(f"beta1 is fitted on single-stage data, got {series.stage_count} stages")
    mask = np.isfinite(series.velocity)
    if mask.sum() < MIN_SAMPLES:
        raise InsufficientData(f"{int(mask.sum())} velocity samples, need {MIN_SAMPLES}")
    g = series.geometry
    measured = momentum_force(series.velocity[mask], env, g.area)
    predicted = core.coulomb_force(series.voltage[mask] / g.drift_gap, g.area, 1.0, env.permittivity)
    beta1 = _ratio_fit(measured, predicted)
    notes = []
    _check_beta("beta1", beta1, notes)
    resid = measured - beta1 * predicted
    return FitResult(
        residual_rms=float(np.sqrt(np.mean(resid ** 2))),
        fitted_beta1=beta1,
        residual_units="N",
        n_samples=int(mask.sum()),
        warnings=tuple(notes),
    )


def _averaged_by_voltage(voltage, values):
    order = np.argsort(voltage, kind="stable")
    v, y = voltage[order], values[order]
    uniq, inverse = np.unique(v, return_inverse=True)
    sums = np.bincount(inverse, weights=y)
    counts = np.bincount(inverse)
    return uniq, sums / counts


def fit_beta2(series_by_stage: Sequence[MeasurementSeries], env: FluidEnvironment = FluidEnvironment(),
              beta1: float = 1.0, first_stage_loss: bool = True) -> FitResult:
    """Inter-stage loss factor from logs of devices with different stage counts.

    Velocity and current are interpolated onto the voltages of the lowest-stage
    series (restricted to the range every series covers). Forces are compared
    in absolute terms against the single-stage force at the given beta1.
    """
    series_by_stage = list(series_by_stage)
    if len(series_by_stage) < 2:
        raise InsufficientData("need at least two series")
    counts = [s.stage_count for s in series_by_stage]
    if len(set(counts)) < 2:
        raise InsufficientData("need at least two distinct stage counts")
    ref = series_by_stage[0].geometry
    for s in series_by_stage[1:]:
        g = s.geometry
        if (g.drift_gap, g.spacing_ratio, g.area) != (ref.drift_gap, ref.spacing_ratio, ref.area):
            raise MismatchedGeometry("series differ in drift gap, spacing ratio or area")
    if not 0 < beta1 <= 1:
        raise PreconditionError("beta1 must lie in (0, 1]")
    if first_stage_loss is False and max(counts) < 2:
        raise InsufficientData("no multi-stage series")

    curves = []
    for s in series_by_stage:
        mask = np.isfinite(s.velocity)
        if mask.sum() < MIN_SAMPLES:
            raise InsufficientData(f"{s.stage_count}-stage series has {int(mask.sum())} velocity samples")
        vgrid, vel = _averaged_by_voltage(s.voltage[mask], s.velocity[mask])
        _, cur = _averaged_by_voltage(s.voltage[mask], s.current[mask])
        curves.append((s.stage_count, vgrid, vel, cur))

    lo = max(c[1][0] for c in curves)
    hi = min(c[1][-1] for c in curves)
    base = min(curves, key=lambda c: c[0])[1]
    grid = base[(base >= lo) & (base <= hi)]
    if grid.size < MIN_SAMPLES:
        raise InsufficientData("fewer than three common voltages across the series")

    f0 = core.coulomb_force(grid / ref.drift_gap, ref.area, beta1, env.permittivity)
    xs, ys, stage_n, stage_i = [], [], [], []
    for n, vgrid, vel, cur in curves:
        measured = momentum_force(np.interp(grid, vgrid, vel), env, ref.area)
        if first_stage_loss:
            xs.append(n * f0)
            ys.append(measured)
        else:
            xs.append((n - 1) * f0)
            ys.append(measured - f0)
        stage_n.append(n)
        stage_i.append(float(np.mean(np.interp(grid, vgrid, cur))))
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    beta2 = _ratio_fit(y, x)
    notes = []
    _check_beta("beta2", beta2, notes)
    resid = y - beta2 * x

    reg = stats.linregress(stage_n, stage_i)
    extras = {
        "current_vs_stage_slope_A": float(reg.slope),
        "current_vs_stage_intercept_A": float(reg.intercept),
        "current_vs_stage_r": float(reg.rvalue),
        "common_voltages": int(grid.size),
    }
    return FitResult(
        residual_rms=float(np.sqrt(np.mean(resid ** 2))),
        fitted_beta2=beta2,
        residual_units="N",
        n_samples=int(y.size),
        extras=extras,
        warnings=tuple(notes),
    )


# ----------------------------------------------------------------------------
# degradation


def degradation_metric(series: MeasurementSeries, window: float = 100.0, averaging: float = 5.0) -> float:
    """Fractional current drop 1 - I_end/I_start over ``window`` seconds at constant voltage.

    Both endpoint currents are means over ``averaging`` seconds at the start
    and end of the window.
    """
    if not (window > 0 and averaging > 0 and averaging <= window):
        raise PreconditionError("need 0 < averaging <= window")
    v = series.voltage
    mean_v = float(np.mean(v))
    if mean_v <= 0 or np.max(np.abs(v - mean_v)) >= 0.01 * mean_v:
        raise NonConstantVoltage("voltage deviates by 1% or more from its mean")
    t = series.time - series.time[0]
    # tolerate float round-off in the last timestamp
    if t[-1] < window * (1 - 1e-9):
        raise InsufficientDuration(f"series spans {t[-1]:g} s, window is {window:g} s")
    start = t <= averaging
    end = (t >= window - averaging) & (t <= window * (1 + 1e-12))
    i_start = float(np.mean(series.current[start]))
    i_end = float(np.mean(series.current[end]))
    if i_start <= 0:
        raise InsufficientData("no current at the start of the window")
    return 1.0 - i_end / i_start


# ----------------------------------------------------------------------------
# efficiency table


@dataclass(frozen=True)
class Table1Fit:
    drift_speed: float  # m/s
    cells: Mapping  # (beta2, n) -> reproduced percent
    errors: Mapping  # (beta2, n) -> reproduced - published, percentage points
    max_error: float  # percentage points
    scan_speeds: np.ndarray
    scan_residuals: np.ndarray

    @property
    def ion_mobility(self) -> float:
        return self.drift_speed / TABLE1_FIELD

    def rows(self):
        for key in sorted(TABLE1, key=lambda k: (-k[0], k[1])):
            yield key[0], key[1], TABLE1[key], self.cells[key], self.errors[key]

    def to_dict(self) -> dict:
        return {
            "effective_drift_speed_mps": self.drift_speed,
            "ion_mobility_m2pVs": self.ion_mobility,
            "max_abs_error_pp": self.max_error,
            "cells": [
                {"beta2": b2, "stages": n, "published_pct": pub, "reproduced_pct": rep, "error_pp": err}
                for b2, n, pub, rep, err in self.rows()
            ],
        }


def table1_cells(drift_speed: float, air_density: float = core.AIR_DENSITY, beta1: float = 1.0,
                 lossy_inlet: bool = False) -> dict:
    """Efficiency decrease in percent for every published cell at one drift speed."""
    env = FluidEnvironment(air_density=air_density, ion_mobility=drift_speed / TABLE1_FIELD)
    op = core.OperatingPoint(TABLE1_FIELD)
    out = {}
    for b2, n in TABLE1:
        loss = LossModel(beta1=beta1, beta2=b2, lossy_inlet=lossy_inlet)
        geom = StageGeometry(drift_gap=1e-3, area=1e-4, stage_count=n)
        out[(b2, n)] = 100.0 * core.efficiency_decrease(geom, env, loss, op)
    return out


def _table1_residual(drift_speed, air_density, beta1, lossy_inlet):
    cells = table1_cells(drift_speed, air_density, beta1, lossy_inlet)
    return max(abs(cells[k] - TABLE1[k]) for k in TABLE1)


def fit_table1_drift_speed(lo: float = 100.0, hi: float = 400.0, step: float = 0.5,
                           air_density: float = core.AIR_DENSITY, beta1: float = 1.0,
                           lossy_inlet: bool = False) -> Table1Fit:
    """Scan the ion drift speed mu*E for the best worst-cell match to the table."""
    speeds = np.arange(lo, hi + 0.5 * step, step)
    residuals = np.array([_table1_residual(s, air_density, beta1, lossy_inlet) for s in speeds])
    best = float(speeds[int(np.argmin(residuals))])
    cells = table1_cells(best, air_density, beta1, lossy_inlet)
    errors = {k: cells[k] - TABLE1[k] for k in TABLE1}
    log.debug("table fit: %.2f m/s, max error %.4f pp", best, residuals.min())
    return Table1Fit(best, cells, errors, float(max(abs(e) for e in errors.values())), speeds, residuals)


# ----------------------------------------------------------------------------
# headline figures


@dataclass(frozen=True)
class ConsistencyReport:
    areal_thrust: float
    force_density: float
    power_density: float
    stage_count: int
    gamma: float
    implied_drift_gap: float  # m
    implied_stack_height: float  # m
    implied_bulk_efficiency: float  # N/W
    implied_jet_velocity: float  # m/s
    quoted_efficiency: float  # N/W
    notices: tuple

    def to_dict(self) -> dict:
        return {
            "areal_thrust_Npm2": self.areal_thrust,
            "force_density_Npm3": self.force_density,
            "power_density_Wpm3": self.power_density,
            "stage_count": self.stage_count,
            "gamma": self.gamma,
            "implied_drift_gap_m": self.implied_drift_gap,
            "implied_stack_height_m": self.implied_stack_height,
            "implied_bulk_efficiency_NpW": self.implied_bulk_efficiency,
            "implied_jet_velocity_mps": self.implied_jet_velocity,
            "quoted_efficiency_NpW": self.quoted_efficiency,
            "notices": list(self.notices),
        }


def consistency_report(areal_thrust: float, force_density: float, power_density: float,
                       stage_count: int, gamma: float,
                       quoted_efficiency: float = QUOTED_PEAK_EFFICIENCY,
                       notice_threshold: float = 0.25) -> ConsistencyReport:
    """Geometry and efficiency implied by a set of headline performance figures.

    The bulk efficiency is force density over power density. If the power
    density is instead the jet's kinetic power, static momentum theory gives
    the jet velocity 2*P/F, which is reported alongside.
    """
    for name, val in (("areal_thrust", areal_thrust), ("force_density", force_density),
                      ("power_density", power_density), ("quoted_efficiency", quoted_efficiency)):
        if not (math.isfinite(val) and val > 0):
            raise PreconditionError(f"{name} must be > 0")
    if int(stage_count) != stage_count or stage_count < 1:
        raise PreconditionError("stage_count must be a positive integer")
    if not (math.isfinite(gamma) and gamma >= 0):
        raise PreconditionError("gamma must be >= 0")
    n = int(stage_count)
    height = areal_thrust / force_density
    gap = height / (n + (n - 1) * gamma)
    bulk = force_density / power_density
    jet_velocity = 2 * power_density / force_density
    notices = []
    if abs(bulk - quoted_efficiency) > notice_threshold * quoted_efficiency:
        notices.append(
            f"implied bulk efficiency {bulk * 1e3:.3g} mN/W differs from the quoted "
            f"{quoted_efficiency * 1e3:.3g} mN/W; the figures likely come from different operating points"
            f" or the power density is jet power (implied jet velocity {jet_velocity:.3g} m/s)"
        )
    return ConsistencyReport(areal_thrust, force_density, power_density, n, float(gamma),
                             gap, height, bulk, jet_velocity, quoted_efficiency, tuple(notices))
