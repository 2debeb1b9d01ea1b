"""Analytical performance model of a stacked corona-discharge EHD thruster.

All quantities are SI. Every function here is pure; inputs are immutable
dataclasses validated at construction.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import PreconditionError, ShieldingWarning

EPSILON_0 = 8.8541878128e-12  # F/m, CODATA 2018
AIR_DENSITY = 1.20  # kg/m^3
# Effective mobility reproducing the published efficiency-loss table
# (drift speed ~230.4 m/s at 1 MV/m); see calibration.fit_table1_drift_speed.
DEFAULT_ION_MOBILITY = 2.304e-4  # m^2/(V s)
SHIELDING_GAMMA = 2.0

SPACE_CHARGE_FACTOR = 9.0 / 8.0


def _finite(name, value):
    if not math.isfinite(value):
        raise PreconditionError(f"{name} must be finite, got {value!r}")


def _positive(name, value):
    _finite(name, value)
    if value <= 0:
        raise PreconditionError(f"{name} must be > 0, got {value!r}")


@dataclass(frozen=True)
class StageGeometry:
    drift_gap: float  # m
    spacing_ratio: float = SHIELDING_GAMMA  # inter-stage spacing in units of drift_gap
    area: float = 1e-4  # m^2
    stage_count: int = 1

    def __post_init__(self):
        _positive("drift_gap", self.drift_gap)
        _positive("area", self.area)
        _finite("spacing_ratio", self.spacing_ratio)
        if self.spacing_ratio < 0:
            raise PreconditionError(f"spacing_ratio must be >= 0, got {self.spacing_ratio!r}")
        if isinstance(self.stage_count, bool) or int(self.stage_count) != self.stage_count:
            raise PreconditionError(f"stage_count must be an integer, got {self.stage_count!r}")
        if self.stage_count < 1:
            raise PreconditionError(f"stage_count must be >= 1, got {self.stage_count!r}")
        object.__setattr__(self, "stage_count", int(self.stage_count))

    @property
    def stack_height(self) -> float:
        """Active length of the stack, (n + (n-1)*gamma) * d."""
        n = self.stage_count
        return (n + (n - 1) * self.spacing_ratio) * self.drift_gap

    @property
    def volume(self) -> float:
        return self.stack_height * self.area


@dataclass(frozen=True)
class FluidEnvironment:
    air_density: float = AIR_DENSITY
    ion_mobility: float = DEFAULT_ION_MOBILITY
    permittivity: float = EPSILON_0

    def __post_init__(self):
        _positive("air_density", self.air_density)
        _positive("ion_mobility", self.ion_mobility)
        _positive("permittivity", self.permittivity)


@dataclass(frozen=True)
class LossModel:
    """Empirical loss factors plus the two modelling conventions they feed.

    ``first_stage_loss`` -- True applies beta2 to every stage (F_n = n*beta2*F0);
    False exempts the first stage (F_n = F0*(1 + (n-1)*beta2)).

    ``lossy_inlet`` -- whether the inlet velocities entering the average
    efficiency sum are built from the lossy stage forces. The default (False)
    uses the loss-free cascade, which is what reproduces the published
    efficiency-loss table.
    """

    beta1: float = 1.0
    beta2: float = 1.0
    first_stage_loss: bool = True
    lossy_inlet: bool = False

    def __post_init__(self):
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            _finite(name, value)
            if not 0 < value <= 1:
                raise PreconditionError(f"{name} must lie in (0, 1], got {value!r}")

    def stage_retention(self, n: int) -> np.ndarray:
        """Fraction of the single-stage force delivered by each of ``n`` stages."""
        b = np.full(n, self.beta2, dtype=float)
        if not self.first_stage_loss:
            b[0] = 1.0
        return b


@dataclass(frozen=True)
class OperatingPoint:
    drift_field: float  # V/m
    inlet_velocity: float = 0.0  # m/s

    def __post_init__(self):
        _positive("drift_field", self.drift_field)
        _finite("inlet_velocity", self.inlet_velocity)
        if self.inlet_velocity < 0:
            raise PreconditionError(f"inlet_velocity must be >= 0, got {self.inlet_velocity!r}")

    @classmethod
    def from_voltage(cls, voltage: float, drift_gap: float, inlet_velocity: float = 0.0):
        return cls(field_from_voltage(voltage, drift_gap), inlet_velocity)


@dataclass(frozen=True)
class PerformanceReport:
    single_stage_force: float  # N
    total_force: float  # N
    force_density: float  # N/m^3
    outlet_velocities: tuple  # m/s, one per stage
    average_efficiency: float  # N/W
    stage_efficiencies: tuple  # N/W, one per stage
    areal_thrust: float  # N/m^2
    electrical_power: float  # W
    power_density: float  # W/m^3
    inlet_velocity: float = 0.0  # m/s
    warnings: tuple = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            "single_stage_force_N": self.single_stage_force,
            "total_force_N": self.total_force,
            "force_density_Npm3": self.force_density,
            "areal_thrust_Npm2": self.areal_thrust,
            "average_efficiency_NpW": self.average_efficiency,
            "stage_efficiencies_NpW": list(self.stage_efficiencies),
            "outlet_velocities_mps": list(self.outlet_velocities),
            "inlet_velocity_mps": self.inlet_velocity,
            "electrical_power_W": self.electrical_power,
            "power_density_Wpm3": self.power_density,
            "warnings": list(self.warnings),
        }


def field_from_voltage(voltage: float, drift_gap: float) -> float:
    """Uniform-field approximation E = V/d."""
    _finite("voltage", voltage)
    _positive("drift_gap", drift_gap)
    return voltage / drift_gap


def coulomb_force(drift_field, area, beta1=1.0, permittivity=EPSILON_0):
    """Space-charge-limited force (9/8)*beta1*eps0*A*E^2. Accepts E >= 0 and arrays."""
    return SPACE_CHARGE_FACTOR * beta1 * permittivity * area * np.square(drift_field)


def single_stage_force(geom: StageGeometry, env: FluidEnvironment, loss: LossModel,
                       op: OperatingPoint) -> float:
    return float(coulomb_force(op.drift_field, geom.area, loss.beta1, env.permittivity))


def _total_from_single(f0: float, n: int, loss: LossModel) -> float:
    if loss.first_stage_loss:
        return n * loss.beta2 * f0
    return f0 * (1 + (n - 1) * loss.beta2)


def multistage_force(geom, env, loss, op) -> float:
    return _total_from_single(single_stage_force(geom, env, loss, op), geom.stage_count, loss)


def force_density(geom, env, loss, op) -> float:
    """Thrust per active stack volume A*(n + (n-1)*gamma)*d, in N/m^3."""
    return multistage_force(geom, env, loss, op) / (geom.stack_height * geom.area)


def force_density_limit(gamma: float, beta2: float) -> float:
    """Normalized force density Gamma*A*d/F0 as the stage count goes to infinity."""
    _finite("gamma", gamma)
    if gamma < 0:
        raise PreconditionError(f"gamma must be >= 0, got {gamma!r}")
    _finite("beta2", beta2)
    if not 0 < beta2 <= 1:
        raise PreconditionError(f"beta2 must lie in (0, 1], got {beta2!r}")
    return beta2 / (1 + gamma)


def stage_efficiency(env: FluidEnvironment, loss: LossModel, op: OperatingPoint) -> float:
    """Force per electrical power of one stage, beta1 / (mu*E + v_in), in N/W."""
    denom = env.ion_mobility * op.drift_field + op.inlet_velocity
    if not denom > 0:
        raise PreconditionError("mu*E + v_in must be > 0")
    return loss.beta1 / denom


def _velocity_scale(f0, env, area):
    # F0 / (0.5 rho A), m^2/s^2
    return f0 / (0.5 * env.air_density * area)


def velocity_cascade(geom, env, loss, op) -> list[float]:
    """Outlet velocity of each stage from F = 0.5*rho*A*(v_e^2 - v_in^2), chained."""
    k = _velocity_scale(single_stage_force(geom, env, loss, op), env, geom.area)
    gained = np.cumsum(loss.stage_retention(geom.stage_count)) * k
    return np.sqrt(op.inlet_velocity ** 2 + gained).tolist()


def _efficiency_terms(n, drift_field, env, loss, inlet_velocity):
    """Per-stage inlet velocities and retention-weighted efficiencies b_i*eta_i."""
    # F0/(0.5 rho A) with the area cancelled
    k = 2 * SPACE_CHARGE_FACTOR * loss.beta1 * env.permittivity * drift_field ** 2 / env.air_density
    b = loss.stage_retention(n)
    if loss.lossy_inlet:
        upstream = np.concatenate(([0.0], np.cumsum(b)[:-1]))
    else:
        upstream = np.arange(n, dtype=float)
    v_in = np.sqrt(inlet_velocity ** 2 + upstream * k)
    eta = loss.beta1 / (env.ion_mobility * drift_field + v_in)
    return v_in, eta, b * eta


def efficiency_inlet_velocities(geom, env, loss, op) -> np.ndarray:
    """Inlet velocity seen by each stage inside the average efficiency sum."""
    return _efficiency_terms(geom.stage_count, op.drift_field, env, loss, op.inlet_velocity)[0]


def stage_efficiencies(geom, env, loss, op) -> np.ndarray:
    return _efficiency_terms(geom.stage_count, op.drift_field, env, loss, op.inlet_velocity)[1]


def average_efficiency(geom, env, loss, op) -> float:
    """Mean thrust efficiency of the stack, (1/n) * sum_i b_i * eta_i, in N/W.

    ``b_i`` is the force retention of stage i (beta2 for every stage under the
    default convention) and ``eta_i`` the single-stage efficiency evaluated at
    that stage's inlet velocity.
    """
    n = geom.stage_count
    terms = _efficiency_terms(n, op.drift_field, env, loss, op.inlet_velocity)[2]
    return float(np.cumsum(terms)[-1] / n)


def efficiency_decrease(geom, env, loss, op) -> float:
    """1 - eta_ave / eta_1, with eta_1 = beta1/(mu*E) the lossless static single stage."""
    eta_1 = loss.beta1 / (env.ion_mobility * op.drift_field)
    return 1.0 - average_efficiency(geom, env, loss, op) / eta_1


def check_shielding(geom: StageGeometry) -> list[str]:
    if geom.stage_count > 1 and geom.spacing_ratio < SHIELDING_GAMMA:
        return [f"spacing_ratio {geom.spacing_ratio:g} < {SHIELDING_GAMMA:g}: "
                "neighbouring stages are not electrostatically shielded"]
    return []


def predict(geom: StageGeometry, env: FluidEnvironment = FluidEnvironment(),
            loss: LossModel = LossModel(), op: OperatingPoint | None = None) -> PerformanceReport:
    if op is None:
        raise PreconditionError("an operating point is required")
    notes = check_shielding(geom)
    for note in notes:
        warnings.warn(note, ShieldingWarning, stacklevel=2)

    f0 = single_stage_force(geom, env, loss, op)
    fn = _total_from_single(f0, geom.stage_count, loss)
    _, eta, weighted = _efficiency_terms(geom.stage_count, op.drift_field, env, loss, op.inlet_velocity)
    eta_ave = float(np.cumsum(weighted)[-1] / geom.stage_count)
    # each stage draws F0/eta_i of electrical power
    power = float(np.sum(f0 / eta))
    return PerformanceReport(
        single_stage_force=f0,
        total_force=fn,
        force_density=fn / (geom.stack_height * geom.area),
        outlet_velocities=tuple(velocity_cascade(geom, env, loss, op)),
        average_efficiency=eta_ave,
        stage_efficiencies=tuple(eta.tolist()),
        areal_thrust=fn / geom.area,
        electrical_power=power,
        power_density=power / geom.volume,
        inlet_velocity=op.inlet_velocity,
        warnings=tuple(notes),
    )


def force_from_velocities(v_out: float, v_in: float, air_density: float, area: float) -> float:
    """Momentum-theory force 0.5*rho*A*(v_out^2 - v_in^2)."""
    return 0.5 * air_density * area * (v_out ** 2 - v_in ** 2)


def average_efficiency_curve(stage_counts: Sequence[int], drift_field: float,
                             env: FluidEnvironment, loss: LossModel,
                             inlet_velocity: float = 0.0) -> np.ndarray:
    """eta_ave for many stage counts at one field (area-free, so no geometry needed)."""
    counts = np.asarray(stage_counts, dtype=int)
    if counts.size == 0:
        return np.zeros(0)
    if counts.min() < 1:
        raise PreconditionError("stage counts must be >= 1")
    terms = _efficiency_terms(int(counts.max()), drift_field, env, loss, inlet_velocity)[2]
    return np.cumsum(terms)[counts - 1] / counts
