"""Grid sweep of stacked-thruster designs and the force-density/efficiency frontier."""
from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import core
from .core import FluidEnvironment, LossModel, OperatingPoint, StageGeometry
from .errors import EmptyFeasibleSet, EmptyParetoSet, GridTooLarge, ParseError, PreconditionError

MAX_GRID_POINTS = 10 ** 7
THREADS_ENV = "EHD_STACK_THREADS"

CONSTRAINT_NAMES = ("max_voltage", "max_field", "min_total_force", "max_device_height")

# unit system -> {key: factor to SI}
UNIT_FACTORS = {
    "si": {"drift_gap": 1.0, "drift_field": 1.0, "area": 1.0, "max_voltage": 1.0,
           "max_field": 1.0, "min_total_force": 1.0, "max_device_height": 1.0},
    "lab": {"drift_gap": 1e-3, "drift_field": 1e6, "area": 1e-6, "max_voltage": 1e3,
            "max_field": 1e6, "min_total_force": 1e-3, "max_device_height": 1e-3},
}


@dataclass(frozen=True)
class GridRange:
    lo: float
    hi: float
    step: float = 1.0

    def __post_init__(self):
        for name in ("lo", "hi", "step"):
            if not math.isfinite(getattr(self, name)):
                raise PreconditionError(f"range {name} must be finite")
        if self.hi < self.lo:
            raise PreconditionError(f"empty range [{self.lo}, {self.hi}]")
        if self.step <= 0:
            raise PreconditionError("range resolution must be > 0")

    def __len__(self):
        return int(math.floor((self.hi - self.lo) / self.step * (1 + 1e-12) + 1e-9)) + 1

    def values(self) -> np.ndarray:
        return self.lo + self.step * np.arange(len(self), dtype=float)


@dataclass(frozen=True)
class Constraints:
    max_voltage: float | None = None  # V
    max_field: float | None = None  # V/m
    min_total_force: float | None = None  # N
    max_device_height: float | None = None  # m


@dataclass(frozen=True)
class DesignSpace:
    stage_counts: tuple  # inclusive (lo, hi)
    drift_gap: GridRange  # m
    drift_field: GridRange  # V/m
    gamma: GridRange = GridRange(core.SHIELDING_GAMMA, core.SHIELDING_GAMMA)
    area: float = 1e-4  # m^2
    inlet_velocity: float = 0.0  # m/s
    constraints: Constraints = Constraints()

    def __post_init__(self):
        lo, hi = self.stage_counts
        if int(lo) != lo or int(hi) != hi or lo < 1 or hi < lo:
            raise PreconditionError(f"bad stage count range {self.stage_counts!r}")
        object.__setattr__(self, "stage_counts", (int(lo), int(hi)))
        if self.drift_gap.lo <= 0:
            raise PreconditionError("drift gaps must be > 0")
        if self.drift_field.lo <= 0:
            raise PreconditionError("drift fields must be > 0")
        if self.gamma.lo < 0:
            raise PreconditionError("gamma must be >= 0")
        if not (math.isfinite(self.area) and self.area > 0):
            raise PreconditionError("area must be > 0")

    @property
    def stage_values(self) -> np.ndarray:
        return np.arange(self.stage_counts[0], self.stage_counts[1] + 1)

    @property
    def size(self) -> int:
        return len(self.stage_values) * len(self.drift_gap) * len(self.gamma) * len(self.drift_field)

    def to_dict(self) -> dict:
        c = self.constraints
        return {
            "units": "si",
            "stage_count": list(self.stage_counts),
            "drift_gap": [self.drift_gap.lo, self.drift_gap.hi, self.drift_gap.step],
            "gamma": [self.gamma.lo, self.gamma.hi, self.gamma.step],
            "drift_field": [self.drift_field.lo, self.drift_field.hi, self.drift_field.step],
            "area": self.area,
            "inlet_velocity": self.inlet_velocity,
            "constraints": {k: getattr(c, k) for k in CONSTRAINT_NAMES if getattr(c, k) is not None},
        }


def design_space_from_dict(doc: Mapping, units: str | None = None) -> DesignSpace:
    """Build a DesignSpace from its JSON form.

    Ranges are ``[lo, hi, step]`` lists or ``{"min", "max", "step"}`` objects.
    ``units`` ("si" or "lab") overrides the document's own ``units`` key.
    """
    units = units or doc.get("units", "si")
    if units not in UNIT_FACTORS:
        raise ParseError(f"unknown unit system {units!r}")
    scale = UNIT_FACTORS[units]

    def rng(key, default=None):
        raw = doc.get(key, default)
        if raw is None:
            raise ParseError(f"design space is missing {key!r}")
        if isinstance(raw, Mapping):
            raw = [raw.get("min"), raw.get("max", raw.get("min")), raw.get("step", 1.0)]
        if not isinstance(raw, (list, tuple)) or not 1 <= len(raw) <= 3:
            raise ParseError(f"{key!r} must be [lo, hi, step]")
        try:
            vals = [float(x) for x in raw]
        except (TypeError, ValueError):
            raise ParseError(f"{key!r} must be numeric") from None
        if len(vals) == 1:
            vals.append(vals[0])
        if len(vals) == 2:
            vals.append(1.0)
        f = scale.get(key, 1.0)
        return GridRange(vals[0] * f, vals[1] * f, vals[2] * f)

    stages = doc.get("stage_count")
    if stages is None:
        raise ParseError("design space is missing 'stage_count'")
    if isinstance(stages, int):
        stages = [stages, stages]
    cons_doc = doc.get("constraints", {}) or {}
    unknown = set(cons_doc) - set(CONSTRAINT_NAMES)
    if unknown:
        raise ParseError(f"unknown constraints: {sorted(unknown)}")
    cons = Constraints(**{k: float(v) * scale[k] for k, v in cons_doc.items() if v is not None})
    return DesignSpace(
        stage_counts=(stages[0], stages[-1]),
        drift_gap=rng("drift_gap"),
        drift_field=rng("drift_field"),
        gamma=rng("gamma", [core.SHIELDING_GAMMA / scale.get("gamma", 1.0)] * 2),
        area=float(doc.get("area", 1e-4 / scale["area"])) * scale["area"],
        inlet_velocity=float(doc.get("inlet_velocity", 0.0)),
        constraints=cons,
    )


@dataclass(frozen=True)
class DesignPoint:
    geometry: StageGeometry
    operating: OperatingPoint
    force_density: float  # N/m^3
    average_efficiency: float  # N/W
    total_force: float  # N
    feasible: bool = True
    violations: tuple = ()

    @property
    def applied_voltage(self) -> float:
        return self.operating.drift_field * self.geometry.drift_gap

    def to_dict(self) -> dict:
        g, o = self.geometry, self.operating
        return {
            "stage_count": g.stage_count,
            "drift_gap_m": g.drift_gap,
            "gamma": g.spacing_ratio,
            "area_m2": g.area,
            "drift_field_Vpm": o.drift_field,
            "inlet_velocity_mps": o.inlet_velocity,
            "applied_voltage_V": self.applied_voltage,
            "stack_height_m": g.stack_height,
            "total_force_N": self.total_force,
            "force_density_Npm3": self.force_density,
            "average_efficiency_NpW": self.average_efficiency,
        }


CSV_FIELDS = tuple(DesignPoint(StageGeometry(1.0), OperatingPoint(1.0), 0, 0, 0).to_dict())


@dataclass(frozen=True)
class ParetoSet:
    points: tuple
    space: DesignSpace | None = None
    env: FluidEnvironment | None = None
    loss: LossModel | None = None
    evaluated: int = 0
    feasible: int = 0
    violations: Mapping = field(default_factory=dict)

    def __len__(self):
        return len(self.points)

    def __iter__(self):
        return iter(self.points)

    def provenance(self) -> dict:
        out = {"evaluated_points": self.evaluated, "feasible_points": self.feasible,
               "constraint_violations": dict(self.violations)}
        if self.space is not None:
            out["design_space"] = self.space.to_dict()
        if self.env is not None:
            out["environment"] = {"air_density_kgpm3": self.env.air_density,
                                  "ion_mobility_m2pVs": self.env.ion_mobility,
                                  "permittivity_Fpm": self.env.permittivity}
        if self.loss is not None:
            out["loss_model"] = {"beta1": self.loss.beta1, "beta2": self.loss.beta2,
                                 "first_stage_loss": self.loss.first_stage_loss,
                                 "lossy_inlet": self.loss.lossy_inlet}
        return out

    def to_json(self) -> str:
        doc = {"provenance": self.provenance(), "points": [p.to_dict() for p in self.points]}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for p in self.points:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in p.to_dict().items()})
        return buf.getvalue()


def nondominated_mask(force_density, efficiency) -> np.ndarray:
    """Mask of points not dominated under maximization of both objectives.

    Points with identical objective pairs do not dominate each other.
    """
    fd = np.asarray(force_density, dtype=float)
    eta = np.asarray(efficiency, dtype=float)
    keep = np.zeros(fd.size, dtype=bool)
    if fd.size == 0:
        return keep
    order = np.lexsort((-eta, -fd))
    fd_s, eta_s = fd[order], eta[order]
    starts = np.flatnonzero(np.r_[True, fd_s[1:] != fd_s[:-1]])
    group_best = np.maximum.reduceat(eta_s, starts)
    prior_best = np.r_[-np.inf, np.maximum.accumulate(group_best)[:-1]]
    sizes = np.diff(np.r_[starts, fd_s.size])
    best = np.repeat(group_best, sizes)
    prior = np.repeat(prior_best, sizes)
    keep[order] = (eta_s == best) & (eta_s > prior)
    return keep


def _canonical_order(cols) -> np.ndarray:
    return np.lexsort((cols["E"], cols["gamma"], cols["d"], cols["n"], -cols["eta"], -cols["fd"]))


def _concat(chunks):
    keys = chunks[0].keys()
    return {k: np.concatenate([c[k] for c in chunks]) for k in keys}


def _front(cols):
    mask = nondominated_mask(cols["fd"], cols["eta"])
    return {k: v[mask] for k, v in cols.items()}


def _evaluate_stage(n, space, env, loss, eta_by_field):
    d = space.drift_gap.values()
    g = space.gamma.values()
    E = space.drift_field.values()
    dd, gg, EE = np.meshgrid(d, g, E, indexing="ij")
    eta = np.broadcast_to(eta_by_field, dd.shape)
    f0 = core.coulomb_force(EE, space.area, loss.beta1, env.permittivity)
    fn = n * loss.beta2 * f0 if loss.first_stage_loss else f0 * (1 + (n - 1) * loss.beta2)
    height = (n + (n - 1) * gg) * dd
    fd = fn / (height * space.area)
    voltage = EE * dd

    c = space.constraints
    checks = {
        "max_voltage": None if c.max_voltage is None else voltage > c.max_voltage,
        "max_field": None if c.max_field is None else EE > c.max_field,
        "min_total_force": None if c.min_total_force is None else fn < c.min_total_force,
        "max_device_height": None if c.max_device_height is None else height > c.max_device_height,
    }
    feasible = np.ones(dd.shape, dtype=bool)
    violations = {}
    for name, bad in checks.items():
        if bad is None:
            continue
        violations[name] = int(bad.sum())
        feasible &= ~bad
    cols = {
        "n": np.full(int(feasible.sum()), n), "d": dd[feasible], "gamma": gg[feasible],
        "E": EE[feasible], "fd": fd[feasible], "eta": eta[feasible], "fn": fn[feasible],
    }
    return cols, violations, int(feasible.sum())


def _thread_count(threads):
    if threads is None:
        env_val = os.environ.get(THREADS_ENV)
        threads = int(env_val) if env_val else (os.cpu_count() or 1)
    return max(1, int(threads))


def _eta_table(space, env, loss):
    stages = space.stage_values
    E = space.drift_field.values()
    table = np.empty((stages.size, E.size))
    for j, field_ in enumerate(E):
        table[:, j] = core.average_efficiency_curve(stages, field_, env, loss, space.inlet_velocity)
    return table


def _to_points(cols, space):
    pts = []
    for i in range(cols["n"].size):
        geom = StageGeometry(float(cols["d"][i]), float(cols["gamma"][i]), space.area, int(cols["n"][i]))
        op = OperatingPoint(float(cols["E"][i]), space.inlet_velocity)
        pts.append(DesignPoint(geom, op, float(cols["fd"][i]), float(cols["eta"][i]), float(cols["fn"][i])))
    return tuple(pts)


def sweep(space: DesignSpace, env: FluidEnvironment = FluidEnvironment(), loss: LossModel = LossModel(),
          max_points: int = MAX_GRID_POINTS, threads: int | None = None) -> ParetoSet:
    """Evaluate every grid point, drop infeasible ones and return the nondominated set."""
    if space.size > max_points:
        raise GridTooLarge(f"grid has {space.size} points, cap is {max_points}")
    eta = _eta_table(space, env, loss)
    stages = space.stage_values

    def work(idx):
        cols, viol, nfeas = _evaluate_stage(int(stages[idx]), space, env, loss, eta[idx])
        return _front(cols), viol, nfeas

    n_threads = min(_thread_count(threads), stages.size)
    if n_threads > 1:
        with ThreadPoolExecutor(n_threads) as pool:
            results = list(pool.map(work, range(stages.size)))
    else:
        results = [work(i) for i in range(stages.size)]

    violations = {}
    n_feasible = 0
    for _, viol, nfeas in results:
        n_feasible += nfeas
        for k, v in viol.items():
            violations[k] = violations.get(k, 0) + v
    if n_feasible == 0:
        hist = ", ".join(f"{k}: {v}" for k, v in sorted(violations.items()))
        raise EmptyFeasibleSet(f"no feasible design among {space.size} points ({hist})", violations)

    cols = _front(_concat([r[0] for r in results]))
    order = _canonical_order(cols)
    cols = {k: v[order] for k, v in cols.items()}
    return ParetoSet(_to_points(cols, space), space, env, loss, space.size, n_feasible, violations)


def evaluate_grid(space: DesignSpace, env: FluidEnvironment = FluidEnvironment(),
                  loss: LossModel = LossModel()) -> list[DesignPoint]:
    """Every grid point evaluated point by point through the core model, with feasibility."""
    c = space.constraints
    out = []
    for n in space.stage_values:
        for d in space.drift_gap.values():
            for g in space.gamma.values():
                for E in space.drift_field.values():
                    geom = StageGeometry(float(d), float(g), space.area, int(n))
                    op = OperatingPoint(float(E), space.inlet_velocity)
                    fn = core.multistage_force(geom, env, loss, op)
                    bad = []
                    if c.max_voltage is not None and E * d > c.max_voltage:
                        bad.append("max_voltage")
                    if c.max_field is not None and E > c.max_field:
                        bad.append("max_field")
                    if c.min_total_force is not None and fn < c.min_total_force:
                        bad.append("min_total_force")
                    if c.max_device_height is not None and geom.stack_height > c.max_device_height:
                        bad.append("max_device_height")
                    if bad:
                        out.append(DesignPoint(geom, op, math.nan, math.nan, fn, False, tuple(bad)))
                    else:
                        out.append(DesignPoint(geom, op, core.force_density(geom, env, loss, op),
                                               core.average_efficiency(geom, env, loss, op), fn))
    return out


def pareto_front(points, space=None, env=None, loss=None) -> ParetoSet:
    """Nondominated subset of already-evaluated feasible points, in canonical order."""
    feasible = [p for p in points if p.feasible]
    fd = np.array([p.force_density for p in feasible])
    eta = np.array([p.average_efficiency for p in feasible])
    mask = nondominated_mask(fd, eta)
    kept = [p for p, m in zip(feasible, mask) if m]
    kept.sort(key=lambda p: (-p.force_density, -p.average_efficiency, p.geometry.stage_count,
                             p.geometry.drift_gap, p.geometry.spacing_ratio, p.operating.drift_field))
    return ParetoSet(tuple(kept), space, env, loss, len(points), len(feasible))


def select(pareto: ParetoSet, weight_force_density: float) -> DesignPoint:
    """Best frontier point under a weighted sum of min-max normalized objectives."""
    if len(pareto.points) == 0:
        raise EmptyParetoSet("cannot select from an empty Pareto set")
    w = weight_force_density
    if not (math.isfinite(w) and 0 <= w <= 1):
        raise PreconditionError("weight must lie in [0, 1]")
    pts = pareto.points
    fd = np.array([p.force_density for p in pts])
    eta = np.array([p.average_efficiency for p in pts])

    def norm(x):
        span = x.max() - x.min()
        return np.zeros_like(x) if span == 0 else (x - x.min()) / span

    score = w * norm(fd) + (1 - w) * norm(eta)
    best = max(range(len(pts)), key=lambda i: (score[i], -pts[i].geometry.stage_count,
                                                -pts[i].geometry.drift_gap))
    return pts[best]
