"""Command-line front end: ``ehd-stack <subcommand> [options]``.

Flags taking lab units say so in their name (``--gap-mm``, ``--field-MVpm``).
``--units`` picks the unit system of JSON config documents. Every output is SI.
On failure a one-line JSON error object is written to stderr and the exit
status identifies the failure class.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import calibration, core, optimizer
from .core import FluidEnvironment, LossModel, OperatingPoint, StageGeometry
from .errors import EHDError, ParseError, PreconditionError

log = logging.getLogger("ehd_stack")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_PARSE = 2
EXIT_PRECONDITION = 3
EXIT_FIT = 4
EXIT_INFEASIBLE = 5

LAB_TO_SI = {"stages": 1, "gap": 1e-3, "field": 1e6, "area": 1e-6, "gamma": 1, "inlet_velocity": 1}


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise ParseError(message)


def _dump(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _write(path, text):
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _load_json(path):
    path = Path(path)
    if not path.exists():
        raise ParseError("file not found", path=path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno, path=path) from None
    if not isinstance(doc, dict):
        raise ParseError("expected a JSON object", path=path)
    return doc


def _env(args, config) -> FluidEnvironment:
    kw = {}
    rho = args.rho if args.rho is not None else config.get("rho")
    mu = args.mu if args.mu is not None else config.get("mu")
    if rho is not None:
        kw["air_density"] = float(rho)
    if mu is not None:
        kw["ion_mobility"] = float(mu)
    return FluidEnvironment(**kw)


def _loss(args, config) -> LossModel:
    b1 = args.beta1 if args.beta1 is not None else config.get("beta1", 1.0)
    b2 = args.beta2 if args.beta2 is not None else config.get("beta2", 1.0)
    return LossModel(float(b1), float(b2),
                     first_stage_loss=bool(config.get("first_stage_loss", True)),
                     lossy_inlet=bool(config.get("lossy_inlet", False)))


def _device(args, config):
    """Geometry and operating point from config (in --units) then flag overrides (SI)."""
    units = args.units or config.get("units", "si")
    scale = LAB_TO_SI if units == "lab" else dict.fromkeys(LAB_TO_SI, 1)
    vals = {
        "stages": 1, "gap": 1e-3, "gamma": core.SHIELDING_GAMMA, "area": 1e-4,
        "field": 1e6, "inlet_velocity": 0.0,
    }
    for key in vals:
        if key in config:
            vals[key] = float(config[key]) * scale[key]
    if args.stages is not None:
        vals["stages"] = args.stages
    if args.gap_mm is not None:
        vals["gap"] = args.gap_mm * 1e-3
    if args.gamma is not None:
        vals["gamma"] = args.gamma
    if args.area_mm2 is not None:
        vals["area"] = args.area_mm2 * 1e-6
    if args.field_MVpm is not None:
        vals["field"] = args.field_MVpm * 1e6
    if getattr(args, "inlet_velocity", None) is not None:
        vals["inlet_velocity"] = args.inlet_velocity
    stages = vals["stages"]
    if int(stages) != stages:
        raise PreconditionError("stage count must be an integer")
    geom = StageGeometry(vals["gap"], vals["gamma"], vals["area"], int(stages))
    return geom, OperatingPoint(vals["field"], vals["inlet_velocity"])


def _config(args):
    return _load_json(args.config) if args.config else {}


def _out_sibling(out, suffix):
    if out is None or str(out) == "-":
        return None
    out = Path(out)
    return out.with_name(out.stem + suffix)


# ---------------------------------------------------------------------------
# subcommands


def cmd_predict(args):
    config = _config(args)
    env, loss = _env(args, config), _loss(args, config)
    geom, op = _device(args, config)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        report = core.predict(geom, env, loss, op)
    doc = {
        "geometry": {"stage_count": geom.stage_count, "drift_gap_m": geom.drift_gap,
                     "gamma": geom.spacing_ratio, "area_m2": geom.area},
        "operating_point": {"drift_field_Vpm": op.drift_field, "inlet_velocity_mps": op.inlet_velocity,
                            "applied_voltage_V": op.drift_field * geom.drift_gap},
        "report": report.to_dict(),
    }
    _write(args.out, _dump(doc))

    # voltage sweep up to the requested operating voltage
    sweep_path = _out_sibling(args.out, "_sweep.csv")
    if sweep_path is not None:
        v_max = op.drift_field * geom.drift_gap
        voltages = v_max * np.arange(1, args.sweep_points + 1) / args.sweep_points
        header = ["voltage_V", "drift_field_Vpm", "force_N"]
        header += [f"velocity_stage{i + 1}_mps" for i in range(geom.stage_count)]
        header.append("efficiency_NpW")
        with sweep_path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for v in voltages:
                point = OperatingPoint(float(v) / geom.drift_gap, op.inlet_velocity)
                fn = core.multistage_force(geom, env, loss, point)
                vel = core.velocity_cascade(geom, env, loss, point)
                eta = core.average_efficiency(geom, env, loss, point)
                w.writerow([repr(float(v)), repr(point.drift_field), repr(fn)] + [repr(x) for x in vel] + [repr(eta)])
    return EXIT_OK


def cmd_table1(args):
    fit = calibration.fit_table1_drift_speed(air_density=args.rho or core.AIR_DENSITY,
                                             lossy_inlet=args.lossy_inlet)
    lines = [f"effective drift speed: {fit.drift_speed:.1f} m/s (mu = {fit.ion_mobility:.4e} m^2/(V s))"]
    lines += [f"{'beta2':>6} {'stages':>6} {'published_%':>12} {'model_%':>9} {'error_pp':>9}"]
    for b2, n, pub, rep, err in fit.rows():
        lines.append(f"{b2:>6.1f} {n:>6d} {pub:>12.1f} {rep:>9.3f} {err:>+9.3f}")
    lines.append(f"max |error| = {fit.max_error:.3f} pp "
                 f"({'within' if fit.max_error <= calibration.TABLE1_TOLERANCE_PP else 'OUTSIDE'} "
                 f"{calibration.TABLE1_TOLERANCE_PP} pp)")
    sys.stdout.write("\n".join(lines) + "\n")
    if args.out not in (None, "-"):
        _write(args.out, _dump(fit.to_dict()))
    return EXIT_OK


def _read_inputs(args, config):
    if not args.input:
        raise ParseError("--input is required")
    fallback = None
    try:
        fallback = _device(args, config)[0]
    except PreconditionError:
        pass
    return [calibration.read_series_csv(p, geometry=fallback) for p in args.input]


def cmd_fit_onset(args):
    config = _config(args)
    series = _read_inputs(args, config)
    if len(series) != 1:
        raise PreconditionError("fit-onset takes exactly one --input")
    result = calibration.fit_onset(series[0], noise_floor=args.noise_floor)
    _write(args.out, _dump(result.to_dict()))
    return EXIT_OK


def cmd_fit_beta(args):
    config = _config(args)
    series = _read_inputs(args, config)
    env = _env(args, config)
    which = args.which
    if which == "auto":
        which = "beta1" if len(series) == 1 else "beta2"
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if which == "beta1":
            if len(series) != 1:
                raise PreconditionError("beta1 fit takes exactly one --input")
            result = calibration.fit_beta1(series[0], env)
        else:
            beta1 = args.beta1 if args.beta1 is not None else float(config.get("beta1", 1.0))
            result = calibration.fit_beta2(series, env, beta1=beta1,
                                           first_stage_loss=bool(config.get("first_stage_loss", True)))
    _write(args.out, _dump(result.to_dict()))
    return EXIT_OK


def cmd_degradation(args):
    config = _config(args)
    series = _read_inputs(args, config)
    if len(series) != 1:
        raise PreconditionError("degradation takes exactly one --input")
    drop = calibration.degradation_metric(series[0], window=args.window, averaging=args.averaging)
    doc = {"fractional_current_drop": drop, "window_s": args.window, "averaging_s": args.averaging}
    _write(args.out, _dump(doc))
    return EXIT_OK


def cmd_optimize(args):
    if not args.config:
        raise ParseError("optimize needs --config <design space json>")
    config = _config(args)
    space = optimizer.design_space_from_dict(config.get("design_space", config), units=args.units)
    env, loss = _env(args, config), _loss(args, config)
    pareto = optimizer.sweep(space, env, loss)
    doc = json.loads(pareto.to_json())
    if args.weight is not None:
        chosen = optimizer.select(pareto, args.weight)
        doc["selected"] = dict(chosen.to_dict(), weight_force_density=args.weight)
    if args.out in (None, "-"):
        sys.stdout.write(_dump(doc))
    else:
        out = Path(args.out)
        json_path = out if out.suffix == ".json" else out.with_suffix(".json")
        _write(json_path, _dump(doc))
        _write(json_path.with_suffix(".csv"), pareto.to_csv())
    return EXIT_OK


def cmd_report(args):
    config = _config(args)
    get = lambda key, default: config.get(key, default)  # noqa: E731
    report = calibration.consistency_report(
        areal_thrust=args.areal_thrust if args.areal_thrust is not None else float(get("areal_thrust", 15.0)),
        force_density=args.force_density if args.force_density is not None else float(get("force_density", 2000.0)),
        power_density=args.power_density if args.power_density is not None else float(get("power_density", 4000.0)),
        stage_count=args.stages if args.stages is not None else int(get("stage_count", 3)),
        gamma=args.gamma if args.gamma is not None else float(get("gamma", core.SHIELDING_GAMMA)),
        quoted_efficiency=float(get("quoted_efficiency", calibration.QUOTED_PEAK_EFFICIENCY)),
    )
    _write(args.out, _dump(report.to_dict()))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = _ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config document")
    common.add_argument("--input", action="append", help="measurement CSV (repeatable)")
    common.add_argument("--out", help="output path ('-' or omitted: stdout)")
    common.add_argument("--units", choices=("si", "lab"),
                        help="unit system of the --config document (default: its 'units' key, else si)")
    common.add_argument("--beta1", type=float)
    common.add_argument("--beta2", type=float)
    common.add_argument("--mu", type=float, help="ion mobility, m^2/(V s)")
    common.add_argument("--rho", type=float, help="air density, kg/m^3")
    common.add_argument("--gamma", type=float, help="inter-stage spacing / drift gap")
    common.add_argument("--stages", type=int)
    common.add_argument("--gap-mm", type=float, dest="gap_mm")
    common.add_argument("--area-mm2", type=float, dest="area_mm2")
    common.add_argument("--field-MVpm", type=float, dest="field_MVpm")
    common.add_argument("--weight", type=float, help="force-density weight for design selection")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _ArgumentParser(prog="ehd-stack", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=_ArgumentParser)

    p = sub.add_parser("predict", parents=[common], help="performance report and voltage sweep")
    p.add_argument("--inlet-velocity", type=float, dest="inlet_velocity", help="m/s")
    p.add_argument("--sweep-points", type=int, default=20)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("fit-onset", parents=[common], help="corona onset voltage from an IV log")
    p.add_argument("--noise-floor", type=float, default=calibration.NOISE_FLOOR, help="A")
    p.set_defaults(func=cmd_fit_onset)

    p = sub.add_parser("fit-beta", parents=[common], help="loss factors from velocity logs")
    p.add_argument("--which", choices=("auto", "beta1", "beta2"), default="auto")
    p.set_defaults(func=cmd_fit_beta)

    p = sub.add_parser("degradation", parents=[common], help="current drop at constant voltage")
    p.add_argument("--window", type=float, default=100.0, help="s")
    p.add_argument("--averaging", type=float, default=5.0, help="endpoint averaging window, s")
    p.set_defaults(func=cmd_degradation)

    p = sub.add_parser("table1", parents=[common], help="reproduce the efficiency-loss table")
    p.add_argument("--lossy-inlet", action="store_true", dest="lossy_inlet")
    p.set_defaults(func=cmd_table1)

    p = sub.add_parser("optimize", parents=[common], help="Pareto sweep over a design space")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("report", parents=[common], help="geometry implied by headline figures")
    p.add_argument("--areal-thrust", type=float, dest="areal_thrust", help="N/m^2")
    p.add_argument("--force-density", type=float, dest="force_density", help="N/m^3")
    p.add_argument("--power-density", type=float, dest="power_density", help="W/m^3")
    p.set_defaults(func=cmd_report)
    return parser


def _error_json(exc, code):
    doc = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    line = getattr(exc, "line", None)
    if line is not None:
        doc["line"] = line
    path = getattr(exc, "path", None)
    if path is not None:
        doc["path"] = str(path)
    violations = getattr(exc, "violations", None)
    if violations:
        doc["constraint_violations"] = violations
    return json.dumps(doc, sort_keys=True)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except EHDError as exc:
        err, code = exc, exc.exit_code
    except OSError as exc:
        err, code = exc, EXIT_PARSE
    except Exception as exc:  # noqa: BLE001
        log.debug("unexpected failure", exc_info=True)
        err, code = exc, EXIT_INTERNAL
    print(_error_json(err, code), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
