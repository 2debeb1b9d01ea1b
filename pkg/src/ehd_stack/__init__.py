"""Performance model, calibration and design sweep for stacked EHD thrusters."""
from .core import (AIR_DENSITY, DEFAULT_ION_MOBILITY, EPSILON_0, FluidEnvironment, LossModel,
                   OperatingPoint, PerformanceReport, StageGeometry, average_efficiency,
                   force_density, force_density_limit, multistage_force, predict,
                   single_stage_force, stage_efficiency, velocity_cascade)
from .calibration import (FitResult, MeasurementSeries, consistency_report, degradation_metric,
                          fit_beta1, fit_beta2, fit_onset, fit_table1_drift_speed)
from .optimizer import DesignPoint, DesignSpace, ParetoSet, select, sweep

__version__ = "0.1.0"
