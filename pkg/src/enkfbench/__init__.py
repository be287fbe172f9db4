"""Benchmarking ensemble Kalman filter variants on synthetic groundwater problems."""

__version__ = "0.1.0"

from .enkf import Ensemble, MeasurementBatch, analysis_update, kalman_gain, perturb_observations
from .forward import BoundarySpec, DynamicState, FluidProps, ForwardModel, RockProps, SolverSettings
from .grid import FieldStats, Grid2D, LogPermField, sample_field, spherical_correlation
from .harness import ExperimentPlan, RmseRecord, RmseTable, compute_rmse, run_experiment, run_plan
from .scenarios import ScenarioSpec, build_scenario, generate_truth, initial_ensemble
from .variants import (
    AssimilationProblem, ClassicalEnKF, DampedEnKF, DualEnKF, HybridEnKF, IterativeEnKF, LocalEnKF,
    NormalScoreEnKF, NormalScoreTransformer, VariantConfig, make_filter,
)
