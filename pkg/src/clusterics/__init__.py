"""Hypothesis tests for informative cluster size in cluster randomized trials."""

from .data import (
    ClusterSummary,
    Dataset,
    PotentialOutcomeTable,
    compute_weights,
    estimand_oracle,
    summarize,
)
from .gee import GeeFit, GeeSpec, gee_fit, wald_test
from .model_assisted import MatResult, delta_ci, model_assisted_test
from .model_based import MbResult, SizeTransform, model_based_test, naive_ics_test
from .randomization import RandTestResult, enumerate_assignments, randomization_test
from .simulation import SimReport, SimulationScenario, run_scenario, two_stage_analyst

__version__ = "0.1.0"
