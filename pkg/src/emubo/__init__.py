"""Emulated black-box benchmarks and the Bayesian optimization methods that run on them."""

from .problems import Problem, estimate_optimum, evaluate, list_problems, make_problem
from .runner import ExperimentConfig, RunRecord, load_config, run_experiment, run_seed

__all__ = ["ExperimentConfig", "Problem", "RunRecord", "estimate_optimum", "evaluate",
           "list_problems", "load_config", "make_problem", "run_experiment", "run_seed"]
__version__ = "0.1.0"
