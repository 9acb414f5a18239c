"""Fit domain-randomization distributions to offline trajectories."""

from .core import (DynamicsDistribution, FitResult, ParameterSpace, Trajectory,
                   TransitionDataset, build_dataset, extract_transitions, validate_distribution)
from .likelihood import (LikelihoodConfig, dataset_log_likelihood, dataset_mse,
                         next_state_stats, sample_dynamics, transition_log_likelihood)
from .optimize import (FitConfig, denormalize_phi, fit_dropo, fit_droid_baseline,
                       normalize_phi, tune_epsilon)
from .sim import (DataGenConfig, MassChain3, MassSpringDamper, SlidingPuck2D,
                  generate_dataset, inject_misspecification, make_simulator)

__version__ = "0.1.0"
