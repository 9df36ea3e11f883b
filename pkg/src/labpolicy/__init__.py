"""Batch multi-objective reinforcement learning for ICU lab-test ordering."""

from .cohort import CohortConfig, simulate_cohort, split_cohort
from .fqi import FqiConfig, PolicySet, QEnsemble, apply_budget, collapse_policy, pareto_front, train_mo_fqi
from .mdp import MdpConfig, TransitionSet, build_transitions
from .ope import fit_behaviour_policy, make_random_policy, ps_wis
from .trees import TreeEnsembleParams, fit_classifier, fit_regressor

__version__ = "0.1.0"

__all__ = [
    "CohortConfig", "simulate_cohort", "split_cohort",
    "FqiConfig", "PolicySet", "QEnsemble", "apply_budget", "collapse_policy", "pareto_front", "train_mo_fqi",
    "MdpConfig", "TransitionSet", "build_transitions",
    "fit_behaviour_policy", "make_random_policy", "ps_wis",
    "TreeEnsembleParams", "fit_classifier", "fit_regressor",
]
