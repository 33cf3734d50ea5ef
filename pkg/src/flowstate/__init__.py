"""Conditional normalizing-flow state estimation at desk scale.

Subpackages: a tape-based autodiff engine (``autodiff``), network building
blocks (``nn``), the driving simulator (``dynamics``), the invertible flow
stack (``flows``), context encoders (``conditioners``), UKF and MDN baselines
(``baselines``), evaluation metrics (``metrics``), and the experiment harness
(``data``, ``training``, ``cli``).
"""

from .autodiff import AdamState, Tape, Tensor
from .conditioners import ConditionerSpec, ObservationSequence, build_conditioner
from .dynamics import RobotState, RolloutConfig, RolloutRecord, generate_dataset, rollout
from .flows import FlowModel, build_flow
from .baselines import GaussianBelief, MDNModel, UKFParams, sigma_points, ukf_step
from .metrics import KLEstimate, LevelSetGrid, knn_kl_estimate, level_set_grid, mean_log_likelihood
from .training import ExperimentConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "AdamState", "Tape", "Tensor",
    "ConditionerSpec", "ObservationSequence", "build_conditioner",
    "RobotState", "RolloutConfig", "RolloutRecord", "generate_dataset", "rollout",
    "FlowModel", "build_flow",
    "GaussianBelief", "MDNModel", "UKFParams", "sigma_points", "ukf_step",
    "KLEstimate", "LevelSetGrid", "knn_kl_estimate", "level_set_grid",
    "mean_log_likelihood",
    "ExperimentConfig", "load_checkpoint", "save_checkpoint", "train",
]

__version__ = "0.1.0"
