"""Structured-prediction inverse kinematics with kernel-weighted losses."""
from .baseline import DampedLeastSquaresIK, DlsConfig, IKResult, solve_ik
from .boxopt import OptimizerConfig, OptResult, minimize
from .crisp import CRiSP, Prediction, SelectionResult, load_model, save_model, select_hyperparameters, train
from .data import (
    Dataset,
    TorusRegion,
    TrackingReport,
    Trajectory,
    make_trajectory,
    read_dataset,
    rmse,
    sample_dataset,
    track,
    write_dataset,
    write_report,
)
from .kernel import GramFactor, KernelSpec, factorize, gram, weights
from .kinematics import BiasSpec, JointBox, KinematicChain, Pose, make_panda, make_planar5, resolve_chain
from .loss import LossSpec, WeightedObjective, circle_dist_sq

__version__ = "0.1.0"

__all__ = [
    "BiasSpec", "CRiSP", "Dataset", "DampedLeastSquaresIK", "DlsConfig", "GramFactor", "IKResult",
    "JointBox", "KernelSpec", "KinematicChain", "LossSpec", "OptResult", "OptimizerConfig", "Pose",
    "Prediction", "SelectionResult", "TorusRegion", "TrackingReport", "Trajectory", "WeightedObjective",
    "circle_dist_sq", "factorize", "gram", "load_model", "make_panda", "make_planar5", "make_trajectory",
    "minimize", "read_dataset", "resolve_chain", "rmse", "sample_dataset", "save_model",
    "select_hyperparameters", "solve_ik", "track", "train", "weights", "write_dataset", "write_report",
]
