"""Regime-switching car-following model: generative simulation, blocked
MCMC inference, and trajectory segmentation."""

from .data import Dataset, Standardizer, Trajectory, fit_standardizer, load_trajectories
from .idm import IdmParams, StateVector, idm_acceleration, simulate_step
from .inference import (
    ForwardBackwardResult,
    Hyperparams,
    ModelState,
    PosteriorSamples,
    compute_local_evidence,
    forward_backward,
    gibbs_sweep,
    merge_chains,
    run_chain,
)
from .states import JointStateSpace
from .synthetic import GeneratorConfig, LabeledDataset, align_labels, generate_dataset

__all__ = [
    "Dataset",
    "ForwardBackwardResult",
    "GeneratorConfig",
    "Hyperparams",
    "IdmParams",
    "JointStateSpace",
    "LabeledDataset",
    "ModelState",
    "PosteriorSamples",
    "StateVector",
    "Standardizer",
    "Trajectory",
    "align_labels",
    "compute_local_evidence",
    "fit_standardizer",
    "forward_backward",
    "generate_dataset",
    "gibbs_sweep",
    "idm_acceleration",
    "load_trajectories",
    "merge_chains",
    "run_chain",
    "simulate_step",
]

__version__ = "0.1.0"
