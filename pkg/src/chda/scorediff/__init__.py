"""Variance-exploding score-based diffusion over 2D log-permeability maps."""
from .models import (GaussianScore, NetworkScore, NormStats, PointMassScore, ScoreModel, denormalize,
                     load_weights, normalize, save_weights, score)
from .network import NetworkSpec, ScoreNet
from .sampling import Observations, SamplerError, sample_diagnostics, sample_ode, sample_pc, sample_posterior
from .schedule import EPS_T, VESchedule, perturb, sigma_t
from .training import TrainConfig, TrainHistory, TrainingError, dsm_train, evaluate_loss

__all__ = [
    "EPS_T", "GaussianScore", "NetworkScore", "NetworkSpec", "NormStats", "Observations", "PointMassScore",
    "SamplerError", "ScoreModel", "ScoreNet", "TrainConfig", "TrainHistory", "TrainingError", "VESchedule",
    "denormalize", "dsm_train", "evaluate_loss", "load_weights", "normalize", "perturb", "sample_diagnostics",
    "sample_ode", "sample_pc", "sample_posterior", "save_weights", "score", "sigma_t",
]
