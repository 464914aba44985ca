"""Multi-task optimizers with Armijo backtracking in parameter and latent space."""

from .direction import Direction, is_pareto_stationary, min_norm_2, min_norm_fw, pcgrad
from .linesearch import LineSearchConfig, StepResult, Variant, armijo_rhs, bls_step, decay_upper_bound, fbls_step
from .model import Batch, MultiTaskModel, PassCounter, build_model

__all__ = [
    "Batch", "Direction", "LineSearchConfig", "MultiTaskModel", "PassCounter", "StepResult", "Variant",
    "armijo_rhs", "bls_step", "build_model", "decay_upper_bound", "fbls_step", "is_pareto_stationary",
    "min_norm_2", "min_norm_fw", "pcgrad",
]
