"""Energy-based plug-and-play image recovery.

A scalar energy network is trained by denoising score matching; its
gradient, computed through the same weights, is a conservative score.
Gradient descent on the MAP objective with a Lipschitz-derived step size
then decreases the cost monotonically.
"""

from .bench import BenchReport, SuiteConfig, run_benchmark
from .checkpoint import load_checkpoint, save_checkpoint
from .dsm import TrainConfig, dsm_loss, perturb, train
from .energy import EnergyModel, EnergyNetConfig, QuadraticEnergy
from .lipschitz import estimate_L, step_size
from .operators import identity_op, mask_op, mri_op, variable_density_mask
from .solver import SolveConfig, epnp_gd, red_sd, score_pnp

__version__ = "0.1.0"

__all__ = [
    "BenchReport",
    "EnergyModel",
    "EnergyNetConfig",
    "QuadraticEnergy",
    "SolveConfig",
    "SuiteConfig",
    "TrainConfig",
    "dsm_loss",
    "epnp_gd",
    "estimate_L",
    "identity_op",
    "load_checkpoint",
    "mask_op",
    "mri_op",
    "perturb",
    "red_sd",
    "run_benchmark",
    "save_checkpoint",
    "score_pnp",
    "step_size",
    "train",
    "variable_density_mask",
]
