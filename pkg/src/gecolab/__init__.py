"""Rate-distortion tools for VAEs: tiling fixed points, phase transitions,
Lipschitz projections, equipartition occupancies and constrained training."""
__version__ = "0.1.0"

from .datasets import Dataset, make_dataset
from .equipartition import EnergyTable, solve_gamma
from .geco import ConstraintSpec, LagrangeState, geco_step
from .kernels import BACKEND
from .lipschitz import LipschitzSpec, projected_iterate
from .phase import BetaSweepConfig, sweep
from .tiling import IterationConfig, LatentGrid, smoothed_iterate
from .training import TrainConfig, train
from .vae import GaussianVae

__all__ = [
    "BACKEND",
    "BetaSweepConfig",
    "ConstraintSpec",
    "Dataset",
    "EnergyTable",
    "GaussianVae",
    "IterationConfig",
    "LagrangeState",
    "LatentGrid",
    "LipschitzSpec",
    "TrainConfig",
    "geco_step",
    "make_dataset",
    "projected_iterate",
    "smoothed_iterate",
    "solve_gamma",
    "sweep",
    "train",
]
