"""Compressed sensing with random projection augmentation, a controllable
unfolded ISTA network and plug-and-play deblocking, in plain numpy."""
from .network import CoastConfig, CoastParams, count_params, load_checkpoint, save_checkpoint
from .sampling import SamplingMatrix, gen_frgm, load_matrix, measure, rpa_augment, save_matrix

__all__ = [
    "CoastConfig",
    "CoastParams",
    "SamplingMatrix",
    "count_params",
    "gen_frgm",
    "load_checkpoint",
    "load_matrix",
    "measure",
    "rpa_augment",
    "save_checkpoint",
    "save_matrix",
]
__version__ = "0.1.0"
