"""Frequency-domain nuances mining for cross-modality retrieval, in numpy."""
from .fourier import Spectrum, fft2, ifft2, recombine, swap_components
from .losses import LossWeights, cnm_branch, cnm_total, total_loss
from .modules import BackboneConfig, FDNMModel, agp_forward, anm_forward
from .training import TrainConfig, train

__all__ = [
    "BackboneConfig", "FDNMModel", "LossWeights", "Spectrum", "TrainConfig",
    "agp_forward", "anm_forward", "cnm_branch", "cnm_total", "fft2", "ifft2",
    "recombine", "swap_components", "total_loss", "train",
]
