"""Symmetric rotation-equivariant (SRE) convolution kernels in numpy."""
from .kernel import BandSpec, band_count, build_index_matrix, expand_kernel
from .network import Network, NetworkConfig, StageConfig, build_network, load_checkpoint
from .training import TrainConfig, train_run

__version__ = "0.1.0"

__all__ = [
    "BandSpec", "band_count", "build_index_matrix", "expand_kernel",
    "Network", "NetworkConfig", "StageConfig", "build_network", "load_checkpoint",
    "TrainConfig", "train_run",
]
