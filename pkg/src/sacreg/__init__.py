"""Deformable image registration with spatial-awareness convolution blocks, on a small numpy autodiff engine."""
from .tensor import ContractError, Tensor, no_grad
from .volume_io import DisplacementField, SyntheticCase, Volume, read_volume, synth_pair, write_volume
from .network import ModelConfig, SACBNet
from .config import TrainConfig, load_config, parse_config
from .train import register, train

__version__ = "0.1.0"

__all__ = [
    "ContractError",
    "DisplacementField",
    "ModelConfig",
    "SACBNet",
    "SyntheticCase",
    "Tensor",
    "TrainConfig",
    "Volume",
    "load_config",
    "no_grad",
    "parse_config",
    "read_volume",
    "register",
    "synth_pair",
    "train",
    "write_volume",
]
