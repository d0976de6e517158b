"""Re-parameterizable residual attention network for nonhomogeneous dehazing.

The package is organized as a small numpy-backed deep learning stack:

- :mod:`rephaze.tensor`: 4-D tensors with a reverse-mode autodiff tape.
- :mod:`rephaze.layers`: convolution, batch norm, padding, pooling, resampling.
- :mod:`rephaze.attention`: spatial and channel attention blocks.
- :mod:`rephaze.network`: the multi-branch blocks, the full model, serialization.
- :mod:`rephaze.reparam`: branch fusion and batch-norm folding for inference.
- :mod:`rephaze.losses`: L1 + color-attenuation + Laplacian-pyramid objective.
- :mod:`rephaze.data`: synthetic haze, paired datasets, patch sampling, PNG i/o.
- :mod:`rephaze.metrics`: PSNR and SSIM.
- :mod:`rephaze.trainer`: Adam + cyclical learning rate loop, checkpoints.
- :mod:`rephaze.cli`: the ``rephaze`` command.
"""

from .errors import ConfigError, ContractError, NumericError, RephazeError, ShapeError, StateError
from .tensor import Tape, Tensor, backward
from .layers import BNParams, ConvParams
from .losses import LossWeights
from .network import ModelConfig, ModelParams, build_model, count_parameters, forward, load_model, save_model
from .reparam import FusionReport, reparameterize_model
from .metrics import psnr, ssim

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "NumericError",
    "RephazeError",
    "ShapeError",
    "StateError",
    "Tape",
    "Tensor",
    "backward",
    "BNParams",
    "ConvParams",
    "LossWeights",
    "ModelConfig",
    "ModelParams",
    "build_model",
    "count_parameters",
    "forward",
    "load_model",
    "save_model",
    "FusionReport",
    "reparameterize_model",
    "psnr",
    "ssim",
    "__version__",
]
