from .autograd import NotScalar, ShapeMismatch, Tensor, grad
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .mlp import (
    AutoencoderSpec,
    Mlp,
    MlpSpec,
    autoencoder_forward,
    init_autoencoder,
    init_mlp,
    mlp_forward,
    mlp_from_arrays,
    positional_encoding,
    scaled_softmax,
    tree_softmax,
)
from .optim import AdamState, adam_step

__all__ = [
    "AdamState", "AutoencoderSpec", "CheckpointError", "Mlp", "MlpSpec", "NotScalar",
    "ShapeMismatch", "Tensor", "adam_step", "autoencoder_forward", "grad",
    "init_autoencoder", "init_mlp", "load_checkpoint", "mlp_forward", "mlp_from_arrays",
    "positional_encoding", "save_checkpoint", "scaled_softmax", "tree_softmax",
]
