from .tensor import (Tensor, as_tensor, concat, segment_max, segment_mean,
                     segment_sum, weighted_gather, weighted_scatter)
from .modules import (Adam, Linear, MLP, Module, ResidualMLP,
                      load_checkpoint, save_checkpoint)
from .losses import LossWeights, bce_with_logits, gaussian_kl, l1_loss

__all__ = [
    "Tensor", "as_tensor", "concat", "segment_max", "segment_mean",
    "segment_sum", "weighted_gather", "weighted_scatter",
    "Adam", "Linear", "MLP", "Module", "ResidualMLP",
    "load_checkpoint", "save_checkpoint",
    "LossWeights", "bce_with_logits", "gaussian_kl", "l1_loss",
]
