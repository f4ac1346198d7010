"""Non-autoregressive seq2seq with a conditional normalizing-flow prior.

Subpackages: tensor (autodiff substrate), data, nets, flow, model,
training, decoding, metrics, bench, config, cli.
"""

from .backend import backend_name
from .tensor import Tensor, no_grad, precision, set_default_dtype

__all__ = ["Tensor", "no_grad", "precision", "set_default_dtype", "backend_name"]

__version__ = "0.1.0"
