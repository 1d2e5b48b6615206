"""In-network learning at desk scale.

J encoder nodes and one fusion node jointly train and jointly infer by
exchanging activation vectors forward and error slices backward, never raw
data; federated and split learning run on the same engine for
accuracy-versus-bandwidth comparison, and every exchanged byte is metered.
"""

__version__ = "0.1.0"

from .bandwidth import CostModel, fl_bits, inl_bits, sl_bits
from .losses import LossBreakdown, Prior, encode_reparam, inl_loss, log_loss, rate_term, relevance
from .nncore import Activation, DenseLayer, ForwardTrace, Network, backward, forward, sgd_step
from .protocol import Message, MessageKind, MessageLog, Quantizer, infer, meter, train_epoch
from .stack import EncoderNode, FusionNode, INLStack, build_stack

__all__ = [
    "Activation",
    "CostModel",
    "DenseLayer",
    "EncoderNode",
    "ForwardTrace",
    "FusionNode",
    "INLStack",
    "LossBreakdown",
    "Message",
    "MessageKind",
    "MessageLog",
    "Network",
    "Prior",
    "Quantizer",
    "backward",
    "build_stack",
    "encode_reparam",
    "fl_bits",
    "forward",
    "infer",
    "inl_bits",
    "inl_loss",
    "log_loss",
    "meter",
    "rate_term",
    "relevance",
    "sgd_step",
    "sl_bits",
    "train_epoch",
    "__version__",
]
