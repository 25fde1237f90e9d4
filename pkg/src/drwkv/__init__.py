"""Decision-RWKV: return-conditioned RWKV policies, a Decision Transformer baseline,
a toy valve benchmark and experience-replay lifelong learning, on numpy."""
from .model import FAMILIES, DecisionModel, ModelConfig, Normalizer
from .numeric import Tape, Tensor, backward, make_rng

__all__ = ["FAMILIES", "DecisionModel", "ModelConfig", "Normalizer", "Tape", "Tensor",
           "backward", "make_rng"]
__version__ = "0.1.0"
