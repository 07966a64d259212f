"""Generation helpers shared by builtins and sandboxed programs."""
from ..backends.base import BOS, EOS, VOCAB_SIZE
from .context import Context
from .sampling import GreedySampler, TopKSampler

# surface handed to uploaded programs as `lib`
GUEST_EXPORTS = {
    "Context": Context,
    "GreedySampler": GreedySampler,
    "TopKSampler": TopKSampler,
    "BOS": BOS,
    "EOS": EOS,
    "VOCAB_SIZE": VOCAB_SIZE,
}

__all__ = ["Context", "GreedySampler", "TopKSampler", "BOS", "EOS",
           "VOCAB_SIZE", "GUEST_EXPORTS"]
