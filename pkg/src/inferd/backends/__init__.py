"""Model backends: the inference layer."""
from .base import (
    ALL_TRAITS,
    BOS,
    EOS,
    VOCAB_SIZE,
    Arena,
    Backend,
    ByteTokenizer,
    Distribution,
    ModelDescriptor,
    OP_TRAIT,
    trait_closure,
)
from .host import BackendChannel, BackendHost, InProcessChannel, SubprocessChannel, build_backends
from .mock import MockHashModel
from .transformer import ToyTransformer

__all__ = [
    "ALL_TRAITS",
    "BOS",
    "EOS",
    "VOCAB_SIZE",
    "Arena",
    "Backend",
    "ByteTokenizer",
    "Distribution",
    "ModelDescriptor",
    "OP_TRAIT",
    "trait_closure",
    "BackendChannel",
    "BackendHost",
    "InProcessChannel",
    "SubprocessChannel",
    "build_backends",
    "MockHashModel",
    "ToyTransformer",
]
