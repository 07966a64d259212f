"""Error taxonomy shared by every layer of the kernel.

Each error carries a stable ``code`` string so it can cross the wire and the
control/backend boundary without losing its identity.
"""
from __future__ import annotations


class KernelError(Exception):
    """Base class for all recoverable kernel errors."""

    code = "error"

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)
        self.message = message or self.code


class InvalidArgument(KernelError):
    code = "invalid_argument"


class InvalidHandle(KernelError):
    code = "invalid_handle"


class DoubleFree(InvalidHandle):
    code = "double_free"


class PoolExhausted(KernelError):
    code = "pool_exhausted"


class ImmutableTarget(KernelError):
    code = "immutable_target"


class RangeMismatch(KernelError):
    code = "range_mismatch"


class LengthMismatch(KernelError):
    code = "length_mismatch"


class NameTaken(KernelError):
    code = "name_taken"


class NameNotFound(KernelError):
    code = "name_not_found"


class UnknownTokenId(KernelError):
    code = "unknown_token_id"


class UnfilledEmbed(KernelError):
    code = "unfilled_embed"


class SlotOverflow(KernelError):
    code = "slot_overflow"


class MaskShapeMismatch(KernelError):
    code = "mask_shape_mismatch"


class PositionOrder(KernelError):
    code = "position_order"


class InvalidQueue(KernelError):
    code = "invalid_queue"


class UnknownModel(KernelError):
    code = "unknown_model"


class TraitMissing(KernelError):
    code = "trait_missing"


class UnknownProgram(KernelError):
    code = "unknown_program"


class LoadFailure(KernelError):
    code = "load_failure"


class ClientGone(KernelError):
    code = "client_gone"


class MailboxFull(KernelError):
    code = "mailbox_full"


class Denied(KernelError):
    code = "denied"


class NetworkError(KernelError):
    code = "network_error"


class Timeout(NetworkError):
    code = "timeout"


class FrameError(KernelError):
    code = "frame_error"


_BY_CODE = {}


def _index(cls):
    _BY_CODE[cls.code] = cls
    for sub in cls.__subclasses__():
        _index(sub)


_index(KernelError)


def from_code(code: str, message: str = "") -> KernelError:
    """Rebuild an error from its wire code; unknown codes map to KernelError."""
    cls = _BY_CODE.get(code, KernelError)
    err = cls(message)
    if cls is KernelError and code != "error":
        err.code = code
    return err
