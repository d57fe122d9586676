"""Exception types shared across the codec."""


class CodecError(Exception):
    """Base class for all codec errors."""


class FormatError(CodecError):
    """Malformed or truncated binary input.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ShapeError(CodecError):
    """Tensor shape or channel count does not match a layer contract."""

    def __init__(self, message: str, layer_index: int | None = None):
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)
        self.layer_index = layer_index


class SupportError(CodecError):
    """A latent value lies outside its channel's symbol support."""


class DecodeError(CodecError):
    """The rANS stream is corrupted or inconsistent with the model."""


class ModelMismatchError(CodecError):
    """The bitstream was produced with a different model pair."""
