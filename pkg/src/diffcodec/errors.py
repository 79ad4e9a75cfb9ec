"""Exception hierarchy shared by all codec components."""


class CodecError(Exception):
    """Base class for all diffcodec errors."""


class RejectedInputError(CodecError):
    """Input violates a documented precondition (bad shape, range, NaN...)."""


class ConfigError(CodecError):
    """Invalid or inconsistent configuration."""


class StreamExhaustedError(CodecError):
    """Bitstream ended (or was corrupted) before decoding finished.

    ``frame_index`` identifies the frame being decoded when the stream ran
    out; ``frames`` optionally carries the frames decoded so far.
    """

    def __init__(self, message, frame_index=None, frames=None):
        super().__init__(message)
        self.frame_index = frame_index
        self.frames = frames


class InvariantError(CodecError):
    """An internal invariant was violated (controller/coder bug)."""
