"""Exception taxonomy for the codec.

Everything raised on purpose derives from CodecError so the CLI can map
failures to a single exit code; the subclasses exist so tests (and callers)
can pin down which contract was violated.
"""


class CodecError(Exception):
    """Base class for all intentional codec failures."""

    code = "codec"


class ShapeError(CodecError):
    """An array argument had the wrong rank, extent, or dtype."""

    code = "shape"


class ContractError(CodecError):
    """A value violated a documented precondition (range, ordering, ...)."""

    code = "contract"


class ProtocolError(CodecError):
    """Incremental decode steps were driven out of order."""

    code = "protocol"


class ParseError(CodecError):
    """A serialized artifact (clip, model, container) failed to parse."""

    code = "parse"


class DecodeError(CodecError):
    """An entropy payload was truncated, over-long, or inconsistent."""

    code = "decode"


class ConfigError(CodecError):
    """A configuration file or flag combination is invalid."""

    code = "config"


class ModelError(CodecError):
    """Model parameters are malformed or do not match the stream."""

    code = "model"


class TrainError(CodecError):
    """Training diverged or was fed unusable data."""

    code = "train"
