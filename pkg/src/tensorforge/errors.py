"""Error taxonomy shared by every layer.

Each error carries a ``category`` string; the CLI prefixes messages with it.
"""


class TensorForgeError(Exception):
    category = "error"


class ShapeError(TensorForgeError, ValueError):
    category = "shape"


class BoundsError(ShapeError):
    category = "bounds"


class ArgumentError(TensorForgeError, ValueError):
    category = "argument"


class LabelError(ArgumentError):
    category = "label"


class InvalidHandleError(TensorForgeError):
    category = "invalid-handle"


class InvalidStreamError(InvalidHandleError):
    category = "invalid-stream"


class PoolIntegrityError(TensorForgeError):
    category = "pool-integrity"


class AllocationError(TensorForgeError, MemoryError):
    category = "allocation-failure"


class GraphError(TensorForgeError, RuntimeError):
    category = "graph"


class StateError(TensorForgeError, RuntimeError):
    category = "state"


class FormatError(TensorForgeError):
    category = "format"


class ConfigError(TensorForgeError):
    category = "config"


class IterationError(TensorForgeError, StopIteration):
    category = "iteration"
