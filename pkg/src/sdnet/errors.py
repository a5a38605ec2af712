class InvalidInputError(ValueError):
    """Input violates an operation's precondition."""


class GraphConstructionError(ValueError):
    """Tensors composed with incompatible shapes or channel counts."""


class VerificationError(RuntimeError):
    """Gradient verification could not be carried out (e.g. non-finite forward)."""


class CheckpointError(RuntimeError):
    """Checkpoint file is malformed, truncated or from another format version."""


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN/Inf loss."""
