"""Exception types raised by the solver stack."""


class PilmError(Exception):
    """Base class for all package errors."""


class EvaluationError(PilmError, ArithmeticError):
    """A residual or Jacobian row could not be evaluated (degenerate geometry)."""

    def __init__(self, message, index=None, iteration=None):
        self.index = index
        self.iteration = iteration
        parts = [message]
        if index is not None:
            parts.append(f"measurement {index}")
        if iteration is not None:
            parts.append(f"outer iteration {iteration}")
        super().__init__(" | ".join(parts))


class PartitionError(PilmError, ValueError):
    """Partition is inconsistent with the problem or the Jacobian."""


class NumericalError(PilmError, ArithmeticError):
    """Factorization failure or non-finite iterate inside a block solve."""

    def __init__(self, message, block=None):
        self.block = block
        if block is not None:
            message = f"{message} (block {block})"
        super().__init__(message)


class StallError(PilmError, RuntimeError):
    """Backtracking drove the step size below its floor."""

    def __init__(self, message, diagnostics=None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)


class UnavailableError(PilmError, LookupError):
    """Requested quantity needs data the problem does not carry."""
