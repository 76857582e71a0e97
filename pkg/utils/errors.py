"""
Error types raised by the reconstruction stages.

Each error carries a short machine-readable ``code``. Input problems also derive
from ValueError and computational failures from RuntimeError, so callers can keep
catching the builtin families.
"""

from typing import Any


class ReconstructionError(Exception):
    """Base class for all errors raised by this package."""

    code = "E_INTERNAL"


class InvalidDepthError(ReconstructionError, ValueError):
    code = "E_INVALID_DEPTH"


class InvalidIntrinsicsError(ReconstructionError, ValueError):
    code = "E_INVALID_INTRINSICS"


class GradientUndefinedError(ReconstructionError, ValueError):
    code = "E_GRADIENT_UNDEFINED"


class EmptyCloudError(ReconstructionError, ValueError):
    code = "E_EMPTY_CLOUD"


class ArityError(ReconstructionError, ValueError):
    code = "E_ARITY"


class RankDeficiencyError(ReconstructionError, ValueError):
    code = "E_RANK_DEFICIENT"


class OutOfDomainError(ReconstructionError, ValueError):
    code = "E_OUT_OF_DOMAIN"


class EmptyMeshError(ReconstructionError, ValueError):
    code = "E_EMPTY_MESH"


class ConfigError(ReconstructionError, ValueError):
    code = "E_CONFIG"


class ParseError(ReconstructionError, ValueError):
    """Malformed input file; names the file and the offending line."""

    code = "E_PARSE"

    def __init__(self, path: str, message: str, line: int | None = None):
        self.path = str(path)
        self.line = line
        location = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{location}: {message}")


class AlignmentFailureError(ReconstructionError, RuntimeError):
    code = "E_ALIGNMENT_FAILED"

    def __init__(self, message: str, view: int | None = None):
        self.view = view
        super().__init__(message if view is None else f"view {view}: {message}")


class IcpDivergenceError(ReconstructionError, RuntimeError):
    code = "E_ICP_DIVERGED"

    def __init__(self, message: str, last_motion: Any = None):
        self.last_motion = last_motion
        super().__init__(message)


class ConvergenceError(ReconstructionError, RuntimeError):
    code = "E_NOT_CONVERGED"

    def __init__(self, message: str, residual: float, iterations: int):
        self.residual = residual
        self.iterations = iterations
        super().__init__(f"{message} (relative residual {residual:.3e} after {iterations} iterations)")


class NoPlaneError(ReconstructionError, RuntimeError):
    code = "E_NO_PLANE"


class StageError(ReconstructionError, RuntimeError):
    """A pipeline stage failed; wraps the underlying error."""

    code = "E_STAGE"

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        self.code = getattr(cause, "code", StageError.code)
        super().__init__(f"{stage}: {cause}")
