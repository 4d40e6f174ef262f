"""Parallel inexact Levenberg-Marquardt for nearly separable sparse least squares."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    EvaluationError, NumericalError, PartitionError, PilmError, StallError, UnavailableError,
)
from .gen import GenConfig, coordinate_error, generate  # noqa: E402
from .model import (  # noqa: E402
    Angle, Coordinate, Distance, PointLine, Problem, eval_F, eval_gradient, eval_J, eval_R,
    load_problem, save_problem,
)
from .outer import (  # noqa: E402
    DeltaSchedule, FullStep, LineSearch, Practical, SolverConfig, Termination, Theoretical,
    classical_lm_solve, pilm_solve,
)
from .partition import partition_variables  # noqa: E402

__all__ = [
    "PilmError", "EvaluationError", "NumericalError", "PartitionError", "StallError",
    "UnavailableError", "GenConfig", "generate", "coordinate_error", "Problem", "Distance",
    "Angle", "PointLine", "Coordinate", "eval_R", "eval_J", "eval_F", "eval_gradient",
    "load_problem", "save_problem", "SolverConfig", "Termination", "Theoretical", "Practical",
    "DeltaSchedule", "LineSearch", "FullStep", "pilm_solve", "classical_lm_solve",
    "partition_variables",
]
