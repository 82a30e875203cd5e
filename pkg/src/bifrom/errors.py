"""Exception hierarchy shared by every stage of the pipeline."""


class BifromError(Exception):
    """Base class for all package errors."""


class ValidationError(BifromError, ValueError):
    """Input violates a documented invariant."""


class DimensionMismatchError(ValidationError):
    pass


class CountMismatchError(ValidationError):
    pass


class InvariantViolationError(ValidationError):
    pass


class SnapshotFileError(BifromError, OSError):
    """A snapshot file is missing or unreadable."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = str(path)


class SnapshotParseError(BifromError):
    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = str(path)


class NumericalError(BifromError, ArithmeticError):
    """A numerical stage failed (divergence, singularity, non-convergence)."""


class DivergenceError(NumericalError):
    def __init__(self, step, message="non-finite state"):
        super().__init__(f"{message} at step {step}")
        self.step = step


class SingularJacobianError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    def __init__(self, iterations, residual):
        super().__init__(
            f"Newton did not converge in {iterations} iterations "
            f"(residual {residual:.3e})"
        )
        self.iterations = iterations
        self.residual = residual


class RankDeficiencyError(NumericalError):
    pass


class IllConditionedError(NumericalError):
    pass


class ExtrapolationError(ValidationError):
    pass


class ConfigError(BifromError):
    """The run configuration is malformed or inconsistent."""


class MissingPrerequisiteError(BifromError):
    """A stage was asked to run before the artifacts it reads exist."""
