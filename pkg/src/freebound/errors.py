"""Exception types shared across the solver stack."""


class DomainError(ValueError):
    """Input lies outside the domain of an operation."""


class EllipticityError(ValueError):
    """Covariance is not uniformly positive definite on the working domain."""


class VolterraConditionError(RuntimeError):
    """Discrete second-kind operator is too ill-conditioned to solve."""

    def __init__(self, message, condition=None, time_index=None):
        super().__init__(message)
        self.condition = condition
        self.time_index = time_index


class DivergenceError(RuntimeError):
    """Fixed-point iteration failed to contract."""

    def __init__(self, message, ratios=None):
        super().__init__(message)
        self.ratios = list(ratios or [])


class ClampError(RuntimeError):
    """Too many boundary nodes had to be clamped into (0, K]."""


class StageError(RuntimeError):
    """A sub-solver failed; ``stage`` names the step that raised."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


class ConfigError(ValueError):
    """Configuration failed validation."""


class NonConvergenceError(RuntimeError):
    """An inner iterative solver hit its sweep limit."""
