"""Exception taxonomy shared across the package.

Grouped by how the CLI maps them to exit codes: configuration problems,
numeric failures during computation or training, and everything else
(contract violations raised at API boundaries).
"""

from __future__ import annotations


class ContractViolation(ValueError):
    """An argument breaks a documented precondition."""


class EmptySystemError(ContractViolation):
    """Operation requires at least one body."""


class NearPriorError(ContractViolation):
    """Clean-geometry prediction requested too close to the prior end."""


class StatisticalPowerError(ContractViolation):
    """Too few samples for the requested statistical check."""


class UndefinedCosineError(ContractViolation):
    """Cosine of an angle between two zero vectors is undefined."""


class ConfigError(ValueError):
    """Bad configuration file, unknown key, or malformed value."""

    def __init__(self, message: str, *, line: int | None = None, key: str | None = None):
        parts = []
        if line is not None:
            parts.append(f"line {line}")
        if key is not None:
            parts.append(f"key {key!r}")
        if parts:
            message = f"{message} ({', '.join(parts)})"
        super().__init__(message)
        self.line = line
        self.key = key


class SchemaError(ConfigError):
    """Checkpoint or config schema does not match expectations."""


class NumericFailure(RuntimeError):
    """Non-finite value produced where finite numbers are required."""


class SingularityError(NumericFailure):
    """Two bodies too close for the force law to be evaluated."""

    def __init__(self, i: int, j: int, distance: float, limit: float):
        super().__init__(
            f"pair ({i}, {j}) at distance {distance:.6g} is below the "
            f"allowed minimum {limit:.6g}"
        )
        self.pair = (i, j)
        self.distance = distance


class TrainingFailure(NumericFailure):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, *, epoch: int | None = None):
        if epoch is not None:
            message = f"{message} (epoch {epoch})"
        super().__init__(message)
        self.epoch = epoch


class DegenerateTiltError(NumericFailure):
    """Gibbs tilt has no remaining probability mass."""


class TheoryViolation(RuntimeError):
    """A numerical theorem check failed; used by the verification CLI."""
