"""Exceptions raised by safe_explore.

Each error also derives from the closest builtin so callers that only know
about ``ValueError``/``IndexError`` keep working.
"""

from typing import List, Sequence


class SafeExploreError(Exception):
    """Base class for all library errors."""


class ParameterError(SafeExploreError, ValueError):
    """A parameter lies outside the domain where the operation is defined."""


class ArmIndexError(SafeExploreError, IndexError):
    """An arm index outside ``0..K-1``."""


class StateActionIndexError(SafeExploreError, IndexError):
    """A state or action index outside the MDP."""


class InvalidStateError(SafeExploreError, RuntimeError):
    """An inspector was stepped with an empty candidate set."""


class UndefinedRatioError(SafeExploreError, ZeroDivisionError):
    """The conservation ratio has an empty reference set."""


class DeadStateError(SafeExploreError, RuntimeError):
    """Every action at the current state is condemned by the barrier."""

    def __init__(self, state: int):
        super().__init__(f"no admissible action at state {state}")
        self.state = state


class BuildError(SafeExploreError, ValueError):
    """An environment builder received an unusable specification."""


class ConfigError(SafeExploreError, ValueError):
    """Experiment or command-line configuration problem."""


class MDPValidationError(SafeExploreError, ValueError):
    """A TabularMDP failed validation; ``violations`` lists every problem."""

    def __init__(self, violations: Sequence[object]):
        self.violations: List[object] = list(violations)
        preview = "; ".join(str(v) for v in self.violations[:5])
        more = f" (+{len(self.violations) - 5} more)" if len(self.violations) > 5 else ""
        super().__init__(f"invalid MDP: {preview}{more}")


class ReplicationError(SafeExploreError, RuntimeError):
    """Replication results could not be collected from the workers."""
