"""Error taxonomy shared across the package.

Every failure mode that a caller can trigger has a dedicated class so that
tests and the CLI can distinguish configuration mistakes from numerical
problems and from communicator misuse.
"""


class BranchparError(Exception):
    """Base class for all package errors."""


class DimensionError(BranchparError):
    """Operand shapes are incompatible. The message carries both shapes."""


class ContractError(BranchparError):
    """An API precondition was violated (e.g. backward from a non-scalar)."""


class NumericsError(BranchparError):
    """A NaN or Inf appeared in a tensor value."""


class ConfigError(BranchparError):
    """A run configuration is malformed or inconsistent."""


class CollectiveError(BranchparError):
    """A collective call was malformed or inconsistent across a group."""


class WorldError(BranchparError):
    """A rank failed or the world was misused."""


class ComparisonError(BranchparError):
    """Two run results cannot be compared (e.g. keyset mismatch)."""
