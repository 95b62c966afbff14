"""Exception hierarchy shared across the pipeline.

The CLI maps these onto exit codes: ValidationError -> 2,
MissingArtifactError -> 3, NumericalError -> 4.
"""

from __future__ import annotations

__all__ = [
    "EntrySpillError",
    "ValidationError",
    "MissingArtifactError",
    "NumericalError",
]


class EntrySpillError(Exception):
    """Base class for all package errors."""


class ValidationError(EntrySpillError):
    """Invalid inputs, configuration, or contract violations."""


class MissingArtifactError(EntrySpillError):
    """A required input file or upstream artifact is absent."""


class NumericalError(EntrySpillError):
    """Degenerate or failed numerical computation."""
