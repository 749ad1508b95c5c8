"""Typed errors shared across the package.

Invalid arguments raise the builtin ``ValueError`` (Python idiom). The classes
below cover the two failure modes that need to be distinguishable from bad
arguments: unreadable/inconsistent on-disk data and numerically diverged
training runs. The CLI maps them to distinct exit codes.
"""


class CorruptDataError(Exception):
    """A dataset blob or manifest is missing, truncated, or contains non-finite values."""


class TrainingDivergedError(Exception):
    """The training loss became NaN/Inf; the run was aborted."""
