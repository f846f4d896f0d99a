"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, numerical failures
(TrainingDivergedError) -> 3. Everything else is a plain ValueError at the
point of misuse.
"""

from __future__ import annotations


class ConfigError(ValueError):
    """A config file or config object fails validation."""


class TrainingDivergedError(RuntimeError):
    """The training objective became non-finite; carries a diagnostic."""


class NonSeparableError(ValueError):
    """Max-margin direction requested for a non linearly separable set."""


class NoFlippedLabelsError(ValueError):
    """Memorization accuracy requested on a dataset with no flipped labels."""
