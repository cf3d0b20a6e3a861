"""Exception hierarchy. Everything the CLI maps to exit code 1 derives from ReproError."""

from __future__ import annotations


class ReproError(Exception):
    """Base class for domain errors."""


class ZeroNorm(ReproError):
    pass


class NotScalar(ReproError):
    pass


class ShapeMismatch(ReproError):
    pass


class CheckpointError(ReproError):
    pass


class BadLabel(ReproError):
    pass


class BadRange(ReproError):
    pass


class BadConcepts(ReproError):
    pass


class BadSpec(ReproError):
    pass


class BadDims(ReproError):
    pass


class BadTau(ReproError):
    pass


class IndivisibleBatch(ReproError):
    pass


class OffsetMismatch(ReproError):
    pass


class BadStep(ReproError):
    pass


class ConfigInvalid(ReproError):
    pass


class DuplicateLabels(ReproError):
    pass


class TooFewClasses(ReproError):
    pass


class LengthMismatch(ReproError):
    pass


class BadRepeatCount(ReproError):
    pass


class GroupTooSmall(ReproError):
    pass


class LedgerIOError(ReproError):
    pass
