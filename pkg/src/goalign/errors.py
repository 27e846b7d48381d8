"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class GoalignError(Exception):
    exit_code = 1


class DataError(GoalignError):
    """Malformed input data, manifests, or geometry."""

    exit_code = 3


class ManifestError(DataError):
    pass


class VersionError(ManifestError):
    pass


class PlacementError(DataError):
    """Objects could not be placed without overlap."""


class TruncationError(DataError):
    """A sentence span lies beyond the tokenizer's truncation point."""


class NumericError(GoalignError):
    """Non-finite values, zero-norm embeddings, failed gradient checks."""

    exit_code = 4
