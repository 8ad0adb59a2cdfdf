"""Exception hierarchy shared by all pipeline stages."""


class PipelineError(Exception):
    """Base class for domain errors (CLI exit code 1)."""


class ParseError(PipelineError):
    """Malformed JSON or a record missing a required field."""


class ReferenceMismatchError(PipelineError):
    """A record points at an image or category that does not exist."""


class ValidationError(PipelineError, ValueError):
    """A value violates a type invariant."""


class DimensionError(PipelineError):
    """Class-count or category-id mismatch between two artifacts."""


class MergeError(PipelineError):
    """Pseudo-labels cannot be merged into the base dataset."""


class EvaluationError(PipelineError):
    """Evaluation inputs are unusable (e.g. no ground truth at all)."""


class FingerprintWarning(UserWarning):
    """A matrix is applied to a dataset other than the one it was built from."""
