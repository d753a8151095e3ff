"""Exception taxonomy shared across the package.

Every error a caller is expected to catch derives from StyleforgeError so the
CLI can report failures uniformly.  Conditions that do not abort processing
(runaway synthesis) are warnings instead.
"""


class StyleforgeError(Exception):
    """Base class for all package errors."""


class InvalidInput(StyleforgeError, ValueError):
    """An argument violates a documented precondition."""


class InvalidConfig(StyleforgeError, ValueError):
    """A configuration value is malformed or inconsistent."""


class ManifestError(StyleforgeError):
    """A manifest record violates an invariant; the message names the record."""


class PoolError(StyleforgeError):
    """A converted item offered for pooling does not carry the target speaker."""


class UndefinedSpeakerMean(StyleforgeError):
    """A speaker has no voiced frames in its training split, so no f0 mean."""


class MissingPhone(StyleforgeError):
    """A phone in the inventory never occurs in the training data."""


class AlignmentInfeasible(StyleforgeError):
    """An utterance is too short to traverse its mandatory state chain."""


class InvalidBatch(StyleforgeError, ValueError):
    """A speaker-embedding batch lacks the required speakers-by-utterances shape."""


class NormZero(StyleforgeError):
    """A vector mean collapsed to the zero vector and cannot be normalized."""


class DataError(StyleforgeError):
    """Required features are missing; the message lists the utterances."""


class InsufficientData(StyleforgeError):
    """Too few ratings to form the requested statistic."""


class DegenerateGap(StyleforgeError):
    """Gap-closure anchors coincide; the relative position is undefined."""


class MalformedScreen(StyleforgeError):
    """A rating screen does not cover every competing system exactly once."""


class DegenerateInput(StyleforgeError):
    """Fewer distinct points than a projection or clustering needs."""


class ReportError(StyleforgeError):
    """Report generation is missing one of its inputs."""


class FeatureFileError(StyleforgeError):
    """A feature file is truncated or not in the expected binary format."""


class StageError(StyleforgeError):
    """A pipeline stage failed; the message names the stage and cause.

    Partial outputs are left in place for inspection.
    """


class PipelineLocked(StyleforgeError):
    """Another pipeline instance is using the same output directory."""


class SynthesisRunaway(UserWarning):
    """Free-running decoding hit the length cap; audio is still returned."""
