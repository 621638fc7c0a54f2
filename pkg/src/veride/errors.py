"""Exception hierarchy shared across the toolkit."""


class VerideError(Exception):
    """Base class for all toolkit errors."""


class SchemaError(VerideError):
    """Input table is missing required columns or has a malformed header."""


class EmptyTableError(VerideError):
    """An operation received or produced a table with no usable rows."""


class ConfigError(VerideError):
    """Invalid configuration value or impossible parameter combination."""


class ConstantInputError(VerideError):
    """A correlation was requested on a constant vector."""


class UndefinedEffectError(VerideError):
    """Effect size undefined (zero pooled variance)."""


class NormalizationError(VerideError):
    """Feature normalization could not be fitted or applied."""


class MiningError(VerideError):
    """Triplet mining found no valid anchor-positive pair in the batch."""


class NumericFault(VerideError):
    """Non-finite value encountered during forward/backward computation."""


class TrainingFault(VerideError):
    """Training diverged (non-finite loss)."""


class MetricUndefinedError(VerideError):
    """A metric was requested on degenerate inputs (e.g. an empty class)."""


class CalibrationError(VerideError):
    """Score calibration impossible (e.g. s-norm cohort too small)."""


class ClosedSetViolation(VerideError):
    """A closed-set probe's identity is absent from the gallery."""


class PipelineError(VerideError):
    """A pipeline stage produced an unusable intermediate artifact."""
