"""Exception hierarchy shared by the pipeline stages."""


class SessionIRLError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(SessionIRLError):
    """Shapes, dimensions or parameters do not fit together."""


class UnsupportedActionError(SessionIRLError):
    """An action was requested in a state where it is not defined."""


class EncodingError(SessionIRLError):
    """A situation component lies outside the schema cardinalities."""


class ParseError(SessionIRLError):
    """A log could not be read at all (missing file, unreadable encoding)."""


class SegmentationError(SessionIRLError):
    """A session attribute value has no group in the partition."""


class EstimationError(SessionIRLError):
    """Empirical quantities requested from an empty session set."""


class ModelingError(SessionIRLError):
    """The MDP cannot produce the observed data (dead ends, unsupported pairs)."""


class EnumerationTooLarge(SessionIRLError):
    """Exhaustive trajectory enumeration would exceed the size guard."""


class ComparisonError(SessionIRLError):
    """Weights files cannot be laid side by side."""


class ScoringError(SessionIRLError):
    """Recovered and true weights are incompatible."""
