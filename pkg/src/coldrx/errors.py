"""Exception types raised across the package.

Every error raised by coldrx derives from ColdrxError so callers can catch
one base class at the CLI boundary.
"""


class ColdrxError(Exception):
    """Base class for all coldrx errors."""


# -- knowledge assets ----------------------------------------------------

class ParseError(ColdrxError):
    """A knowledge or record file is malformed."""


class CycleError(ColdrxError):
    """The ontology parent relation contains a cycle."""


class OrphanError(ColdrxError):
    """An ontology node has no path to the declared root."""


class UnknownDrugError(ColdrxError):
    """A drug code is not a node of the ontology."""


class UnknownCodeError(ColdrxError):
    """A code does not resolve in the vocabulary."""


# -- data / sampling -----------------------------------------------------

class MissingYearError(ColdrxError):
    """A drug has no first-prescription year."""


class InsufficientPositivesError(ColdrxError):
    """Not enough records containing the drug to sample an episode."""


class InsufficientNegativesError(ColdrxError):
    """Not enough negative records remain after filtering."""


# -- model ---------------------------------------------------------------

class EmptyRecordError(ColdrxError):
    """A patient record has no disease or procedure codes."""


class EmptySupportError(ColdrxError):
    """A prototype was requested for an empty support set."""


class DimensionMismatchError(ColdrxError):
    """Tensor dimensions disagree with the configured sizes."""


class NonFiniteError(ColdrxError):
    """A scoring input or output is NaN or infinite."""


# -- training ------------------------------------------------------------

class NonFiniteLossError(ColdrxError):
    """An episode produced a NaN or infinite loss."""


class CheckpointError(ColdrxError):
    """A checkpoint could not be written or read back."""


# -- evaluation ----------------------------------------------------------

class DegenerateLabelsError(ColdrxError):
    """A metric needs both positive and negative labels."""


class KTooLargeError(ColdrxError):
    """k exceeds the number of scored records."""


class InsufficientEpisodesError(ColdrxError):
    """Aggregation needs at least two episodes."""


# -- synthetic generation ------------------------------------------------

class GeneratorSpecError(ColdrxError):
    """A generator parameter is out of range or inconsistent."""


# -- cli -----------------------------------------------------------------

class ConfigError(ColdrxError):
    """A run configuration value is missing or invalid."""
