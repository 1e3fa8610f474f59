"""Exception hierarchy for the toolkit.

Errors are grouped by the CLI exit code they map to: configuration and
usage problems (exit 2), oracle/protocol failures (exit 3), and data or
file problems (exit 4).
"""


class GaborSenseError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(GaborSenseError):
    """Invalid configuration value; message names the offending field."""


# -- noise synthesis ---------------------------------------------------------

class ZeroPoints(GaborSenseError):
    """The point-count formula produced zero points."""


class DegenerateField(GaborSenseError):
    """Field has no dynamic range and cannot be normalized."""


class NotNormalized(GaborSenseError):
    """Operation requires a normalized noise field."""


# -- shapes and data ---------------------------------------------------------

class ShapeMismatch(GaborSenseError):
    """Array shapes do not agree with the expected dimensions."""


class UnreadableFile(GaborSenseError):
    """A dataset or perturbation file could not be read."""


class DatasetEmpty(GaborSenseError):
    """Dataset contains no images."""


class EmptyDataset(DatasetEmpty):
    """Metric evaluation received an empty image set."""


class EmptyPerturbationSet(GaborSenseError):
    """Metric evaluation received an empty perturbation set."""


class EmptyList(GaborSenseError):
    """Statistic requested over an empty value list."""


class LengthMismatch(GaborSenseError):
    """Columns passed to a statistic have differing lengths."""


# -- oracles -----------------------------------------------------------------

class OracleFailure(GaborSenseError):
    """External oracle died, timed out, or violated the wire protocol."""


class SpawnFailure(OracleFailure):
    """External oracle process could not be started."""


class HandshakeTimeout(OracleFailure):
    """External oracle did not answer the meta request in time."""


class DescriptorMismatch(OracleFailure):
    """Oracle descriptor does not match the caller's expectations."""


# -- linear algebra ----------------------------------------------------------

class DimensionMismatch(GaborSenseError):
    """Vector length does not match the operator dimension."""


class InvalidLayer(GaborSenseError):
    """Unknown layer name for a Jacobian probe."""
