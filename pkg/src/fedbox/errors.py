"""Exception types shared across the package."""


class FedboxError(Exception):
    """Base class for all package-specific errors."""


class SchemaMismatchError(FedboxError, ValueError):
    """Two parameter sets disagree on names, shapes, or roles."""


class UnknownClientError(FedboxError, KeyError):
    """A client id is not present in the aggregation plan or schedule."""


class ZeroWeightError(FedboxError, ValueError):
    """All aggregation coefficients for the participating clients are zero."""


class WireFormatError(FedboxError, ValueError):
    """A byte frame is malformed: bad magic, bad version, truncation, overflow."""


class FederationError(FedboxError, RuntimeError):
    """A federated run aborted (client disconnect, protocol violation)."""


class DegenerateBoxError(FedboxError, ValueError):
    """A bounding box has non-positive width or height."""


class ConfigError(FedboxError, ValueError):
    """An experiment configuration is invalid."""
