"""Exception types shared across the simulator."""


class OgsimError(Exception):
    """Base class for all simulator errors."""


class ConfigurationError(OgsimError):
    """Invalid configuration value or combination (bad orbit, step, scenario)."""


class PreconditionError(OgsimError):
    """A documented operation precondition was violated."""


class ContractError(OgsimError):
    """An input broke a structural contract (e.g. a non-unitary optical element)."""


class UnsupportedWavelengthError(OgsimError):
    """Wavelength falls outside every accepted band."""


class ZenithSingularityError(OgsimError):
    """Field rotation is undefined at exactly 90 deg elevation."""


class LowConfidenceError(OgsimError):
    """Measurement too degenerate to be trusted (e.g. near-circular polarization)."""


class InsufficientDataError(OgsimError):
    """Not enough samples to run an estimator."""


class SchemaError(OgsimError):
    """Payload or scenario failed schema validation."""


class CommandFailedError(OgsimError):
    """Bus command was not acknowledged within the timeout (after retry)."""
