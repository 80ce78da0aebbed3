"""Exception hierarchy shared by every pseudoris module."""


class PseudoRISError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(PseudoRISError, ValueError):
    """Invalid argument supplied by the caller."""


class RegistrationError(PseudoRISError):
    pass


class BackendLookupError(PseudoRISError, LookupError):
    pass


class ShapeError(PseudoRISError, ValueError):
    pass


class ConfigurationError(PseudoRISError):
    pass


class CorruptDataError(PseudoRISError, ValueError):
    pass


class ContractError(PseudoRISError):
    """A backend or input violated its documented contract."""


class StateError(PseudoRISError):
    pass


class PlacementError(PseudoRISError):
    pass


class DecodingError(PseudoRISError):
    """Backend failure during generation, tagged with the decoding step."""

    def __init__(self, step: int, cause: BaseException):
        super().__init__(f"decoding failed at step {step}: {cause!r}")
        self.step = step
        self.cause = cause
