"""Exception hierarchy shared by the whole package.

Two top-level families matter to callers: InputError for anything wrong with
user-supplied data or parameters (CLI exit code 1), NumericalError for
computations that went off the rails at runtime (CLI exit code 2).
"""


class QsmError(Exception):
    pass


class InputError(QsmError):
    """Bad arguments, malformed files, mismatched geometry."""


class MalformedHeaderError(InputError):
    """File header is not parseable or is missing required fields."""


class PayloadSizeError(InputError):
    """Payload byte count disagrees with the header dimensions."""


class NonFinitePayloadError(InputError):
    """Payload contains NaN or infinity."""


class NumericalError(QsmError):
    """NaN/inf produced mid-computation, or an iteration diverged."""
