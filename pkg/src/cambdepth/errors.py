"""Exception hierarchy shared by every module."""


class CambError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(CambError, ValueError):
    pass


class DomainError(CambError, ValueError):
    pass


class ParameterError(CambError, ValueError):
    pass


class ContractError(CambError, RuntimeError):
    pass


class EvaluationError(CambError, ValueError):
    pass


class FormatError(CambError, ValueError):
    """Malformed or unsupported file contents.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)


class ConfigError(CambError, ValueError):
    pass
