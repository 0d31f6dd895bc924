"""Exception hierarchy shared across the package."""


class HystarError(Exception):
    pass


class ShapeError(HystarError, ValueError):
    pass


class DomainError(HystarError, ValueError):
    pass


class ContractError(HystarError, ValueError):
    pass


class NumericError(HystarError, ArithmeticError):
    pass


class ConfigError(HystarError, ValueError):
    pass


class FormatError(HystarError):
    """Malformed or corrupted on-disk artifact."""


class ChecksumError(FormatError):
    pass


class VersionError(FormatError):
    pass


class NumericAbort(NumericError):
    """Training hit a non-finite loss. ``dump_path`` points at the state dump, if one was written."""

    def __init__(self, message: str, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
