"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ``DataError`` -> 2, ``NumericalError`` -> 3.
"""


class CampError(Exception):
    """Base class for all errors raised by this package."""


class DataError(CampError, ValueError):
    """Bad input data: missing files, malformed images, invalid manifests."""


class PGMFormatError(DataError):
    def __init__(self, path, offset, message):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{self.path}: byte {offset}: {message}")


class NumericalError(CampError, ArithmeticError):
    """Non-finite losses or gradients, failed gradient checks."""
