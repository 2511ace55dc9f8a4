"""Exception hierarchy shared across the package.

CLI exit codes: usage errors exit 1, ``DataError`` exits 2,
``DivergenceError`` exits 3.
"""


class AsrkitError(Exception):
    """Base class for package errors."""


class DataError(AsrkitError):
    """Invalid input data: bad audio, malformed manifests, shape mismatches."""


class DivergenceError(AsrkitError):
    """Training produced a non-finite loss or gradient."""
