"""Exception types shared across the toolkit.

Argument and shape violations raise plain ValueError; genuine I/O
failures (missing file, truncated payload) raise OSError. The classes
below cover structured-file problems that are neither.
"""


class FormatError(Exception):
    """File content does not match the expected on-disk format."""


class UnsupportedDatatypeError(FormatError):
    """File is well-formed but uses a datatype outside the supported set."""
