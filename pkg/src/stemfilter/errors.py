"""Exception types shared across the package.

The CLI maps these onto process exit codes: usage errors exit 1, data
and format errors exit 2, numerical failures exit 3.
"""


class UsageError(Exception):
    """Bad command-line arguments or unknown configuration keys."""


class FormatError(Exception):
    """Malformed or inconsistent file content."""


class NumericsError(Exception):
    """Non-finite values encountered where finite arithmetic is required."""
