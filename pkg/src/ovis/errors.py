"""Shared exception hierarchy.

Split along the CLI's exit-code contract: usage errors (bad invocation),
data errors (bad or inconsistent input files/values), runtime errors
(everything else).
"""


class OvisError(Exception):
    """Base class for all engine errors."""


class UsageError(OvisError):
    """Invalid invocation: bad flags, empty query strings, bad parameters."""


class DataError(OvisError):
    """Invalid or inconsistent data: corrupt files, mismatched counts."""
