"""Shared exception hierarchy.

Every error the library raises on bad input or bad data derives from
BugprobeError, so callers (and the CLI) can catch one type and report a
message instead of a traceback.
"""


class BugprobeError(Exception):
    """Base class for all library errors."""
