"""Exception types shared across the pipeline."""


class DataError(Exception):
    """An input file or dataset is missing, unreadable, or malformed."""


class InvariantViolation(Exception):
    """An internal consistency check failed; indicates a bug, not bad input."""
