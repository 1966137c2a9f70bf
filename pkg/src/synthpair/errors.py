"""Errors shared across modules."""


class DataError(ValueError):
    """Input data is empty, malformed or unusable."""
