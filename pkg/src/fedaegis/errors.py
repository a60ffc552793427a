"""Shared exception types."""


class SchemaError(ValueError):
    """Structurally incompatible inputs (mismatched shapes, schemas, lengths)."""


class UsageError(ValueError):
    """A call that violates an operation's contract (bad arguments, missing data)."""
