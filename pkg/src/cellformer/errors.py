"""Exception types shared across the package.

The CLI maps these onto exit codes: DataError subclasses exit with 2,
CheckFailure with 3, anything argparse-shaped with 1.
"""


class CellformerError(Exception):
    """Base class for all package errors."""


class DataError(CellformerError):
    """Malformed input data, schema, store or checkpoint files."""


class SchemaError(DataError):
    """Invalid schema descriptor or schema/data disagreement."""


class TemplateError(DataError):
    """Template source violates the one-placeholder grammar."""


class StoreError(DataError):
    """Malformed or incompatible embedding store file."""


class StoreMissError(StoreError):
    """A prompt text has no entry in the embedding store."""

    def __init__(self, text: str, context: str = ""):
        self.text = text
        where = f" ({context})" if context else ""
        super().__init__(f"embedding store miss for prompt {text!r}{where}")


class ShapeError(CellformerError):
    """Tensor operands have incompatible shapes."""


class CheckFailure(CellformerError):
    """A verification run (e.g. gradient check) did not meet its tolerance."""
