"""Exception hierarchy for the serst toolkit.

Input errors are problems with what the operator handed us (files, configs,
captions). Contract errors are violated preconditions inside the library.
The CLI maps the first family to exit code 1 and the second to exit code 2.
"""


class SerstError(Exception):
    """Base class for every error raised by this package."""


# ======================================
# INPUT ERRORS (exit code 1)
# ======================================

class InputError(SerstError):
    """Bad audio, caption or file supplied by the caller."""


class ConfigError(InputError):
    """Invalid configuration value or combination."""


class ParseError(InputError):
    """Malformed line in a JSON-lines file."""

    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class SchemaError(InputError):
    """Record parsed but a field is missing or violates its invariant."""

    def __init__(self, field, message, line_no=None):
        where = f"line {line_no}: " if line_no is not None else ""
        super().__init__(f"{where}field '{field}': {message}")
        self.field = field
        self.line_no = line_no


class DatasetError(InputError):
    """Dataset cannot be built or sampled."""


class MissingPrerequisiteError(InputError):
    """A checkpoint or built artifact a command depends on is absent."""

    def __init__(self, path, hint):
        super().__init__(f"missing {path}: {hint}")
        self.path = path
        self.hint = hint


# ======================================
# INTERNAL ERRORS (exit code 2)
# ======================================

class ContractError(SerstError):
    """A function precondition was violated."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class NumericError(SerstError):
    """Non-finite values or a matrix outside the accepted domain."""


class UndefinedSimilarityError(SerstError):
    """Cosine similarity requested for a zero-norm input."""
