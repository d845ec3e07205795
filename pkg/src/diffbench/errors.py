"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Array sizes do not agree with what an operation requires."""


class SingularProjectionError(ArithmeticError):
    """Perspective division by a zero depth coordinate."""


class UnsupportedOperationError(TypeError):
    """An AD engine was asked to differentiate an operation it does not know."""

    def __init__(self, opcode: str, engine: str = "tape"):
        super().__init__(f"{engine}: unsupported operation {opcode!r}")
        self.opcode = opcode


class CompressionError(ValueError):
    """A seed matrix assigns two structural nonzeros of one row to the same column."""


class ResourceError(MemoryError):
    """A request would exceed a configured size guard."""


class GenerationError(RuntimeError):
    """Random instance generation could not satisfy its constraints."""


class RunTimeout(RuntimeError):
    """A single timed run exceeded the configured limit."""

    def __init__(self, elapsed: float, limit: float):
        super().__init__(f"single run took {elapsed:.3g} s, limit is {limit:.3g} s")
        self.elapsed = elapsed
        self.limit = limit


class AssemblyError(ValueError):
    """Sparse triplets repeat a (row, col) position or fall outside the matrix."""


class UsageError(ValueError):
    """Bad command-line or API usage, such as plotting an empty record set."""
