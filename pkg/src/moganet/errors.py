"""Exception types shared across the package."""


class ShapeError(ValueError):
    """A tensor operation received operands with incompatible shapes.

    The message names the offending dimension so callers can report it.
    """


class AutodiffError(RuntimeError):
    """Misuse of the reverse-mode tape (non-scalar root, detached root,
    double backward without reset)."""


class FormatError(ValueError):
    """A checkpoint or dataset file violates its binary format contract."""
