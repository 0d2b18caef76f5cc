"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes do not agree with the model or with each other."""


class DataError(ValueError):
    """Input data is non-finite or otherwise unusable."""


class EmptyProblemError(ValueError):
    """A fit was requested with no data."""


class DegeneracyError(ValueError):
    """A geometric configuration is too degenerate for the requested operation."""


class ContainerFormatError(ValueError):
    """A tensor container is malformed. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None, array=None):
        self.offset = offset
        self.array = array
        where = []
        if array is not None:
            where.append(f"array {array!r}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        super().__init__(message + (f" ({', '.join(where)})" if where else ""))


class ManifestError(ValueError):
    """Manifest validation failed. ``violations`` lists every problem found."""

    def __init__(self, violations):
        self.violations = list(violations)
        lines = "\n".join(f"  - {v}" for v in self.violations)
        super().__init__(f"{len(self.violations)} manifest violation(s):\n{lines}")


class RefineError(RuntimeError):
    """Dataset refinement failed on too many frames."""
