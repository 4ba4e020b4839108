"""Exception types raised across the package."""


class InvalidInputError(ValueError):
    pass


class InvalidParameterError(ValueError):
    pass


class EmptyRegionError(ValueError):
    """No scene point falls inside the requested sampling region."""


class ShapeError(ValueError):
    pass


class DegenerateRotationError(ValueError):
    pass


class ParseError(ValueError):
    """Malformed file; message carries the line number or byte offset."""

    def __init__(self, message, *, line=None, offset=None, path=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"offset {offset}")
        prefix = ":".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.line = line
        self.offset = offset
        self.path = path
