"""Exception types raised across the package."""


class InvalidBoxError(ValueError):
    """A box has a non-positive side or a non-finite field."""


class InvalidAnchorError(InvalidBoxError):
    """An anchor cannot be used for encoding or sampling."""


class ZeroAreaError(ValueError):
    """A polygon collapsed to zero area (e.g. collinear quad corners)."""


class ShapeError(ValueError):
    """Array or channel dimensions are incompatible."""


class TilingError(ValueError):
    """Invalid image or window geometry for a tile plan."""


class ParseError(ValueError):
    """Malformed record in an input file.

    ``line`` and ``column`` are 1-based; ``column`` counts whitespace-separated
    fields, which is what users see when they open a DOTA file.
    """

    def __init__(self, message, line=None, column=None, source=None):
        self.line = line
        self.column = column
        self.source = source
        where = []
        if source is not None:
            where.append(str(source))
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column}")
        prefix = ", ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)
