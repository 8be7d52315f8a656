"""Exception hierarchy shared by every dgtl module."""


class DGTLError(Exception):
    """Base class for all dgtl errors."""


class ConfigError(DGTLError, ValueError):
    pass


class DataError(DGTLError, ValueError):
    pass


class DomainError(DGTLError, ValueError):
    pass


class ShapeError(DGTLError, ValueError):
    pass


class StateError(DGTLError, RuntimeError):
    pass


class RangeError(DGTLError, IndexError):
    pass


class ProtocolError(DGTLError, ValueError):
    pass


class NumericalError(DGTLError, ArithmeticError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ParseError(DGTLError, ValueError):
    def __init__(self, message, row=None, column=None):
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column}")
        if loc:
            message = f"{message} ({', '.join(loc)})"
        super().__init__(message)
        self.row = row
        self.column = column
