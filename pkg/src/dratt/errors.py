"""Exception types. The CLI maps each family onto an exit code."""


class DrattError(Exception):
    exit_code = 1


class ConfigError(DrattError, ValueError):
    exit_code = 2


class DataError(DrattError, ValueError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, message, row=None, column=None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
        self.row = row
        self.column = column


class NumericError(DrattError, ArithmeticError):
    exit_code = 4
