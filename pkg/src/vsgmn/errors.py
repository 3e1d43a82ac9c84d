"""Exception hierarchy shared by every module."""


class VsgmnError(Exception):
    """Base class for all library errors."""


class DimensionError(VsgmnError, ValueError):
    pass


class DegenerateRowError(VsgmnError, ValueError):
    pass


class ContractError(VsgmnError, ValueError):
    """A caller violated a documented precondition."""


class ConfigError(VsgmnError, ValueError):
    pass


class IngestionError(VsgmnError, OSError):
    """A required dataset file is missing or unreadable."""


class ParseError(VsgmnError, ValueError):
    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class ValidationError(VsgmnError, ValueError):
    def __init__(self, message, rows=None):
        if rows:
            shown = ", ".join(str(r) for r in rows[:20])
            more = f" (+{len(rows) - 20} more)" if len(rows) > 20 else ""
            message = f"{message}; offending rows: {shown}{more}"
        super().__init__(message)
        self.rows = list(rows or [])


class DatasetError(VsgmnError, ValueError):
    pass


class TrainingDivergenceError(VsgmnError, FloatingPointError):
    def __init__(self, term, value=float("nan")):
        super().__init__(f"loss term {term} is not finite ({value})")
        self.term = term
        self.value = value
