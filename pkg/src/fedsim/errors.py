"""Exception types shared across the simulator."""


class FedSimError(Exception):
    pass


class ShapeError(FedSimError, ValueError):
    """Two volumes (or vectors) that must agree in shape do not."""


class DomainError(FedSimError, ValueError):
    """An argument lies outside the domain of an operation."""


class ConfigError(FedSimError, ValueError):
    """Invalid experiment configuration.

    ``key`` holds the dotted path of the offending entry when known.
    """

    def __init__(self, message: str, key: str | None = None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class NumericError(FedSimError, ArithmeticError):
    """Non-finite values appeared in parameters or losses."""


class IncompleteTableError(FedSimError, ValueError):
    """A rank table is missing cells; ``missing`` lists them."""

    def __init__(self, missing):
        self.missing = list(missing)
        preview = ", ".join(map(str, self.missing[:5]))
        more = "" if len(self.missing) <= 5 else f" (+{len(self.missing) - 5} more)"
        super().__init__(f"missing {len(self.missing)} cell(s): {preview}{more}")
