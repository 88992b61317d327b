class SlotconError(Exception):
    """Base class for errors that are reported as validation failures (exit code 1)."""


class DomainError(SlotconError, ValueError):
    pass


class DimensionError(SlotconError, ValueError):
    pass


class NumericError(SlotconError, ArithmeticError):
    pass


class ConfigError(SlotconError, ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"config key '{key}': {message}")
        self.key = key


class ParseError(SlotconError, ValueError):
    def __init__(self, source: str, location: str, message: str):
        super().__init__(f"{source}: {location}: {message}")
        self.source = source
        self.location = location


class GenerationError(SlotconError):
    pass
