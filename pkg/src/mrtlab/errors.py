"""Exception hierarchy. CLI exit codes hang off ``exit_code``."""


class MrtLabError(Exception):
    exit_code = 1


class ContractError(MrtLabError, ValueError):
    """A caller broke an operation's precondition."""

    exit_code = 3


class ValidationError(ContractError):
    """Bad configuration value; the message names the offending key."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class SpecError(ValidationError):
    pass


class InputError(ContractError):
    pass


class ParseError(ContractError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class NumericFault(MrtLabError, ArithmeticError):
    exit_code = 4

    def __init__(self, message: str, block: str | None = None):
        super().__init__(message)
        self.block = block


class OracleInvalidError(MrtLabError):
    exit_code = 4


class MissingArtifact(MrtLabError, FileNotFoundError):
    exit_code = 5


class MetricError(MrtLabError):
    exit_code = 3
