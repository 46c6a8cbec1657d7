"""Exception hierarchy shared across the package.

Each class carries the CLI exit code it maps to (0 ok, 2 config/input,
3 numeric divergence, 4 integrity).
"""


class RefvidError(Exception):
    exit_code = 1


class ConfigError(RefvidError, ValueError):
    exit_code = 2


class DimensionError(RefvidError, ValueError):
    exit_code = 2


class ContractError(RefvidError, ValueError):
    exit_code = 2


class CapacityError(RefvidError, ValueError):
    exit_code = 2


class ResizeRequiredError(DimensionError):
    pass


class EncodingError(RefvidError, ValueError):
    exit_code = 2


class ExtractionError(RefvidError, ValueError):
    exit_code = 2


class ManifestError(RefvidError, ValueError):
    exit_code = 2


class NumericError(RefvidError, FloatingPointError):
    exit_code = 3


class DivergenceError(NumericError):
    exit_code = 3


class IntegrityError(RefvidError):
    exit_code = 4
