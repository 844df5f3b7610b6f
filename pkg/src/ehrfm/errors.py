"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4. Everything else is a bug and propagates as exit 1.
"""


class ConfigError(ValueError):
    """Bad or inconsistent configuration (unknown keys, invalid grids, digests)."""


class DataError(ValueError):
    """Malformed or contract-violating input data (rows, schemas, empty cohorts)."""


class NumericError(ArithmeticError):
    """Numeric failure: divergent training, non-finite losses, singular solves."""
