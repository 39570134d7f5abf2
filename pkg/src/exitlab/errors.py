"""Error types shared across modules, mapped to CLI exit codes.

ConfigError -> exit 1 (usage / configuration), DataError -> exit 2
(dataset, checkpoint or input contents), OSError -> exit 3 (I/O).
"""


class ConfigError(ValueError):
    """Invalid configuration or incompatible options."""


class DataError(ValueError):
    """Malformed or out-of-contract input data."""
