"""Exception types shared across the package, mapped to CLI exit codes."""


class ConfigError(Exception):
    """Bad, missing, or inconsistent configuration input (CLI exit code 2)."""


class CompatibilityError(Exception):
    """Model file / taxonomy / version mismatch (CLI exit code 3)."""


class DataError(Exception):
    """Malformed data file, e.g. a broken image or manifest (CLI exit code 4)."""
