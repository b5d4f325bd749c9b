"""
Exception hierarchy

Every error the CLI knows how to report derives from SpCoSLAMError and
carries the process exit code used by `spcoslam_cli.main`.
"""


class SpCoSLAMError(Exception):
    exit_code = 1


class ConfigError(SpCoSLAMError, ValueError):
    """Invalid or inconsistent configuration."""

    exit_code = 1


class DatasetError(SpCoSLAMError):
    """Missing, unreadable or schema-mismatched data and run artifacts."""

    exit_code = 2


class WorldGenerationError(DatasetError):
    """Place regions could not be laid out in free space."""


class NumericalError(SpCoSLAMError, ArithmeticError):
    """Numerical corruption that the filter cannot recover from."""

    exit_code = 3
