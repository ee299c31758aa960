"""
Exception hierarchy for medattn.
The CLI maps each family to an exit code (see EXIT_CODES).
"""


class MedattnError(Exception):
    """Base class for every error raised on purpose by medattn"""


class ConfigError(MedattnError):
    """Bad command line, unknown config key or wrongly typed value"""


class DataError(MedattnError):
    """Input data is missing, malformed or filters down to nothing"""


class CheckpointError(DataError):
    """Checkpoint directory is incompatible, truncated or corrupted"""


class NumericError(MedattnError):
    """Non-finite values, failed gradient checks, invalid numeric domains"""


class ShapeError(NumericError, ValueError):
    """Tensor shapes do not agree for the requested operation"""


EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

EXIT_CODES = {
    ConfigError: EXIT_USAGE,
    DataError: EXIT_DATA,
    NumericError: EXIT_NUMERIC,
}


def exit_code_for(error: BaseException) -> int:
    """Exit code for an exception; anything unexpected counts as usage/internal"""
    for error_type, code in EXIT_CODES.items():
        if isinstance(error, error_type):
            return code
    return EXIT_USAGE
