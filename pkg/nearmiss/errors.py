class NearMissError(Exception):
    ''' Base class for every error raised by the nearmiss package. '''


class ConfigError(NearMissError):
    ''' Signifies an invalid configuration value or file (exit code 2). '''


class DataError(NearMissError):
    ''' Signifies malformed, missing or unusable input data (exit code 3). '''


class NumericError(NearMissError):
    ''' Signifies a numerical or convergence failure (exit code 4). '''


# process exit codes used by the command-line interface
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def exit_code_for(error: Exception) -> int:
    '''
    Map an exception to the command-line exit code of its category.

    :param error: The exception raised by a pipeline stage.
    '''

    if isinstance(error, ConfigError):
        return EXIT_CONFIG
    if isinstance(error, DataError):
        return EXIT_DATA
    if isinstance(error, NumericError):
        return EXIT_NUMERIC
    return 1
