"""Exception hierarchy; each class maps to a CLI exit code."""


class TBDMError(Exception):
    exit_code = 1


class ConfigError(TBDMError):
    exit_code = 2


class DataError(TBDMError):
    exit_code = 3


class NumericError(TBDMError):
    exit_code = 4
