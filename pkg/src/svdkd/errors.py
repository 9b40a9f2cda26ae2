"""Exception hierarchy shared by every module."""


class SvdkdError(Exception):
    """Base class; the CLI maps any subclass to exit code 1."""


class FormatError(SvdkdError):
    pass


class DataError(SvdkdError):
    pass


class IoError(SvdkdError):
    pass


class SamplingError(SvdkdError):
    pass


class ArgumentError(SvdkdError, ValueError):
    pass


class NumericalError(SvdkdError):
    pass


class DegenerateSpectrumError(SvdkdError):
    pass


class MiningError(SvdkdError):
    pass


class EvalError(SvdkdError):
    pass
