"""compo_errors - exception types for compo

Library modules raise these; compo.py catches them, reports them through
the debugger and turns them into an exit status.

Classes
-------
CompoError : Base class for every error raised by compo.
NumericsError : Bad shapes, non-finite values, empty attention context.
TokenError : Component packing / ID codebook problems.
RoutingError : Invalid routing request.
ConfigError : Unknown or malformed configuration key.
CheckpointError : Checkpoint manifest / blob / config mismatch.
DataError : Scene generation or dataset file problems.
SamplingError : Non-finite state during sampling, with the step index.
UsageError : Bad command line.
"""


class CompoError(Exception):
    pass


class NumericsError(CompoError):
    pass


class TokenError(CompoError):
    pass


class RoutingError(CompoError):
    pass


class ConfigError(CompoError):
    pass


class CheckpointError(CompoError):
    pass


class DataError(CompoError):
    pass


class SamplingError(CompoError):
    def __init__(self, message, step=None):
        super(SamplingError, self).__init__(message)
        self.step = step


class UsageError(CompoError):
    pass
