"""Exception hierarchy shared by every module."""


class LatmaskError(Exception):
    """Base class for all toolkit errors."""


class ContractError(LatmaskError, ValueError):
    """An operation was called outside its preconditions."""


class ConfigError(LatmaskError, ValueError):
    """Invalid or inconsistent configuration."""


class NumericalError(LatmaskError, ArithmeticError):
    """A non-finite value appeared during computation.

    ``node`` is the tape node id (when raised by the autodiff engine),
    ``step``/``epoch`` locate the failure inside an iterative procedure and
    ``state`` optionally carries the last finite state.
    """

    def __init__(self, message, node=None, step=None, epoch=None, state=None):
        super().__init__(message)
        self.node = node
        self.step = step
        self.epoch = epoch
        self.state = state


class FormatError(LatmaskError, IOError):
    """A file did not match its binary format."""


class ReportError(LatmaskError):
    """Evaluation inputs are incomplete (e.g. missing reference stems)."""
