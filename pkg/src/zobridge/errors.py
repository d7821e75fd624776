"""Exception types shared across the package."""


class BackendError(RuntimeError):
    """An opaque-stage backing (in-process callable or worker process) failed,
    or a stage produced a non-finite output."""


class ContractViolation(RuntimeError):
    """An operation was invoked outside its contract, e.g. requesting an exact
    VJP from an opaque stage or perturbing a frozen parameter block."""


class DivergenceError(RuntimeError):
    """Training hit a non-finite loss or parameter state.

    Carries the last good checkpoint (block-name -> values dict) so callers
    can recover or persist it.
    """

    def __init__(self, message: str, checkpoint=None, epoch: int = -1):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.epoch = epoch


class DatasetFormatError(ValueError):
    """A dataset file failed to parse. `line_no` is 1-based."""

    def __init__(self, message: str, line_no: int):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no
