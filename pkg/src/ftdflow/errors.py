"""Exception types shared across the package."""


class FtdError(Exception):
    """Base class for all errors raised by ftdflow."""


class ShapeMismatchError(FtdError, ValueError):
    def __init__(self, what: str, a, b):
        super().__init__(f"{what}: shape {tuple(a)} does not match shape {tuple(b)}")
        self.shapes = (tuple(a), tuple(b))


class DomainError(FtdError, ValueError):
    """An argument lies outside the region where an operation is defined."""


class IntegrationError(FtdError, RuntimeError):
    def __init__(self, step: int, t: float):
        super().__init__(f"non-finite state at Euler step {step} (t={t:.6g})")
        self.step = step
        self.t = t


class DivergenceError(FtdError, RuntimeError):
    def __init__(self, iteration: int, last_good: str | None = None):
        msg = f"non-finite loss at iteration {iteration}"
        if last_good:
            msg += f"; last good checkpoint: {last_good}"
        super().__init__(msg)
        self.iteration = iteration
        self.last_good = last_good


class FormatError(FtdError, ValueError):
    """A checkpoint, dataset or config file is malformed."""


class ConfigError(FtdError, ValueError):
    pass
