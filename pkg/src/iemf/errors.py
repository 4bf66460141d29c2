"""Exception types shared across the package."""


class DataError(ValueError):
    """Malformed, inconsistent or stale input data."""


class StaleCacheError(DataError):
    """A persisted similarity file no longer matches its inputs."""


class DivergenceError(ArithmeticError):
    """Training produced non-finite latent factors."""

    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"non-finite latent factors after epoch {epoch}")
