"""Error taxonomy shared across the package.

The CLI maps these to exit codes: ConfigError -> 2, DataError -> 3,
DivergenceError -> 4.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(ValueError):
    """Malformed or contract-violating input data."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"Diverged at step {step}: loss={loss}")
        self.step = step
        self.loss = loss
