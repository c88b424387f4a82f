"""Exception types shared across the package."""


class InputError(ValueError):
    """Caller supplied data with the wrong shape, range or content."""


class ConfigError(InputError):
    """Configuration failed validation; ``problems`` lists every violated field."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


class TrainingError(RuntimeError):
    def __init__(self, message, last_checkpoint=None):
        self.last_checkpoint = last_checkpoint
        if last_checkpoint is not None:
            message = f"{message} (last good checkpoint: {last_checkpoint})"
        super().__init__(message)


class OptimizationError(RuntimeError):
    def __init__(self, message, iteration):
        self.iteration = iteration
        super().__init__(f"{message} at iteration {iteration}")


class PersistenceError(OSError):
    pass
