class ConfigError(ValueError):
    """Invalid configuration (CLI exit code 2)."""


class ProjectionError(RuntimeError):
    pass


class TrainingDivergence(RuntimeError):
    def __init__(self, step: str, iteration: int, value: float):
        super().__init__(f"non-finite loss {value} in step {step!r} at iteration {iteration}")
        self.step = step
        self.iteration = iteration


class StageOrderError(RuntimeError):
    pass
