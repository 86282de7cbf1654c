"""Exception types shared across the package."""


class DimensionError(ValueError):
    """A tensor shape does not match what an operation expects."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class CheckpointError(RuntimeError):
    """A checkpoint does not match the canonical parameter registry.

    ``missing`` and ``unexpected`` hold the offending parameter names.
    """

    def __init__(self, message: str, missing=(), unexpected=()):
        self.missing = sorted(missing)
        self.unexpected = sorted(unexpected)
        parts = [message]
        if self.missing:
            parts.append("missing: " + ", ".join(self.missing))
        if self.unexpected:
            parts.append("unexpected: " + ", ".join(self.unexpected))
        super().__init__("; ".join(parts))


class RegistryError(RuntimeError):
    """Internal consistency failure in the parameter registry."""


class StageError(RuntimeError):
    """Wraps an error raised inside one pipeline stage, naming the stage."""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")


class NonFiniteLoss(RuntimeError):
    """Training produced a NaN/Inf loss."""

    def __init__(self, stage_id: int, step: int, value: float):
        self.stage_id = stage_id
        self.step = step
        super().__init__(f"non-finite loss {value} at stage {stage_id}, step {step}")
