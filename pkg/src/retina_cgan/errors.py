class ConfigError(ValueError):
    """Invalid configuration value; message names the offending key."""


class DataError(RuntimeError):
    """Dataset missing, malformed, or misaligned."""


class PreprocessError(RuntimeError):
    """A preprocessing stage failed; ``stage`` names which one."""

    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class NumericalError(RuntimeError):
    """Non-finite loss or output during training."""
