class ConfigError(ValueError):
    """Invalid workload, simulator or harness configuration."""


class AdmissionError(RuntimeError):
    """A token had to be loaded but every leaf in the cache was pinned."""


class ConsistencyError(RuntimeError):
    """Internal state diverged from what the model guarantees."""
