"""Exception hierarchy shared across the pipeline."""


class TgcnnError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(TgcnnError):
    """Invalid configuration value or combination."""


class DataError(TgcnnError):
    """Malformed or inconsistent input data (CSV rows, cohort constraints)."""


class GraphBuildError(TgcnnError):
    """A patient history cannot be turned into a temporal-graph tensor."""


class DiffEngineError(TgcnnError):
    """Internal differentiation-engine failure (cycles, shape mismatches)."""


class TrainingError(TgcnnError):
    """Training aborted (non-finite loss, empty batch)."""


class MetricsError(TgcnnError):
    """A metric is undefined for the given predictions."""
