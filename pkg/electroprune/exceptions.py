"""
Errors raised by electroprune.

The command-line interface maps these onto exit codes, so each family
of failure has its own base class.
"""


class ElectropruneError(Exception):
    """Base class for all electroprune errors."""


class ConfigurationError(ElectropruneError, ValueError):
    """An invalid training, schedule, or run configuration."""


class DimensionError(ElectropruneError, ValueError):
    """
    A tensor reached a layer with the wrong shape.

    Parameters
    ----------
    layer : str
       The name of the layer which rejected its input.
    message : str
       A description of the mismatch.
    """

    def __init__(self, layer, message):
        self.layer = layer
        super().__init__(f"{layer}: {message}")


class NumericOverflowError(ElectropruneError, FloatingPointError):
    """
    The loss or an activation became non-finite.

    Parameters
    ----------
    layer : str or None
       The first layer whose output was non-finite, if one could be found.
    message : str
       A description of the failure.
    hint : str, optional
       The likely cause, reported alongside the message.
    """

    def __init__(self, layer, message, hint=None):
        self.layer = layer
        self.hint = hint
        text = message if layer is None else f"{message} (first non-finite output at {layer})"
        if hint:
            text = f"{text}. {hint}"
        super().__init__(text)


class PruningError(ElectropruneError, ValueError):
    """A pruning ratio or plan cannot be applied to a model."""


class DependencyError(PruningError):
    """
    A consumer layer no longer matches the layer which feeds it.

    Parameters
    ----------
    producer : str
       The layer whose output channels were pruned.
    consumer : str
       The layer reading those channels.
    message : str
       A description of the mismatch.
    """

    def __init__(self, producer, consumer, message):
        self.producer = producer
        self.consumer = consumer
        super().__init__(f"{producer} -> {consumer}: {message}")


class SpeedupError(PruningError):
    """The pruned model has no FLOPs left to compare against."""


class DataError(ElectropruneError):
    """Base class for dataset parsing failures."""


class IdxMagicError(DataError, ValueError):
    """An IDX file did not start with the expected magic number."""


class IdxTruncatedError(DataError, ValueError):
    """An IDX file is shorter than its header declares."""


class IdxCountMismatchError(DataError, ValueError):
    """The image and label files disagree on the number of samples."""


class IdxDimensionError(DataError, ValueError):
    """An IDX image file does not hold 28x28 images."""


class CifarSizeError(DataError, ValueError):
    """A CIFAR-10 batch file does not have the published size."""


class DatasetNotFoundError(DataError, FileNotFoundError):
    """A dataset file or directory does not exist."""


class CheckpointError(DataError):
    """A checkpoint file is not a readable electroprune container."""
