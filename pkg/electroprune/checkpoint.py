"""
Read and write model checkpoints.

A checkpoint is an HDF5 file with the layout::

    /               attrs: format, version, architecture, config, config digest
    /parameters/    one dataset per trainable array
    /buffers/       batch-norm running statistics
    /optimizer/     momentum buffers

Arrays are always stored at 64-bit precision.
"""

import contextlib
import logging
import os

import h5py
import numpy as np
import yaml

from .exceptions import CheckpointError, DatasetNotFoundError
from .network import Model

logger = logging.getLogger("electroprune")

FORMAT = "electroprune-checkpoint"
VERSION = 1


class Checkpoint(contextlib.AbstractContextManager):
    """
    An electroprune checkpoint file.

    Parameters
    ----------
    filename : str
       The path to the checkpoint.
    mode : str, optional
       ``"r"`` to read (the default) or ``"w"`` to write.
    """

    def __init__(self, filename, mode="r"):
        self.filename = filename
        self.mode = mode

    def __enter__(self):
        if self.mode == "r" and not os.path.exists(self.filename):
            raise DatasetNotFoundError(f"The checkpoint {self.filename} does not exist.")
        if self.mode == "w":
            directory = os.path.dirname(self.filename)
            if directory:
                os.makedirs(directory, exist_ok=True)
        try:
            self.file = h5py.File(self.filename, self.mode)
        except OSError as error:
            raise CheckpointError(f"{self.filename} is not an HDF5 file: {error}") from None
        if self.mode == "r":
            self._check_format()
        return self

    def __exit__(self, exc_type, exc_value, traceback):
        self.file.close()

    def _check_format(self):
        attrs = self.file.attrs
        if attrs.get("format") != FORMAT:
            raise CheckpointError(f"{self.filename} is not an electroprune checkpoint.")
        if int(attrs.get("version", -1)) > VERSION:
            raise CheckpointError(
                f"{self.filename} has version {attrs['version']}; "
                f"this release reads up to version {VERSION}."
            )

    def write(self, model, config=None, metadata=None):
        """
        Store a model, its optimizer state, and the configuration which produced it.

        Parameters
        ----------
        model : `electroprune.network.Model`
        config : `electroprune.trainer.TrainConfig`, optional
        metadata : dict, optional
           Extra YAML-serialisable information, stored as an attribute.
        """
        attrs = self.file.attrs
        attrs["format"] = FORMAT
        attrs["version"] = VERSION
        attrs["architecture"] = yaml.safe_dump(model.describe(), sort_keys=False)
        if config is not None:
            attrs["config"] = yaml.safe_dump(config.to_settings(), sort_keys=False)
            attrs["config digest"] = config.digest()
        attrs["metadata"] = yaml.safe_dump(metadata or {}, sort_keys=False)
        for group, arrays in (("parameters", model.parameters()),
                              ("buffers", model.buffers()),
                              ("optimizer", model.velocity)):
            handle = self.file.create_group(group)
            for name, value in arrays.items():
                handle.create_dataset(name, data=np.asarray(value, dtype=np.float64))

    def architecture(self):
        return yaml.safe_load(self.file.attrs["architecture"])

    def config_settings(self):
        """The stored training settings, or None."""
        if "config" not in self.file.attrs:
            return None
        return yaml.safe_load(self.file.attrs["config"])

    @property
    def config_digest(self):
        return self.file.attrs.get("config digest")

    def metadata(self):
        return yaml.safe_load(self.file.attrs.get("metadata", "{}")) or {}

    def _arrays(self, group):
        arrays = {}
        if group in self.file:
            for name, dataset in self.file[group].items():
                arrays[name] = np.array(dataset)
        return arrays

    def model(self, dtype=np.float64):
        """Rebuild the stored model with its weights and optimizer state."""
        model = Model.from_description(self.architecture(), dtype=dtype)
        arrays = self._arrays("parameters")
        arrays.update(self._arrays("buffers"))
        model.load_arrays(arrays)
        model.velocity = {name: value.astype(dtype)
                          for name, value in self._arrays("optimizer").items()}
        return model


def save_checkpoint(filename, model, config=None, metadata=None):
    """Write ``model`` to ``filename``."""
    with Checkpoint(filename, mode="w") as checkpoint:
        checkpoint.write(model, config=config, metadata=metadata)
    logger.info(f"Checkpoint written to {filename}")
    return filename


def load_checkpoint(filename, dtype=np.float64):
    """
    Read a checkpoint.

    Returns
    -------
    model : `electroprune.network.Model`
    settings : dict or None
       The training settings stored alongside the model.
    """
    with Checkpoint(filename) as checkpoint:
        return checkpoint.model(dtype=dtype), checkpoint.config_settings()
