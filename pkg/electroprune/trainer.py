"""
Training loops: electrostatic-force training, the unregularised
baseline, the L1-regularised comparison arm, and fine-tuning.

Each step adds the closed-form gradient of the regulariser to the data
gradient before the SGD update, so for the electrostatic regulariser

    w <- w - lr (dJ/dw + alpha_e k_e |q_1| / r^2 sign(w))

with the source charge and the distances taken from the current field.
"""

import dataclasses
import functools
import hashlib
import importlib.resources
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import yaml

from .checkpoint import load_checkpoint
from .electrostatics import (
    COULOMB_CONSTANT,
    R_MIN_FACTOR,
    force_fields,
    penalty_gradients,
)
from .exceptions import ConfigurationError, NumericOverflowError
from .network import backward, forward
from .optim import LrPolicy, lr_at, parse_policy, sgd_step
from .utils import read_table, write_table

logger = logging.getLogger("electroprune")

REGULARIZERS = ("none", "electrostatic", "l1")
SCHEDULES = ("per-step", "per-epoch")
METRIC_COLUMNS = ("epoch", "lr", "train_loss", "penalty", "test_top1", "seconds")


@functools.lru_cache(maxsize=None)
def load_presets():
    """The training and ratio presets shipped with the package."""
    text = importlib.resources.files("electroprune").joinpath("presets.yml").read_text()
    return yaml.safe_load(text)


def training_preset(name):
    """
    Look up a named training preset.

    Non-normative presets are returned with a warning.
    """
    presets = load_presets()["training"]
    if name not in presets:
        raise ConfigurationError(
            f"Unknown training preset {name}; expected one of {sorted(presets)}."
        )
    preset = dict(presets[name])
    if not preset.get("normative", True):
        logger.warning(f"The {name} preset is not normative: {preset.get('description')}")
    return preset


@dataclass(frozen=True)
class TrainConfig:
    """
    Everything which determines a training run.

    Parameters
    ----------
    alpha_e : float
       The electrostatic force rate weighting the penalty.
    k_e : float
       The proportionality constant of the force.
    epochs : int
    batch_size : int
    lr_policy : `electroprune.optim.LrPolicy`
       A policy, or anything `electroprune.optim.parse_policy` accepts.
    momentum, weight_decay : float
    seed : int
       Seeds batch order; model initialisation takes its own seed.
    regularizer : str
       ``none``, ``electrostatic`` or ``l1``.
    l1_rate : float
       The rate of the L1 regulariser.
    recompute_schedule : str
       ``per-step`` or ``per-epoch`` recomputation of the force fields.
    init : str
       ``random``, or the path of a checkpoint to start from.
    r_min_factor : float
       Scale of the distance clamp.
    dtype : str
       ``float64`` or ``float32``.
    """

    alpha_e: float = 0.0
    k_e: float = COULOMB_CONSTANT
    epochs: int = 20
    batch_size: int = 128
    lr_policy: LrPolicy = parse_policy("P1/10")
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    regularizer: str = "none"
    l1_rate: float = 1e-2
    recompute_schedule: str = "per-step"
    init: str = "random"
    r_min_factor: float = R_MIN_FACTOR
    dtype: str = "float64"

    #: Settings-file keys for each field.
    SETTINGS_KEYS = {
        "alpha_e": "alpha e",
        "k_e": "coulomb constant",
        "epochs": "epochs",
        "batch_size": "batch size",
        "lr_policy": "lr policy",
        "momentum": "momentum",
        "weight_decay": "weight decay",
        "seed": "seed",
        "regularizer": "regularizer",
        "l1_rate": "l1 rate",
        "recompute_schedule": "recompute",
        "init": "init",
        "r_min_factor": "r min factor",
        "dtype": "dtype",
    }

    def __post_init__(self):
        object.__setattr__(self, "lr_policy", parse_policy(self.lr_policy))
        if self.alpha_e < 0:
            raise ConfigurationError(f"alpha_e must be non-negative, got {self.alpha_e}.")
        if self.k_e <= 0:
            raise ConfigurationError(f"k_e must be positive, got {self.k_e}.")
        if self.epochs < 1:
            raise ConfigurationError(f"Training needs at least one epoch, got {self.epochs}.")
        if self.batch_size < 1:
            raise ConfigurationError(f"The batch size must be positive, got {self.batch_size}.")
        if self.regularizer not in REGULARIZERS:
            raise ConfigurationError(
                f"Unknown regularizer {self.regularizer}; expected one of {REGULARIZERS}."
            )
        if self.recompute_schedule not in SCHEDULES:
            raise ConfigurationError(
                f"Unknown recompute schedule {self.recompute_schedule}; "
                f"expected one of {SCHEDULES}."
            )
        if self.l1_rate < 0:
            raise ConfigurationError(f"l1_rate must be non-negative, got {self.l1_rate}.")
        if self.r_min_factor <= 0:
            raise ConfigurationError("The distance clamp factor must be positive.")
        if self.dtype not in ("float64", "float32"):
            raise ConfigurationError(f"dtype must be float64 or float32, got {self.dtype}.")

    @classmethod
    def from_settings(cls, settings, **overrides):
        """
        Build a configuration from the ``training`` section of a settings file.

        A ``preset`` key loads a named preset first; explicit keys and then
        ``overrides`` (keyword arguments named like the fields) win over it.
        Keys which are None are ignored.
        """
        settings = dict(settings or {})
        values = {}
        preset = settings.pop("preset", None)
        sources = [training_preset(preset)] if preset else []
        sources.append(settings)
        keys = {key: name for name, key in cls.SETTINGS_KEYS.items()}
        for source in sources:
            for key, value in source.items():
                if key in keys and value is not None:
                    values[keys[key]] = value
                elif key not in keys and key not in ("description", "normative", "finetune"):
                    logger.warning(f"Ignoring the unknown training setting {key!r}")
        values.update({name: value for name, value in overrides.items() if value is not None})
        for name in ("alpha_e", "k_e", "momentum", "weight_decay", "l1_rate", "r_min_factor"):
            if name in values:
                values[name] = float(values[name])
        for name in ("epochs", "batch_size", "seed"):
            if name in values:
                values[name] = int(values[name])
        return cls(**values)

    def to_settings(self):
        settings = {}
        for name, key in self.SETTINGS_KEYS.items():
            value = getattr(self, name)
            settings[key] = value.to_string() if isinstance(value, LrPolicy) else value
        return settings

    def digest(self):
        """The SHA-256 of the canonical settings dump."""
        text = yaml.safe_dump(self.to_settings(), sort_keys=True)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclass
class MetricLog:
    """
    One record per epoch with the columns of `METRIC_COLUMNS`.
    """

    records: list = field(default_factory=list)

    def append(self, **record):
        self.records.append({column: record[column] for column in METRIC_COLUMNS})

    def column(self, name):
        return np.array([record[name] for record in self.records])

    @property
    def last(self):
        return self.records[-1] if self.records else None

    def __len__(self):
        return len(self.records)

    def to_csv(self, filename):
        return write_table(filename, self.records, METRIC_COLUMNS)

    @classmethod
    def from_csv(cls, filename):
        return cls(records=read_table(filename))


def evaluate(model, dataset, batch_size=256):
    """Eval-mode top-1 accuracy of ``model`` on ``dataset``."""
    if len(dataset) == 0:
        return float("nan")
    correct = 0
    for images, labels in dataset.batches(batch_size):
        logits = forward(model, images, train=False)
        correct += int((logits.argmax(axis=1) == labels).sum())
    return correct / len(dataset)


def regularizer_gradients(model, config, fields=None):
    """
    Gradients of the configured regulariser, keyed by parameter name.
    """
    if config.regularizer == "electrostatic":
        if fields is None:
            fields = force_fields(model, config.k_e, config.r_min_factor)
        return penalty_gradients(model, fields, config.alpha_e, config.k_e)
    if config.regularizer == "l1":
        return {
            f"{layer.name}.weight": (config.l1_rate * np.sign(layer.weight)).astype(
                layer.weight.dtype)
            for layer in model.prunable_layers()
        }
    return {}


def regularizer_value(model, config):
    """
    The logged penalty: the force sum for ``electrostatic``,
    ``l1_rate * sum|w|`` for ``l1``, and 0 otherwise.
    """
    if config.regularizer == "electrostatic":
        fields = force_fields(model, config.k_e, config.r_min_factor)
        return float(sum(field.total() for field in fields.values()))
    if config.regularizer == "l1":
        return float(config.l1_rate * sum(
            np.abs(layer.weight).sum() for layer in model.prunable_layers()))
    return 0.0


def initial_model(config, factory):
    """
    The model training starts from: ``factory()`` for random
    initialisation, otherwise the checkpoint named by ``config.init``
    with its optimizer state reset.
    """
    if config.init in (None, "", "random"):
        return factory()
    model, _ = load_checkpoint(config.init, dtype=np.dtype(config.dtype))
    model.velocity = {}
    logger.info(f"Starting from the pretrained weights in {config.init}")
    return model


def train(model, dataset, config, test_dataset=None, log_path=None):
    """
    Train ``model`` in place with the configured regulariser.

    Parameters
    ----------
    model : `electroprune.network.Model`
    dataset : `electroprune.data.Dataset`
    config : `TrainConfig`
    test_dataset : `electroprune.data.Dataset`, optional
       Evaluated at the end of every epoch.
    log_path : str, optional
       Where to write the metric log after every epoch.

    Returns
    -------
    model : `electroprune.network.Model`
    log : `MetricLog`

    Raises
    ------
    NumericOverflowError
       If the loss stops being finite.
    """
    if len(dataset) == 0:
        raise ConfigurationError(f"The {dataset.split} set is empty.")
    if model.dtype != np.dtype(config.dtype):
        model.astype(config.dtype)
    if dataset.sample_shape[0] != model.blocks[0].in_channels:
        raise ConfigurationError(
            f"The dataset has {dataset.sample_shape[0]} channels but the model "
            f"takes {model.blocks[0].in_channels}."
        )
    if config.regularizer != "none" and not model.prunable_layers():
        raise ConfigurationError("The model has no prunable layers to regularise.")
    rng = np.random.default_rng(config.seed)
    log = MetricLog()
    step = 0
    fields = None
    logger.info(
        f"Training for {config.epochs} epochs with regularizer {config.regularizer}"
        + (f" (alpha_e={config.alpha_e:g})" if config.regularizer == "electrostatic" else "")
    )
    for epoch in range(config.epochs):
        lr = lr_at(config.lr_policy, epoch)
        started = time.perf_counter()
        losses = []
        if config.regularizer == "electrostatic" and config.recompute_schedule == "per-epoch":
            fields = force_fields(model, config.k_e, config.r_min_factor, timestamp=epoch)
        for images, labels in dataset.batches(config.batch_size, rng):
            try:
                loss, gradients = backward(model, images, labels)
            except NumericOverflowError as error:
                hint = "The loss diverged."
                if config.regularizer == "electrostatic":
                    hint += f" alpha_e={config.alpha_e:g} is the likely cause; try a smaller rate."
                raise NumericOverflowError(
                    error.layer, f"Non-finite loss at epoch {epoch}, step {step}", hint=hint
                ) from error
            if config.regularizer == "electrostatic" and config.recompute_schedule == "per-step":
                fields = force_fields(model, config.k_e, config.r_min_factor, timestamp=step)
            extra = regularizer_gradients(model, config, fields)
            gradients = {
                name: grad + extra[name] if name in extra else grad
                for name, grad in gradients.items()
            }
            sgd_step(model, gradients, lr, config.momentum, config.weight_decay)
            losses.append(loss)
            step += 1
        seconds = time.perf_counter() - started
        top1 = evaluate(model, test_dataset) if test_dataset is not None else float("nan")
        log.append(epoch=epoch, lr=lr, train_loss=float(np.mean(losses)),
                   penalty=regularizer_value(model, config), test_top1=top1,
                   seconds=seconds)
        logger.info(
            f"Epoch {epoch}: lr={lr:g} loss={log.last['train_loss']:.4f} "
            f"penalty={log.last['penalty']:.4g} top1={top1:.4f} ({seconds:.1f}s)"
        )
        if log_path:
            log.to_csv(log_path)
    return model, log


def finetune_config(seed=0, preset="finetune-desk", **overrides):
    """The fine-tuning configuration: no regulariser, SGD(0.9, 5e-4), a P2-style policy."""
    settings = training_preset(preset)
    settings = settings.get("finetune", settings)
    return TrainConfig.from_settings(settings, seed=seed, regularizer="none", alpha_e=0.0,
                                     **overrides)


def finetune(pruned_model, dataset, config=None, test_dataset=None, epochs=None,
             log_path=None):
    """
    Retrain a pruned model without a regulariser.

    Parameters
    ----------
    pruned_model : `electroprune.network.Model`
    dataset : `electroprune.data.Dataset`
    config : `TrainConfig`, optional
       Defaults to `finetune_config`. Its regulariser is always switched off.
    epochs : int, optional
       Overrides the configured epochs; 0 returns the model unchanged.
    """
    if epochs == 0:
        return pruned_model, MetricLog()
    config = config or finetune_config()
    config = config.replace(regularizer="none", alpha_e=0.0)
    if epochs is not None:
        config = config.replace(epochs=epochs)
    pruned_model.velocity = {}
    return train(pruned_model, dataset, config, test_dataset=test_dataset, log_path=log_path)


def force_field_seconds(model, k_e=COULOMB_CONSTANT, repeats=10):
    """Mean wall-clock seconds to compute every force field of ``model`` once."""
    started = time.perf_counter()
    for _ in range(repeats):
        force_fields(model, k_e)
    return (time.perf_counter() - started) / repeats


def measure_training_cost(config, dataset, model_factory,
                          methods=("none", "l1", "electrostatic")):
    """
    Time identical training runs under each regulariser.

    Parameters
    ----------
    config : `TrainConfig`
       Shared settings; only the regulariser changes between runs.
    dataset : `electroprune.data.Dataset`
    model_factory : callable
       Returns a freshly initialised model; called once per method.

    Returns
    -------
    dict
       Method name to ``{"epochs", "seconds", "hours", "field seconds per epoch"}``.
    """
    costs = {}
    steps = -(-len(dataset) // config.batch_size)
    for method in methods:
        model = model_factory()
        started = time.perf_counter()
        train(model, dataset, config.replace(regularizer=method))
        seconds = time.perf_counter() - started
        overhead = force_field_seconds(model, config.k_e) * steps \
            if method == "electrostatic" else 0.0
        costs[method] = {
            "epochs": config.epochs,
            "seconds": seconds,
            "hours": seconds / 3600.0,
            "field seconds per epoch": overhead,
        }
        logger.info(f"{method}: {seconds:.1f}s for {config.epochs} epochs")
    return costs


def sweep_alpha(model_factory, dataset, config, alphas=(1e-11, 1e-12, 1e-14),
                test_dataset=None):
    """
    Train one electrostatic model per force rate.

    Returns
    -------
    dict
       Force rate to ``(model, log)``.
    """
    results = {}
    for alpha in alphas:
        logger.info(f"Training with alpha_e={alpha:g}")
        model = model_factory()
        results[alpha] = train(
            model, dataset, config.replace(regularizer="electrostatic", alpha_e=alpha),
            test_dataset=test_dataset,
        )
    return results
