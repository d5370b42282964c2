"""
The ``electroprune`` command-line interface.
"""

import functools
import logging
import os
from dataclasses import dataclass, field

import click
import yaml

from .checkpoint import load_checkpoint, save_checkpoint
from .data import load_dataset
from .electrostatics import (
    COULOMB_CONSTANT,
    R_MIN_FACTOR,
    TABLE_COLUMNS,
    filter_table,
    penalty_from_table,
)
from .exceptions import (
    ConfigurationError,
    DataError,
    DatasetNotFoundError,
    DimensionError,
    NumericOverflowError,
    PruningError,
)
from .network import MODEL_PRESETS, build_model, count_flops, count_params
from .pruner import parse_ratios, prune, prune_report, uniform_ratios
from .trainer import (
    REGULARIZERS,
    SCHEDULES,
    TrainConfig,
    evaluate,
    finetune,
    finetune_config,
    initial_model,
    load_presets,
    measure_training_cost,
    sweep_alpha,
    train,
)
from .utils import append_json_line, write_table

logger = logging.getLogger("electroprune")

DATASETS = ("mnist", "cifar10", "synthetic")
SWEEP_COLUMNS = ("ratio", "speedup", "params", "flops", "top1_no_ft")
COST_COLUMNS = ("method", "epochs", "seconds", "hours")
DEFAULT_RATIO_GRID = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9"

#: Exit codes by error class; the first match wins.
EXIT_CODES = (
    (ConfigurationError, 2),
    (PruningError, 2),
    (DataError, 3),
    (DimensionError, 3),
    (NumericOverflowError, 4),
)


def handle_errors(command):
    """Turn library errors into a logged message and the matching exit code."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except tuple(error for error, _ in EXIT_CODES) as error:
            code = next(code for kind, code in EXIT_CODES if isinstance(error, kind))
            logger.error(str(error))
            click.echo(click.style("Error: ", fg="red", bold=True) + str(error), err=True)
            raise SystemExit(code) from None

    return wrapper


def read_settings(filename):
    """Read a YAML settings file; None gives an empty mapping."""
    if filename is None:
        return {}
    if not os.path.exists(filename):
        raise ConfigurationError(f"The settings file {filename} does not exist.")
    with open(filename, "r") as file_handle:
        settings = yaml.safe_load(file_handle) or {}
    if not isinstance(settings, dict):
        raise ConfigurationError(f"{filename} does not hold a mapping of settings.")
    return settings


def resolve_ratios(text, model):
    """Parse ``--ratios``, resolving ``preset:<name>`` through the ratio presets."""
    if text.startswith("preset:"):
        name = text.split(":", 1)[1]
        presets = load_presets()["ratios"]
        if name not in presets:
            raise ConfigurationError(
                f"Unknown ratio preset {name}; expected one of {sorted(presets)}."
            )
        text = presets[name]["ratios"]
    return parse_ratios(text, model.family)


def parse_grid(text):
    try:
        values = [float(item) for item in text.split(",") if item.strip()]
    except ValueError:
        raise ConfigurationError(f"Could not read the grid {text!r}.") from None
    if not values:
        raise ConfigurationError("The grid is empty.")
    return values


@dataclass
class RunConfig:
    """
    Everything a command needs besides its training settings: the model,
    the dataset and where to write.

    Paths are checked by `validate` before any compute starts.
    """

    model: str = "mnist-cnn"
    width: int = None
    depth: int = None
    dataset: str = "synthetic"
    directory: str = None
    samples: int = None
    test_samples: int = None
    data_seed: int = 0
    seed: int = 0
    output: str = "."
    checkpoint: str = None
    training: dict = field(default_factory=dict)

    @classmethod
    def from_sources(cls, settings, **flags):
        """
        Layer a settings mapping and command-line flags over the defaults.
        """
        values = {}
        model = settings.get("model", {}) or {}
        data = settings.get("data", {}) or {}
        for key, name in (("preset", "model"), ("width", "width"), ("depth", "depth")):
            if model.get(key) is not None:
                values[name] = model[key]
        for key, name in (("dataset", "dataset"), ("directory", "directory"),
                          ("samples", "samples"), ("test samples", "test_samples"),
                          ("seed", "data_seed")):
            if data.get(key) is not None:
                values[name] = data[key]
        for key in ("seed", "output"):
            if settings.get(key) is not None:
                values[key] = settings[key]
        values["training"] = dict(settings.get("training", {}) or {})
        values.update({name: value for name, value in flags.items() if value is not None})
        config = cls(**values)
        config.validate()
        return config

    def validate(self):
        if self.model not in MODEL_PRESETS:
            raise ConfigurationError(
                f"Unknown model preset {self.model}; expected one of {sorted(MODEL_PRESETS)}."
            )
        if self.dataset not in DATASETS:
            raise ConfigurationError(
                f"Unknown dataset {self.dataset}; expected one of {DATASETS}."
            )
        if self.dataset != "synthetic":
            if not self.directory:
                raise ConfigurationError(f"The {self.dataset} dataset needs --data-dir.")
            if not os.path.isdir(self.directory):
                raise DatasetNotFoundError(f"The data directory {self.directory} does not exist.")
        if self.checkpoint is not None and not os.path.exists(self.checkpoint):
            raise DatasetNotFoundError(f"The checkpoint {self.checkpoint} does not exist.")

    def path(self, name):
        return os.path.join(self.output, name)

    def load(self, split="train", shape=None, classes=10):
        samples = self.samples if split == "train" else self.test_samples
        if self.dataset == "synthetic" and shape is None:
            shape = (1, 28, 28) if self.model == "mnist-cnn" else (3, 32, 32)
        return load_dataset(self.dataset, self.directory, split=split, seed=self.data_seed,
                            samples=samples, shape=shape, classes=classes)

    def load_for(self, model, split="test"):
        """Load ``split`` shaped for an existing model."""
        classes = model.classifier.out_features if model.classifier is not None else 10
        shape = model.input_shape if self.dataset == "synthetic" else None
        return self.load(split, shape=shape, classes=classes)


def settings_option(command):
    return click.option("--settings", type=click.Path(dir_okay=False),
                        help="A YAML settings file.")(command)


def output_option(command):
    return click.option("--output", envvar="ELECTROPRUNE_OUTPUT", default=None,
                        help="The output directory; defaults to $ELECTROPRUNE_OUTPUT or '.'.")(
        command)


def model_options(command):
    command = click.option("--depth", type=int, help="Override the preset depth.")(command)
    command = click.option("--width", type=int, help="Override the preset width.")(command)
    command = click.option("--model", "model_preset", type=click.Choice(sorted(MODEL_PRESETS)),
                           help="The model preset.")(command)
    return command


def data_options(command):
    command = click.option("--data-seed", type=int,
                           help="Seed of the synthetic task.")(command)
    command = click.option("--test-samples", type=int,
                           help="Use only this many test samples.")(command)
    command = click.option("--samples", type=int,
                           help="Use only this many training samples.")(command)
    command = click.option("--data-dir", type=click.Path(file_okay=False),
                           help="The directory holding the dataset files.")(command)
    command = click.option("--dataset", type=click.Choice(DATASETS),
                           help="The dataset to use.")(command)
    return command


def checkpoint_option(command):
    return click.option("--checkpoint", required=True, type=click.Path(dir_okay=False),
                        help="A checkpoint written by electroprune.")(command)


def run_config(settings, model_preset=None, width=None, depth=None, dataset=None,
               data_dir=None, samples=None, test_samples=None, data_seed=None,
               seed=None, output=None, checkpoint=None):
    return RunConfig.from_sources(
        read_settings(settings), model=model_preset, width=width, depth=depth,
        dataset=dataset, directory=data_dir, samples=samples, test_samples=test_samples,
        data_seed=data_seed, seed=seed, output=output, checkpoint=checkpoint,
    )


def echo_summary(title, items):
    click.echo(title)
    click.echo("-" * len(title))
    for key, value in items.items():
        click.echo(click.style(f"{key}: ", bold=True), nl=False)
        click.echo(f"{value}")


@click.group()
@click.option("--log-level", default="INFO",
              type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
              help="The logging level.")
def cli(log_level):
    """Train convolutional networks with electrostatic forces and prune them."""
    logging.basicConfig(level=getattr(logging, log_level.upper()),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s",
                        force=True)


@cli.command("train")
@settings_option
@model_options
@data_options
@click.option("--preset", help="A named training preset.")
@click.option("--reg", "regularizer", type=click.Choice(REGULARIZERS), help="The regulariser.")
@click.option("--alpha-e", type=float, help="The electrostatic force rate.")
@click.option("--alpha-grid", help="Train one model per comma-separated force rate.")
@click.option("--k-e", type=float, help="The Coulomb constant.")
@click.option("--l1-rate", type=float, help="The L1 regularisation rate.")
@click.option("--epochs", type=int)
@click.option("--batch-size", type=int)
@click.option("--lr-policy", help="A named policy (P1, P2/10, ...) or 'epoch:lr,...'.")
@click.option("--momentum", type=float)
@click.option("--weight-decay", type=float)
@click.option("--recompute", type=click.Choice(SCHEDULES), help="Force-field recomputation.")
@click.option("--dtype", type=click.Choice(["float64", "float32"]))
@click.option("--pretrained", type=click.Path(dir_okay=False),
              help="Start from the weights in this checkpoint.")
@click.option("--seed", type=int, help="Seeds initialisation and batch order.")
@output_option
@handle_errors
def train_command(settings, model_preset, width, depth, dataset, data_dir, samples,
                  test_samples, data_seed, preset, regularizer, alpha_e, alpha_grid, k_e,
                  l1_rate, epochs, batch_size, lr_policy, momentum, weight_decay, recompute,
                  dtype, pretrained, seed, output):
    """Train a model, optionally with the electrostatic or L1 regulariser."""
    run = run_config(settings, model_preset, width, depth, dataset, data_dir, samples,
                     test_samples, data_seed, seed, output, checkpoint=pretrained)
    training = dict(run.training)
    if preset:
        training["preset"] = preset
    config = TrainConfig.from_settings(
        training, alpha_e=alpha_e, k_e=k_e, l1_rate=l1_rate, epochs=epochs,
        batch_size=batch_size, lr_policy=lr_policy, momentum=momentum,
        weight_decay=weight_decay, recompute_schedule=recompute, regularizer=regularizer,
        dtype=dtype, seed=run.seed, init=pretrained,
    )
    train_set = run.load("train")
    test_set = run.load("test", shape=train_set.sample_shape, classes=train_set.classes)

    def factory():
        return initial_model(config, lambda: build_model(
            run.model, train_set.sample_shape, train_set.classes, run.width, run.depth,
            seed=config.seed, dtype=config.dtype))

    if alpha_grid:
        results = sweep_alpha(factory, train_set, config, parse_grid(alpha_grid),
                              test_dataset=test_set)
        for alpha, (model, log) in results.items():
            directory = run.path(f"alpha-{alpha:g}")
            log.to_csv(os.path.join(directory, "metrics.csv"))
            save_checkpoint(os.path.join(directory, "checkpoint.h5"), model,
                            config.replace(regularizer="electrostatic", alpha_e=alpha))
            echo_summary(f"alpha_e = {alpha:g}", {"test top-1": f"{log.last['test_top1']:.4f}"})
        return
    model = factory()
    model, log = train(model, train_set, config, test_dataset=test_set,
                       log_path=run.path("metrics.csv"))
    save_checkpoint(run.path("checkpoint.h5"), model, config,
                    metadata={"dataset": run.dataset, "data seed": run.data_seed})
    echo_summary("Training finished", {
        "regularizer": config.regularizer,
        "epochs": config.epochs,
        "train loss": f"{log.last['train_loss']:.4f}",
        "test top-1": f"{log.last['test_top1']:.4f}",
        "checkpoint": run.path("checkpoint.h5"),
    })


@cli.command("prune")
@checkpoint_option
@click.option("--ratios", required=True,
              help="Per-stage ratios '0,0.5,0.5,0', a per-layer map '0:0,1-15:0.65', "
                   "or 'preset:<name>'.")
@output_option
@handle_errors
def prune_command(checkpoint, ratios, output):
    """Prune the smallest-norm filters of a trained model."""
    run = RunConfig.from_sources({}, checkpoint=checkpoint, output=output)
    model, settings = load_checkpoint(checkpoint)
    pruned, plan = prune(model, resolve_ratios(ratios, model))
    report = prune_report(model, pruned, plan, model.input_shape)
    os.makedirs(run.output, exist_ok=True)
    with open(run.path("plan.yml"), "w") as file_handle:
        file_handle.write(plan.to_yaml())
    with open(run.path("prune_report.yml"), "w") as file_handle:
        yaml.safe_dump(report, file_handle, sort_keys=False)
    config = TrainConfig.from_settings(settings) if settings else None
    save_checkpoint(run.path("pruned.h5"), pruned, config,
                    metadata={"pruned from": checkpoint, "ratios": ratios})
    for row in report["layers"]:
        logger.info(f"{row['layer']}: kept {row['kept']} of {row['filters']}")
    echo_summary("Pruning report", {
        "params": f"{report['params before']} -> {report['params after']}",
        "flops": f"{report['flops before']} -> {report['flops after']}",
        "speedup": f"{report['speedup']:.2f}x",
        "exempt": ", ".join(report["exempt"]) or "none",
    })


@cli.command("finetune")
@checkpoint_option
@settings_option
@data_options
@click.option("--preset", default="finetune-desk", show_default=True,
              help="The training preset whose fine-tuning schedule is used.")
@click.option("--epochs", type=int)
@click.option("--lr-policy")
@click.option("--seed", type=int)
@output_option
@handle_errors
def finetune_command(checkpoint, settings, dataset, data_dir, samples, test_samples,
                     data_seed, preset, epochs, lr_policy, seed, output):
    """Retrain a pruned model without a regulariser."""
    run = run_config(settings, None, None, None, dataset, data_dir, samples, test_samples,
                     data_seed, seed, output, checkpoint=checkpoint)
    model, _ = load_checkpoint(checkpoint)
    config = finetune_config(seed=run.seed, preset=preset, lr_policy=lr_policy)
    train_set = run.load_for(model, "train")
    test_set = run.load_for(model, "test")
    model, log = finetune(model, train_set, config, test_dataset=test_set, epochs=epochs,
                          log_path=run.path("metrics.csv"))
    save_checkpoint(run.path("checkpoint.h5"), model, config,
                    metadata={"fine-tuned from": checkpoint})
    top1 = log.last["test_top1"] if len(log) else evaluate(model, test_set)
    echo_summary("Fine-tuning finished", {"epochs": len(log), "test top-1": f"{top1:.4f}"})


@cli.command("eval")
@checkpoint_option
@settings_option
@data_options
@click.option("--split", type=click.Choice(["train", "test"]), default="test",
              show_default=True)
@click.option("--batch-size", type=int, default=256, show_default=True)
@output_option
@handle_errors
def eval_command(checkpoint, settings, dataset, data_dir, samples, test_samples, data_seed,
                 split, batch_size, output):
    """Report the top-1 accuracy of a checkpoint."""
    run = run_config(settings, None, None, None, dataset, data_dir, samples, test_samples,
                     data_seed, None, output, checkpoint=checkpoint)
    model, _ = load_checkpoint(checkpoint)
    data = run.load_for(model, split)
    top1 = evaluate(model, data, batch_size)
    append_json_line(run.path("eval.jsonl"), {
        "checkpoint": checkpoint,
        "dataset": run.dataset,
        "split": split,
        "samples": len(data),
        "top1": top1,
    })
    echo_summary("Evaluation", {"samples": len(data), "top-1": f"{top1:.4f}"})


@cli.command("sweep")
@checkpoint_option
@settings_option
@data_options
@click.option("--ratio-grid", default=DEFAULT_RATIO_GRID, show_default=True,
              help="Comma-separated ratios applied to every prunable layer.")
@output_option
@handle_errors
def sweep_command(checkpoint, settings, dataset, data_dir, samples, test_samples, data_seed,
                  ratio_grid, output):
    """Prune one checkpoint at every ratio of a grid without retraining."""
    run = run_config(settings, None, None, None, dataset, data_dir, samples, test_samples,
                     data_seed, None, output, checkpoint=checkpoint)
    grid = parse_grid(ratio_grid)
    for ratio in grid:
        if not 0 <= ratio < 1:
            raise ConfigurationError(f"Grid ratios must lie in [0, 1), got {ratio}.")
    model, _ = load_checkpoint(checkpoint)
    data = run.load_for(model, "test")
    base_flops = count_flops(model, model.input_shape)
    rows = []
    for ratio in grid:
        pruned, _ = prune(model, uniform_ratios(model, ratio))
        flops = count_flops(pruned, model.input_shape)
        rows.append({
            "ratio": ratio,
            "speedup": base_flops / flops,
            "params": count_params(pruned),
            "flops": flops,
            "top1_no_ft": evaluate(pruned, data),
        })
        logger.info(f"ratio {ratio:g}: top-1 {rows[-1]['top1_no_ft']:.4f}, "
                    f"speedup {rows[-1]['speedup']:.2f}x")
    write_table(run.path("sweep.csv"), rows, SWEEP_COLUMNS)
    echo_summary("Sweep", {"points": len(rows), "table": run.path("sweep.csv")})


@cli.command("inspect")
@checkpoint_option
@click.option("--k-e", type=float,
              help="The Coulomb constant; defaults to the one the checkpoint was trained with.")
@output_option
@handle_errors
def inspect_command(checkpoint, k_e, output):
    """Write the per-filter norms, charges and forces of a checkpoint."""
    run = RunConfig.from_sources({}, checkpoint=checkpoint, output=output)
    model, settings = load_checkpoint(checkpoint)
    config = TrainConfig.from_settings(settings) if settings else None
    if k_e is None:
        k_e = config.k_e if config else COULOMB_CONSTANT
    r_min_factor = config.r_min_factor if config else R_MIN_FACTOR
    rows = filter_table(model, k_e, r_min_factor)
    write_table(run.path("norms.csv"), rows, TABLE_COLUMNS)
    echo_summary("Force fields", {
        "layers": len({row["layer"] for row in rows}),
        "filters": len(rows),
        "penalty": f"{penalty_from_table(rows):.6g}",
        "table": run.path("norms.csv"),
    })


@cli.command("cost")
@settings_option
@model_options
@data_options
@click.option("--methods", default="none,l1,electrostatic", show_default=True)
@click.option("--alpha-e", type=float)
@click.option("--epochs", type=int, default=1, show_default=True)
@click.option("--batch-size", type=int)
@click.option("--seed", type=int)
@output_option
@handle_errors
def cost_command(settings, model_preset, width, depth, dataset, data_dir, samples,
                 test_samples, data_seed, methods, alpha_e, epochs, batch_size, seed, output):
    """Time training under each regulariser."""
    run = run_config(settings, model_preset, width, depth, dataset, data_dir, samples,
                     test_samples, data_seed, seed, output)
    config = TrainConfig.from_settings(run.training, alpha_e=alpha_e, epochs=epochs,
                                       batch_size=batch_size, seed=run.seed)
    methods = tuple(method.strip() for method in methods.split(","))
    for method in methods:
        if method not in REGULARIZERS:
            raise ConfigurationError(f"Unknown method {method}; expected one of {REGULARIZERS}.")
    train_set = run.load("train")
    costs = measure_training_cost(
        config, train_set,
        lambda: build_model(run.model, train_set.sample_shape, train_set.classes, run.width,
                            run.depth, seed=config.seed, dtype=config.dtype),
        methods=methods,
    )
    rows = [dict(method=method, **cost) for method, cost in costs.items()]
    write_table(run.path("training_cost.csv"), rows, COST_COLUMNS)
    echo_summary("Training cost", {
        method: f"{cost['seconds']:.1f}s ({cost['field seconds per epoch']:.2f}s in force fields)"
        for method, cost in costs.items()
    })


if __name__ == "__main__":
    cli()
