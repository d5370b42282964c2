"""
Structured filter pruning by local L1 ranking.

Filters are ranked within each prunable layer by their L1 norm and the
smallest ``floor(ratio * N)`` are removed. The matching batch-norm
channels go with them and the layer consuming the pruned output has
its input channels sliced to match.

The stage rules follow the usual ResNet conventions: the stem
convolution and the classifier are never pruned, and only the first
convolution of a basic block is prunable so the identity addition keeps
its width.
"""

import logging
import math
import re
from dataclasses import dataclass, field

import numpy as np
import yaml

from .exceptions import ConfigurationError, DependencyError, PruningError, SpeedupError
from .layers import BasicBlock, ConvBlock
from .network import count_flops, count_params

logger = logging.getLogger("electroprune")

# Absorbs representation error in ratio * N before flooring, e.g. 0.29 * 100.
_FLOOR_TOLERANCE = 1e-9


@dataclass(frozen=True)
class PruningRatios:
    """
    Pruning ratios for one model family.

    Parameters
    ----------
    family : str
       ``"resnet"``: ``values`` is a tuple with one ratio per stage, the
       stem first and the classifier last.
       ``"vgg"``: ``values`` maps conv-layer indices to ratios; missing
       layers are not pruned.
    values : tuple or dict
    """

    family: str
    values: object

    def __post_init__(self):
        ratios = self.values.values() if isinstance(self.values, dict) else self.values
        for ratio in ratios:
            if not 0 <= ratio < 1:
                raise PruningError(
                    f"Pruning ratios must lie in [0, 1), got {ratio}; "
                    "a ratio of 1 or more would remove every filter of a layer."
                )

    def to_string(self):
        if isinstance(self.values, dict):
            return ",".join(f"{index}:{ratio:g}" for index, ratio in sorted(self.values.items()))
        return ",".join(f"{ratio:g}" for ratio in self.values)


def parse_ratios(text, family):
    """
    Read a ratio string.

    Parameters
    ----------
    text : str
       Either a comma-separated list of per-stage floats such as
       ``"0,0.52,0.52,0.52,0"``, or a per-layer map with ranges such as
       ``"0:0,1-15:0.65"``.
    family : str
       The family of the model the ratios are for. A plain list given
       for a ``vgg`` model is read as one ratio per conv layer.
    """
    text = text.strip().strip("[]")
    try:
        if ":" in text:
            values = {}
            for item in text.split(","):
                layers, ratio = item.split(":")
                match = re.fullmatch(r"\s*(\d+)\s*(?:-\s*(\d+))?\s*", layers)
                if not match:
                    raise ValueError(item)
                first = int(match.group(1))
                last = int(match.group(2) or first)
                for index in range(first, last + 1):
                    values[index] = float(ratio)
            if family == "resnet":
                raise ConfigurationError(
                    "Residual models take one ratio per stage, e.g. 0,0.5,0.5,0."
                )
            return PruningRatios("vgg", values)
        values = tuple(float(item) for item in text.split(","))
    except ValueError:
        raise ConfigurationError(
            f"Could not read the pruning ratios {text!r}; expected e.g. "
            "'0,0.52,0.52,0' or '0:0,1-15:0.65'."
        ) from None
    if family == "vgg":
        return PruningRatios("vgg", dict(enumerate(values)))
    return PruningRatios(family, values)


def stage_count(model):
    """The length of a per-stage ratio list for a residual model."""
    return max((block.stage for block in model.blocks), default=0) + 2


def uniform_ratios(model, ratio):
    """Ratios pruning every prunable layer by ``ratio``, exempt layers by 0."""
    if model.family == "resnet":
        count = stage_count(model)
        return PruningRatios("resnet", tuple([0.0] + [ratio] * (count - 2) + [0.0]))
    return PruningRatios("vgg", {
        index: ratio for index, block in enumerate(model.blocks) if block.conv.prunable
    })


def rank_filters(layer):
    """
    Filters of a layer as ``(index, l1_norm)`` pairs, smallest norm first.

    Equal norms keep index order.
    """
    axes = tuple(range(1, layer.weight.ndim))
    norms = np.abs(layer.weight).sum(axis=axes)
    order = np.argsort(norms, kind="stable")
    return [(int(index), float(norms[index])) for index in order]


def layer_ratios(model, ratios):
    """
    Resolve family ratios to a ratio for every prunable layer.

    Raises
    ------
    PruningError
       If the ratios do not fit the model or ask to prune an exempt layer.
    """
    if ratios.family != model.family:
        raise PruningError(
            f"{ratios.family} ratios cannot be applied to a {model.family} model."
        )
    resolved = {}
    if model.family == "resnet":
        count = stage_count(model)
        if len(ratios.values) != count:
            raise PruningError(
                f"This model has {count} stages (stem, {count - 2} residual, classifier) "
                f"but {len(ratios.values)} ratios were given."
            )
        if ratios.values[0] or ratios.values[-1]:
            raise PruningError("The stem and classifier stages cannot be pruned.")
        for block in model.blocks:
            if isinstance(block, BasicBlock):
                resolved[block.conv1.name] = ratios.values[block.stage]
        return resolved
    convs = [block.conv for block in model.blocks]
    for index, ratio in ratios.values.items():
        if index >= len(convs):
            raise PruningError(
                f"Layer index {index} is out of range for {len(convs)} conv layers."
            )
        if ratio and not convs[index].prunable:
            raise PruningError(f"{convs[index].name} is exempt from pruning.")
    for index, conv in enumerate(convs):
        if conv.prunable:
            resolved[conv.name] = ratios.values.get(index, 0.0)
    return resolved


def dependencies(model):
    """
    ``(producer, batch_norm, consumer)`` for every prunable convolution.
    """
    links = []
    for index, block in enumerate(model.blocks):
        if isinstance(block, BasicBlock):
            if block.conv1.prunable:
                links.append((block.conv1, block.bn1, block.conv2))
            continue
        if not block.conv.prunable:
            continue
        if index + 1 < len(model.blocks):
            following = model.blocks[index + 1]
            if not isinstance(following, ConvBlock):
                raise PruningError(
                    f"{block.conv.name} feeds a residual block and cannot be pruned."
                )
            consumer = following.conv
        elif model.classifier is not None:
            consumer = model.classifier
        else:
            raise PruningError(f"{block.conv.name} is the model output and cannot be pruned.")
        links.append((block.conv, block.bn, consumer))
    return links


@dataclass
class PruningPlan:
    """
    Kept filter indices for every prunable layer of one model.

    Parameters
    ----------
    keep : dict
       Layer name to the strictly increasing indices of kept filters.
    widths : dict
       Layer name to its filter count before pruning.
    ratios : dict
       Layer name to the ratio the plan was built from.
    consumers : dict
       Layer name to the layer whose input channels follow its keep-set.
    ranks : dict
       Layer name to the ``(index, l1)`` ranking used.
    """

    keep: dict
    widths: dict
    ratios: dict = field(default_factory=dict)
    consumers: dict = field(default_factory=dict)
    ranks: dict = field(default_factory=dict)

    def is_identity(self):
        return all(len(self.keep[name]) == self.widths[name] for name in self.keep)

    def to_yaml(self):
        document = {
            name: {
                "filters": int(self.widths[name]),
                "ratio": float(self.ratios.get(name, 0.0)),
                "consumer": self.consumers.get(name),
                "kept": [int(index) for index in self.keep[name]],
                "ranks": [[int(index), float(norm)] for index, norm in self.ranks.get(name, [])],
            }
            for name in self.keep
        }
        return yaml.safe_dump(document, sort_keys=False)

    @classmethod
    def from_yaml(cls, text):
        document = yaml.safe_load(text) or {}
        return cls(
            keep={name: tuple(entry["kept"]) for name, entry in document.items()},
            widths={name: entry["filters"] for name, entry in document.items()},
            ratios={name: entry.get("ratio", 0.0) for name, entry in document.items()},
            consumers={name: entry.get("consumer") for name, entry in document.items()},
            ranks={name: [tuple(pair) for pair in entry.get("ranks", [])]
                   for name, entry in document.items()},
        )


def build_plan(model, ratios):
    """
    Build a `PruningPlan` removing ``floor(ratio * N)`` filters per layer.

    Parameters
    ----------
    model : `electroprune.network.Model`
    ratios : `PruningRatios`
    """
    per_layer = layer_ratios(model, ratios)
    consumers = {producer.name: consumer.name for producer, _, consumer in dependencies(model)}
    layers = model.named_layers()
    plan = PruningPlan(keep={}, widths={}, ratios=per_layer, consumers=consumers)
    for name, ratio in per_layer.items():
        layer = layers[name]
        filters = layer.out_channels
        pruned = math.floor(ratio * filters + _FLOOR_TOLERANCE)
        if filters - pruned < 1:
            raise PruningError(
                f"A ratio of {ratio} would remove all {filters} filters of {name}."
            )
        ranks = rank_filters(layer)
        plan.ranks[name] = ranks
        plan.widths[name] = filters
        plan.keep[name] = tuple(sorted(index for index, _ in ranks[pruned:]))
        logger.debug(f"{name}: keeping {filters - pruned} of {filters} filters")
    return plan


def apply_plan(model, plan):
    """
    Return a physically smaller copy of ``model``.

    Pruned filters lose their weight rows, bias entries and batch-norm
    channels, and each consumer keeps only the matching input channels.
    The input model is not modified.

    Raises
    ------
    PruningError
       If the plan names layers the model does not have, or widths differ.
    DependencyError
       If a consumer does not read the producer's full output.
    """
    pruned = model.copy()
    pruned.velocity = {}
    links = {producer.name: (producer, bn, consumer)
             for producer, bn, consumer in dependencies(pruned)}
    for name, keep in plan.keep.items():
        if name not in links:
            raise PruningError(f"The plan prunes {name}, which is not prunable in this model.")
        producer, bn, consumer = links[name]
        if producer.out_channels != plan.widths[name]:
            raise PruningError(
                f"The plan expects {plan.widths[name]} filters in {name}, "
                f"the model has {producer.out_channels}."
            )
        consumer_inputs = consumer.weight.shape[1]
        if consumer_inputs != producer.out_channels:
            raise DependencyError(
                producer.name, consumer.name,
                f"{consumer_inputs} inputs for {producer.out_channels} outputs",
            )
        keep = np.asarray(keep, dtype=np.int64)
        if keep.size == 0 or np.any(np.diff(keep) <= 0):
            raise PruningError(f"Kept indices of {name} must be non-empty and increasing.")
        producer.weight = producer.weight[keep].copy()
        if producer.bias is not None:
            producer.bias = producer.bias[keep].copy()
        if bn is not None:
            for attr in ("weight", "bias", "running_mean", "running_var"):
                setattr(bn, attr, getattr(bn, attr)[keep].copy())
        consumer.weight = consumer.weight[:, keep].copy()
    pruned._check_chain()
    return pruned


def speedup(base_model, pruned_model, input_shape):
    """The ratio of base to pruned FLOPs."""
    pruned_flops = count_flops(pruned_model, input_shape)
    if pruned_flops == 0:
        raise SpeedupError("The pruned model has no FLOPs.")
    return count_flops(base_model, input_shape) / pruned_flops


def prune_report(base_model, pruned_model, plan, input_shape):
    """
    Summarise a pruning: per-layer counts, parameters, FLOPs and speedup.
    """
    return {
        "layers": [
            {
                "layer": name,
                "filters": int(plan.widths[name]),
                "kept": len(plan.keep[name]),
                "pruned": int(plan.widths[name]) - len(plan.keep[name]),
            }
            for name in plan.keep
        ],
        "exempt": [layer.name for layer in base_model.conv_layers()
                   if layer.name not in plan.keep],
        "params before": count_params(base_model),
        "params after": count_params(pruned_model),
        "flops before": count_flops(base_model, input_shape),
        "flops after": count_flops(pruned_model, input_shape),
        "speedup": float(speedup(base_model, pruned_model, input_shape)),
    }


def prune(model, ratios):
    """Rank, plan and apply in one call; returns ``(pruned_model, plan)``."""
    if isinstance(ratios, str):
        ratios = parse_ratios(ratios, model.family)
    if not isinstance(ratios, PruningRatios):
        raise ConfigurationError(f"Cannot use {ratios!r} as pruning ratios.")
    plan = build_plan(model, ratios)
    return apply_plan(model, plan), plan
