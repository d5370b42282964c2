"""
Sequential and residual networks built from the layers in
:mod:`electroprune.layers`, together with the loss, the complexity
counters, and the desk-scale model presets.
"""

import copy
import logging

import numpy as np

from .exceptions import DimensionError, NumericOverflowError
from .layers import BasicBlock, BatchNorm2d, Conv2d, ConvBlock, Dense, GlobalAvgPool

logger = logging.getLogger("electroprune")

FAMILIES = ("vgg", "resnet")


class Model:
    """
    An ordered list of blocks followed by global average pooling and an
    optional dense classifier.

    Parameters
    ----------
    blocks : list
       `ConvBlock` and `BasicBlock` instances, in order.
    classifier : `Dense`, optional
       Without a classifier the model returns the pooled features.
    family : str
       Either ``"vgg"`` (ratios given per conv layer) or ``"resnet"``
       (ratios given per stage).
    input_shape : tuple, optional
       The ``(channels, height, width)`` of a single sample.
    preset : str, optional
       The name of the preset the model was built from.
    """

    def __init__(self, blocks, classifier=None, family="vgg", input_shape=None, preset=None):
        if family not in FAMILIES:
            raise ValueError(f"Unknown model family {family}; expected one of {FAMILIES}.")
        self.blocks = list(blocks)
        self.classifier = classifier
        self.pool = GlobalAvgPool()
        self.family = family
        self.input_shape = tuple(input_shape) if input_shape is not None else None
        self.preset = preset
        #: Momentum buffers of the optimizer, keyed by parameter name.
        self.velocity = {}
        #: The first block whose output was non-finite during the last forward pass.
        self.nonfinite_layer = None
        self._assign_names()
        self._check_chain()

    def _assign_names(self):
        for index, block in enumerate(self.blocks):
            block.set_name(f"blocks.{index}")
        self.pool.name = "pool"
        if self.classifier is not None:
            self.classifier.name = "classifier"

    def _check_chain(self):
        previous = None
        for block in self.blocks:
            if previous is not None and block.in_channels != previous.out_channels:
                raise DimensionError(
                    block.name,
                    f"takes {block.in_channels} channels but {previous.name} "
                    f"produces {previous.out_channels}",
                )
            previous = block
        if self.classifier is not None and previous is not None:
            if self.classifier.in_features != previous.out_channels:
                raise DimensionError(
                    "classifier",
                    f"takes {self.classifier.in_features} features but {previous.name} "
                    f"produces {previous.out_channels}",
                )

    @property
    def dtype(self):
        for layer in self.leaves():
            return layer.weight.dtype
        return np.dtype(np.float64)

    def leaves(self):
        """Every layer with parameters, in forward order."""
        layers = []
        for block in self.blocks:
            layers.extend(block.leaves())
        if self.classifier is not None:
            layers.append(self.classifier)
        return layers

    def named_layers(self):
        return {layer.name: layer for layer in self.leaves()}

    def conv_layers(self):
        return [layer for layer in self.leaves() if isinstance(layer, Conv2d)]

    def prunable_layers(self):
        return [layer for layer in self.conv_layers() if layer.prunable]

    def parameters(self):
        """
        Return the trainable arrays keyed by ``<layer>.<parameter>``.

        The arrays are the live ones, so in-place updates change the model.
        """
        return {
            f"{layer.name}.{name}": value
            for layer in self.leaves()
            for name, value in layer.parameters().items()
        }

    def gradients(self):
        return {
            f"{layer.name}.{name}": value
            for layer in self.leaves()
            for name, value in layer.grads.items()
        }

    def buffers(self):
        return {
            f"{layer.name}.{name}": value
            for layer in self.leaves()
            for name, value in layer.buffers().items()
        }

    def load_arrays(self, arrays):
        """
        Copy arrays into the parameters and buffers named by their keys.
        """
        layers = self.named_layers()
        for key, value in arrays.items():
            layer_name, attr = key.rsplit(".", 1)
            current = getattr(layers[layer_name], attr)
            if current.shape != value.shape:
                raise DimensionError(
                    layer_name, f"{attr} has shape {current.shape}, got {value.shape}"
                )
            setattr(layers[layer_name], attr, np.array(value, dtype=current.dtype))

    def astype(self, dtype):
        for layer in self.leaves():
            layer.astype(dtype)
        self.velocity = {name: value.astype(dtype) for name, value in self.velocity.items()}
        return self

    def copy(self):
        return copy.deepcopy(self)

    def trace(self, input_shape):
        """
        Propagate a sample shape through the model.

        Returns
        -------
        list of tuple
           ``(layer, input_shape, output_shape)`` for every leaf layer.
        """
        shape = tuple(input_shape)
        records = []
        for block in self.blocks:
            for layer in block.leaves():
                out = layer.output_shape(shape)
                records.append((layer, shape, out))
                shape = out
        if self.blocks:
            shape = self.pool.output_shape(shape)
        if self.classifier is not None:
            records.append((self.classifier, shape, self.classifier.output_shape(shape)))
        return records

    def forward(self, x, train=False):
        self.nonfinite_layer = None
        expected = self.blocks[0].in_channels if self.blocks else None
        if expected is not None and (x.ndim != 4 or x.shape[1] != expected):
            raise DimensionError(
                self.blocks[0].name,
                f"expected a batch with {expected} channels, got shape {x.shape}",
            )
        for block in self.blocks:
            x = block.forward(x, train)
            self._note_nonfinite(block.name, x)
        if x.ndim == 4:
            x = self.pool.forward(x, train)
        if self.classifier is not None:
            x = self.classifier.forward(x, train)
            self._note_nonfinite("classifier", x)
        return x

    def _note_nonfinite(self, name, x):
        if self.nonfinite_layer is None and not np.isfinite(x).all():
            self.nonfinite_layer = name

    def backward(self, grad):
        """Back-propagate the gradient of the loss with respect to the logits."""
        if self.classifier is not None:
            grad = self.classifier.backward(grad)
        if self.blocks:
            grad = self.pool.backward(grad)
        for block in reversed(self.blocks):
            grad = block.backward(grad)
        return grad

    def describe(self):
        """A plain description of the architecture, enough to rebuild it."""
        return {
            "family": self.family,
            "preset": self.preset,
            "input shape": list(self.input_shape) if self.input_shape else None,
            "blocks": [block.describe() for block in self.blocks],
            "classifier": self.classifier.describe() if self.classifier else None,
        }

    @classmethod
    def from_description(cls, description, dtype=np.float64):
        """
        Build a zero-initialised model from `Model.describe` output.
        """

        def conv(spec):
            return Conv2d(spec["in"], spec["out"], spec["kernel"], stride=spec["stride"],
                          padding=spec["padding"], bias=spec["bias"],
                          prunable=spec["prunable"], dtype=dtype)

        blocks = []
        for spec in description["blocks"]:
            if spec["type"] == ConvBlock.kind:
                layer = conv(spec["conv"])
                bn = BatchNorm2d(layer.out_channels, dtype=dtype) if spec["bn"] else None
                blocks.append(ConvBlock(layer, bn, stage=spec["stage"]))
            elif spec["type"] == BasicBlock.kind:
                conv1, conv2 = conv(spec["conv1"]), conv(spec["conv2"])
                blocks.append(BasicBlock(
                    conv1, BatchNorm2d(conv1.out_channels, dtype=dtype),
                    conv2, BatchNorm2d(conv2.out_channels, dtype=dtype),
                    stage=spec["stage"],
                ))
            else:
                raise ValueError(f"Unknown block type {spec['type']}")
        classifier = None
        if description.get("classifier"):
            spec = description["classifier"]
            classifier = Dense(spec["in"], spec["out"], bias=spec["bias"], dtype=dtype)
        return cls(blocks, classifier, family=description["family"],
                   input_shape=description.get("input shape"),
                   preset=description.get("preset"))


def softmax_cross_entropy(logits, labels):
    """
    The mean softmax cross-entropy and its gradient with respect to the logits.

    Parameters
    ----------
    logits : `numpy.ndarray`
       Shape ``[batch, classes]``.
    labels : `numpy.ndarray`
       Integer class ids of shape ``[batch]``.

    Returns
    -------
    loss : float
    grad : `numpy.ndarray`
    """
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    batch = logits.shape[0]
    loss = -log_probs[np.arange(batch), labels].mean()
    grad = np.exp(log_probs)
    grad[np.arange(batch), labels] -= 1.0
    return float(loss), grad / batch


def forward(model, batch, train=False):
    """
    Compute logits for a batch of shape ``[B, C, H, W]``.
    """
    return model.forward(np.asarray(batch, dtype=model.dtype), train=train)


def backward(model, batch, labels):
    """
    Run a training-mode forward and backward pass.

    Returns
    -------
    loss : float
       The mean softmax cross-entropy over the batch.
    gradients : dict
       Parameter gradients keyed as `Model.parameters`.

    Raises
    ------
    NumericOverflowError
       If the loss is not finite.
    """
    labels = np.asarray(labels)
    logits = forward(model, batch, train=True)
    classes = logits.shape[1]
    if labels.min() < 0 or labels.max() >= classes:
        raise ValueError(f"Labels must lie in [0, {classes}).")
    with np.errstate(over="ignore", invalid="ignore"):
        loss, grad = softmax_cross_entropy(logits, labels)
    if not np.isfinite(loss):
        raise NumericOverflowError(model.nonfinite_layer, f"The loss is {loss}")
    model.backward(grad)
    return loss, model.gradients()


def count_flops(model, input_shape):
    """
    Count floating point operations for one sample.

    A multiply-accumulate counts as two operations. Convolutions count
    ``2 N C k^2 H_out W_out`` and dense layers ``2 in out``; batch-norm,
    activations, pooling and residual additions are not counted.
    """
    shape = tuple(input_shape)[-3:]
    flops = 0
    for layer, _, out in model.trace(shape):
        if isinstance(layer, Conv2d):
            flops += 2 * layer.out_channels * layer.in_channels * layer.kernel_size ** 2 \
                * out[1] * out[2]
        elif isinstance(layer, Dense):
            flops += 2 * layer.in_features * layer.out_features
    return int(flops)


def count_params(model):
    """Count weight, bias and batch-norm affine entries."""
    return int(sum(value.size for value in model.parameters().values()))


def mnist_cnn(input_shape=(1, 28, 28), classes=10, width=16, depth=None, rng=None,
              dtype=np.float64):
    """
    Three conv/batch-norm/ReLU blocks of widths ``w, 2w, 2w`` with strides 1, 2, 2.

    ``depth`` adds further stride-1 blocks of width ``2w`` when larger than 3.
    """
    widths = [width, 2 * width, 2 * width]
    strides = [1, 2, 2]
    for _ in range(max((depth or 3) - 3, 0)):
        widths.append(2 * width)
        strides.append(1)
    return _plain_network(input_shape, classes, widths, strides, rng, dtype, "mnist-cnn")


def toy_vgg(input_shape=(3, 32, 32), classes=10, width=8, depth=6, rng=None,
            dtype=np.float64):
    """
    ``depth`` conv/batch-norm/ReLU blocks whose width doubles every two
    layers, downsampling with stride 2 when the width changes.
    """
    widths, strides = [], []
    for index in range(depth or 6):
        level = index // 2
        widths.append(width * 2 ** level)
        strides.append(2 if index > 0 and index % 2 == 0 else 1)
    return _plain_network(input_shape, classes, widths, strides, rng, dtype, "toy-vgg")


def _plain_network(input_shape, classes, widths, strides, rng, dtype, preset):
    blocks = []
    channels = input_shape[0]
    for index, (out, stride) in enumerate(zip(widths, strides)):
        conv = Conv2d(channels, out, 3, stride=stride, padding=1, bias=False,
                      prunable=index > 0, rng=rng, dtype=dtype)
        blocks.append(ConvBlock(conv, BatchNorm2d(out, dtype=dtype), stage=index))
        channels = out
    classifier = Dense(channels, classes, rng=rng, dtype=dtype)
    return Model(blocks, classifier, family="vgg", input_shape=input_shape, preset=preset)


def toy_resnet(input_shape=(3, 32, 32), classes=10, width=8, depth=1, stages=2, rng=None,
               dtype=np.float64):
    """
    A stem conv followed by ``stages`` residual stages of ``depth`` basic
    blocks, widths ``w, 2w, 4w, ...``; every stage after the first halves
    the resolution.

    Only the first conv of each basic block is prunable.
    """
    stem = Conv2d(input_shape[0], width, 3, padding=1, bias=False, rng=rng, dtype=dtype)
    blocks = [ConvBlock(stem, BatchNorm2d(width, dtype=dtype), stage=0)]
    channels = width
    for stage in range(stages):
        out = width * 2 ** stage
        for index in range(depth or 1):
            stride = 2 if stage > 0 and index == 0 else 1
            conv1 = Conv2d(channels, out, 3, stride=stride, padding=1, bias=False,
                           prunable=True, rng=rng, dtype=dtype)
            conv2 = Conv2d(out, out, 3, padding=1, bias=False, rng=rng, dtype=dtype)
            blocks.append(BasicBlock(conv1, BatchNorm2d(out, dtype=dtype),
                                     conv2, BatchNorm2d(out, dtype=dtype), stage=stage + 1))
            channels = out
    classifier = Dense(channels, classes, rng=rng, dtype=dtype)
    return Model(blocks, classifier, family="resnet", input_shape=input_shape,
                 preset="toy-resnet")


MODEL_PRESETS = {
    "mnist-cnn": mnist_cnn,
    "toy-resnet": toy_resnet,
    "toy-vgg": toy_vgg,
}


def build_model(preset, input_shape, classes, width=None, depth=None, seed=0,
                dtype=np.float64):
    """
    Build a randomly initialised model from a named preset.

    Parameters
    ----------
    preset : str
       One of ``mnist-cnn``, ``toy-resnet`` or ``toy-vgg``.
    input_shape : tuple
       ``(channels, height, width)`` of one sample.
    classes : int
       The number of output classes.
    width, depth : int, optional
       Overrides for the preset's base width and depth.
    seed : int
       Seed for the Kaiming-uniform initialisation.
    """
    try:
        factory = MODEL_PRESETS[preset]
    except KeyError:
        raise ValueError(
            f"Unknown model preset {preset}; expected one of {sorted(MODEL_PRESETS)}."
        ) from None
    overrides = {}
    if width is not None:
        overrides["width"] = width
    if depth is not None:
        overrides["depth"] = depth
    model = factory(input_shape=tuple(input_shape), classes=classes,
                    rng=np.random.default_rng(seed), dtype=np.dtype(dtype), **overrides)
    logger.info(
        f"Built {preset} with {count_params(model)} parameters "
        f"and {len(model.prunable_layers())} prunable layers"
    )
    return model
