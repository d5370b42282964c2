"""
Layers for the numpy network engine.

Every layer caches what it needs during ``forward`` and consumes that
cache in ``backward``, which returns the gradient with respect to the
layer input and stores parameter gradients on the layer.
Tensors are ``numpy.ndarray`` objects laid out as ``[batch, channel, height, width]``.
"""

import logging

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import DimensionError

logger = logging.getLogger("electroprune")


def kaiming_uniform(shape, fan_in, rng, dtype=np.float64):
    """
    Draw weights from the fan-in Kaiming-uniform distribution.

    Parameters
    ----------
    shape : tuple
       The shape of the weight tensor.
    fan_in : int
       The number of inputs feeding each output unit.
    rng : `numpy.random.Generator`
       The random generator to draw from.
    """
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    """
    The interface shared by every leaf layer.
    """

    #: Names of the trainable arrays held as attributes.
    parameter_names = ()
    #: Names of the non-trainable arrays held as attributes.
    buffer_names = ()

    def __init__(self):
        self.name = ""
        self.grads = {}

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def output_shape(self, input_shape):
        return tuple(input_shape)

    def parameters(self):
        return {
            name: getattr(self, name)
            for name in self.parameter_names
            if getattr(self, name) is not None
        }

    def buffers(self):
        return {name: getattr(self, name) for name in self.buffer_names}

    def astype(self, dtype):
        for name in self.parameter_names + self.buffer_names:
            value = getattr(self, name)
            if value is not None:
                setattr(self, name, value.astype(dtype))
        return self

    def __repr__(self):
        return f"{type(self).__name__}({self.name})"


class Conv2d(Layer):
    """
    A two-dimensional convolution with square kernels.

    Parameters
    ----------
    in_channels : int
       The number of input channels, ``C``.
    out_channels : int
       The number of filters, ``N``.
    kernel_size : int
       The kernel extent ``k``.
    stride : int, optional
       Defaults to 1.
    padding : int, optional
       Zero padding applied on every spatial edge. Defaults to 0.
    bias : bool, optional
       Whether the layer has a bias vector. Defaults to True.
    prunable : bool, optional
       Whether filters of this layer may be removed. Defaults to False.
    rng : `numpy.random.Generator`, optional
       The generator used for initialisation. Without one the weights are zero.
    """

    parameter_names = ("weight", "bias")

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 bias=True, prunable=False, rng=None, dtype=np.float64):
        super().__init__()
        if min(in_channels, out_channels, kernel_size) < 1:
            raise ValueError("Convolution extents must all be at least 1.")
        if stride < 1 or padding < 0:
            raise ValueError("Stride must be positive and padding non-negative.")
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        if rng is None:
            self.weight = np.zeros(shape, dtype=dtype)
        else:
            self.weight = kaiming_uniform(shape, in_channels * kernel_size ** 2, rng, dtype)
        self.bias = np.zeros(out_channels, dtype=dtype) if bias else None
        self.stride = stride
        self.padding = padding
        self.prunable = prunable
        self._cache = None

    @property
    def out_channels(self):
        return self.weight.shape[0]

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def kernel_size(self):
        return self.weight.shape[2]

    def output_shape(self, input_shape):
        channels, height, width = input_shape
        if channels != self.in_channels:
            raise DimensionError(
                self.name, f"expected {self.in_channels} input channels, got {channels}"
            )
        k, s, p = self.kernel_size, self.stride, self.padding
        out_h = (height + 2 * p - k) // s + 1
        out_w = (width + 2 * p - k) // s + 1
        if out_h < 1 or out_w < 1:
            raise DimensionError(
                self.name, f"a {height}x{width} input is smaller than the {k}x{k} kernel"
            )
        return (self.out_channels, out_h, out_w)

    def forward(self, x, train=False):
        if x.ndim != 4:
            raise DimensionError(self.name, f"expected a 4-d batch, got shape {x.shape}")
        self.output_shape(x.shape[1:])
        k, s, p = self.kernel_size, self.stride, self.padding
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        # windows: [B, C, H_out, W_out, k, k]
        windows = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        out = np.tensordot(windows, self.weight, axes=([1, 4, 5], [1, 2, 3]))
        out = out.transpose(0, 3, 1, 2)
        if self.bias is not None:
            out = out + self.bias[None, :, None, None]
        self._cache = (x.shape, windows)
        return np.ascontiguousarray(out)

    def backward(self, grad):
        padded_shape, windows = self._cache
        k, s, p = self.kernel_size, self.stride, self.padding
        self.grads["weight"] = np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3]))
        if self.bias is not None:
            self.grads["bias"] = grad.sum(axis=(0, 2, 3))
        out_h, out_w = grad.shape[2:]
        dx = np.zeros(padded_shape, dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                contribution = np.tensordot(grad, self.weight[:, :, i, j], axes=([1], [0]))
                dx[:, :, i:i + s * (out_h - 1) + 1:s, j:j + s * (out_w - 1) + 1:s] += (
                    contribution.transpose(0, 3, 1, 2)
                )
        if p:
            dx = dx[:, :, p:-p, p:-p]
        return dx

    def describe(self):
        return {
            "in": int(self.in_channels),
            "out": int(self.out_channels),
            "kernel": int(self.kernel_size),
            "stride": int(self.stride),
            "padding": int(self.padding),
            "bias": self.bias is not None,
            "prunable": bool(self.prunable),
        }


class BatchNorm2d(Layer):
    """
    Per-channel batch normalisation.

    In training mode the batch statistics are used and the running
    statistics are updated with the given momentum; in evaluation mode
    the running statistics are used.
    """

    parameter_names = ("weight", "bias")
    buffer_names = ("running_mean", "running_var")

    def __init__(self, num_features, eps=1e-5, momentum=0.1, dtype=np.float64):
        super().__init__()
        if eps <= 0:
            raise ValueError("Batch-norm epsilon must be positive.")
        self.weight = np.ones(num_features, dtype=dtype)
        self.bias = np.zeros(num_features, dtype=dtype)
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)
        self.eps = eps
        self.momentum = momentum
        self._cache = None

    @property
    def num_features(self):
        return self.weight.shape[0]

    def output_shape(self, input_shape):
        if input_shape[0] != self.num_features:
            raise DimensionError(
                self.name, f"expected {self.num_features} channels, got {input_shape[0]}"
            )
        return tuple(input_shape)

    def forward(self, x, train=False):
        self.output_shape(x.shape[1:])
        axes = (0, 2, 3)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            count = x.size // x.shape[1]
            unbiased = var * count / max(count - 1, 1)
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * unbiased
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        self._cache = (xhat, inv_std, train)
        return self.weight[None, :, None, None] * xhat + self.bias[None, :, None, None]

    def backward(self, grad):
        xhat, inv_std, train = self._cache
        axes = (0, 2, 3)
        self.grads["weight"] = (grad * xhat).sum(axis=axes)
        self.grads["bias"] = grad.sum(axis=axes)
        dxhat = grad * self.weight[None, :, None, None]
        if not train:
            return dxhat * inv_std[None, :, None, None]
        count = grad.size // grad.shape[1]
        return (inv_std[None, :, None, None] / count) * (
            count * dxhat
            - dxhat.sum(axis=axes)[None, :, None, None]
            - xhat * (dxhat * xhat).sum(axis=axes)[None, :, None, None]
        )


class ReLU(Layer):

    def forward(self, x, train=False):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0).astype(x.dtype, copy=False)

    def backward(self, grad):
        return np.where(self._mask, grad, 0.0).astype(grad.dtype, copy=False)


class GlobalAvgPool(Layer):
    """Average each channel over its spatial extent, giving ``[batch, channel]``."""

    def output_shape(self, input_shape):
        return (input_shape[0],)

    def forward(self, x, train=False):
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        batch, channels, height, width = self._shape
        return np.broadcast_to(
            grad[:, :, None, None] / (height * width), self._shape
        ).copy()


class Dense(Layer):
    """
    A fully-connected classifier layer with weights of shape ``[out, in]``.
    """

    parameter_names = ("weight", "bias")

    def __init__(self, in_features, out_features, bias=True, rng=None, dtype=np.float64):
        super().__init__()
        shape = (out_features, in_features)
        if rng is None:
            self.weight = np.zeros(shape, dtype=dtype)
        else:
            self.weight = kaiming_uniform(shape, in_features, rng, dtype)
        self.bias = np.zeros(out_features, dtype=dtype) if bias else None
        self.prunable = False

    @property
    def in_features(self):
        return self.weight.shape[1]

    @property
    def out_features(self):
        return self.weight.shape[0]

    def output_shape(self, input_shape):
        if tuple(input_shape) != (self.in_features,):
            raise DimensionError(
                self.name, f"expected {self.in_features} features, got {input_shape}"
            )
        return (self.out_features,)

    def forward(self, x, train=False):
        if x.ndim != 2:
            raise DimensionError(self.name, f"expected a 2-d batch, got shape {x.shape}")
        self.output_shape(x.shape[1:])
        self._input = x
        out = x @ self.weight.T
        if self.bias is not None:
            out = out + self.bias
        return out

    def backward(self, grad):
        self.grads["weight"] = grad.T @ self._input
        if self.bias is not None:
            self.grads["bias"] = grad.sum(axis=0)
        return grad @ self.weight

    def describe(self):
        return {"in": int(self.in_features), "out": int(self.out_features),
                "bias": self.bias is not None}


class ConvBlock:
    """
    A convolution, an optional batch-norm, and a ReLU.

    Parameters
    ----------
    conv : `Conv2d`
    bn : `BatchNorm2d`, optional
    stage : int
       The pruning stage (or layer index) this block belongs to.
    """

    kind = "conv"

    def __init__(self, conv, bn=None, stage=0):
        self.conv = conv
        self.bn = bn
        self.relu = ReLU()
        self.stage = stage
        self.name = ""

    def set_name(self, name):
        self.name = name
        self.conv.name = f"{name}.conv"
        if self.bn is not None:
            self.bn.name = f"{name}.bn"
        self.relu.name = f"{name}.relu"

    def leaves(self):
        return [layer for layer in (self.conv, self.bn) if layer is not None]

    @property
    def in_channels(self):
        return self.conv.in_channels

    @property
    def out_channels(self):
        return self.conv.out_channels

    def output_shape(self, input_shape):
        return self.conv.output_shape(input_shape)

    def forward(self, x, train=False):
        x = self.conv.forward(x, train)
        if self.bn is not None:
            x = self.bn.forward(x, train)
        return self.relu.forward(x, train)

    def backward(self, grad):
        grad = self.relu.backward(grad)
        if self.bn is not None:
            grad = self.bn.backward(grad)
        return self.conv.backward(grad)

    def describe(self):
        return {"type": self.kind, "stage": int(self.stage),
                "conv": self.conv.describe(), "bn": self.bn is not None}


class BasicBlock:
    """
    A two-convolution residual block with an identity shortcut.

    When the block changes width or resolution the shortcut subsamples
    spatially and zero-pads the channel axis, so it carries no parameters.

    Parameters
    ----------
    conv1, conv2 : `Conv2d`
    bn1, bn2 : `BatchNorm2d`
    stage : int
       The residual stage this block belongs to.
    """

    kind = "basic"

    def __init__(self, conv1, bn1, conv2, bn2, stage=1):
        self.conv1, self.bn1 = conv1, bn1
        self.conv2, self.bn2 = conv2, bn2
        self.relu1, self.relu2 = ReLU(), ReLU()
        self.stage = stage
        self.name = ""
        if conv2.out_channels < conv1.in_channels:
            raise DimensionError(
                "shortcut", "a residual block cannot narrow its identity branch"
            )

    def set_name(self, name):
        self.name = name
        for attr in ("conv1", "bn1", "conv2", "bn2", "relu1", "relu2"):
            getattr(self, attr).name = f"{name}.{attr}"

    def leaves(self):
        return [self.conv1, self.bn1, self.conv2, self.bn2]

    @property
    def in_channels(self):
        return self.conv1.in_channels

    @property
    def out_channels(self):
        return self.conv2.out_channels

    @property
    def stride(self):
        return self.conv1.stride

    def _shortcut_padding(self):
        extra = self.out_channels - self.in_channels
        return extra // 2, extra - extra // 2

    def output_shape(self, input_shape):
        shape = self.conv1.output_shape(input_shape)
        shape = self.bn1.output_shape(shape)
        shape = self.conv2.output_shape(shape)
        return self.bn2.output_shape(shape)

    def shortcut(self, x):
        before, after = self._shortcut_padding()
        if self.stride == 1 and before == after == 0:
            return x
        x = x[:, :, ::self.stride, ::self.stride]
        return np.pad(x, ((0, 0), (before, after), (0, 0), (0, 0)))

    def forward(self, x, train=False):
        self._input_shape = x.shape
        out = self.relu1.forward(self.bn1.forward(self.conv1.forward(x, train), train))
        out = self.bn2.forward(self.conv2.forward(out, train), train)
        identity = self.shortcut(x)
        if identity.shape != out.shape:
            raise DimensionError(
                self.name,
                f"residual branch shape {out.shape} does not match shortcut {identity.shape}",
            )
        return self.relu2.forward(out + identity)

    def backward(self, grad):
        grad = self.relu2.backward(grad)
        main = self.conv2.backward(self.bn2.backward(grad))
        main = self.conv1.backward(self.bn1.backward(self.relu1.backward(main)))
        before, _ = self._shortcut_padding()
        identity = grad[:, before:before + self.in_channels]
        if self.stride == 1:
            return main + identity
        shortcut = np.zeros(self._input_shape, dtype=grad.dtype)
        shortcut[:, :, ::self.stride, ::self.stride] = identity
        return main + shortcut

    def describe(self):
        return {"type": self.kind, "stage": int(self.stage),
                "conv1": self.conv1.describe(), "conv2": self.conv2.describe()}
