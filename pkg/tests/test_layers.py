import unittest

import numpy as np

from electroprune.exceptions import DimensionError
from electroprune.layers import (
    BasicBlock,
    BatchNorm2d,
    Conv2d,
    ConvBlock,
    Dense,
    GlobalAvgPool,
    kaiming_uniform,
)
from electroprune.network import Model, backward
from tests.test_fixtures import numerical_gradient, relative_error


def naive_convolution(x, weight, bias, stride, padding):
    x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    batch = x.shape[0]
    filters, _, k, _ = weight.shape
    out_h = (x.shape[2] - k) // stride + 1
    out_w = (x.shape[3] - k) // stride + 1
    out = np.zeros((batch, filters, out_h, out_w))
    for b in range(batch):
        for n in range(filters):
            for i in range(out_h):
                for j in range(out_w):
                    window = x[b, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[b, n, i, j] = (window * weight[n]).sum()
            if bias is not None:
                out[b, n] += bias[n]
    return out


class ConvolutionTests(unittest.TestCase):
    """Check the convolution against a direct loop and finite differences."""

    def setUp(self):
        self.rng = np.random.default_rng(3)

    def test_forward_matches_direct_loop(self):
        for stride, padding in ((1, 0), (1, 1), (2, 1)):
            layer = Conv2d(2, 3, 3, stride=stride, padding=padding, rng=self.rng)
            layer.bias = self.rng.normal(size=3)
            x = self.rng.normal(size=(2, 2, 7, 7))
            expected = naive_convolution(x, layer.weight, layer.bias, stride, padding)
            np.testing.assert_allclose(layer.forward(x), expected, rtol=1e-12, atol=1e-12)

    def test_backward_matches_finite_differences(self):
        layer = Conv2d(2, 3, 3, stride=2, padding=1, rng=self.rng)
        layer.bias = self.rng.normal(size=3)
        x = self.rng.normal(size=(2, 2, 6, 6))
        upstream = self.rng.normal(size=(2, 3, 3, 3))

        def loss():
            return float((layer.forward(x) * upstream).sum())

        layer.forward(x)
        dx = layer.backward(upstream)
        self.assertLess(relative_error(dx, numerical_gradient(loss, x)), 1e-4)
        self.assertLess(
            relative_error(layer.grads["weight"], numerical_gradient(loss, layer.weight)), 1e-4
        )
        self.assertLess(
            relative_error(layer.grads["bias"], numerical_gradient(loss, layer.bias)), 1e-4
        )

    def test_wrong_channels_name_the_layer(self):
        layer = Conv2d(3, 4, 3)
        layer.name = "blocks.0.conv"
        with self.assertRaises(DimensionError) as context:
            layer.forward(np.zeros((1, 2, 5, 5)))
        self.assertIn("blocks.0.conv", str(context.exception))

    def test_kernel_larger_than_input(self):
        with self.assertRaises(DimensionError):
            Conv2d(1, 1, 5).output_shape((1, 3, 3))

    def test_kaiming_bound(self):
        weights = kaiming_uniform((64, 8, 3, 3), 72, self.rng)
        self.assertLessEqual(np.abs(weights).max(), np.sqrt(6.0 / 72))

    def test_unseeded_layers_start_at_zero(self):
        self.assertFalse(Conv2d(2, 2, 3).weight.any())

    def test_all_ones_kernel_sums_its_window(self):
        layer = Conv2d(1, 1, 3, bias=False)
        layer.weight = np.ones((1, 1, 3, 3))
        out = layer.forward(np.ones((1, 1, 3, 3)))
        self.assertEqual(out.shape, (1, 1, 1, 1))
        self.assertEqual(out[0, 0, 0, 0], 9.0)


class BatchNormTests(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(5)
        self.layer = BatchNorm2d(3)
        self.layer.weight = self.rng.uniform(0.5, 1.5, 3)
        self.layer.bias = self.rng.normal(size=3)

    def test_training_backward(self):
        x = self.rng.normal(size=(4, 3, 3, 3))
        upstream = self.rng.normal(size=x.shape)

        def loss():
            return float((self.layer.forward(x, train=True) * upstream).sum())

        self.layer.forward(x, train=True)
        dx = self.layer.backward(upstream)
        self.assertLess(relative_error(dx, numerical_gradient(loss, x)), 1e-4)
        self.assertLess(
            relative_error(self.layer.grads["weight"],
                           numerical_gradient(loss, self.layer.weight)), 1e-4
        )

    def test_running_statistics_use_unbiased_variance(self):
        x = self.rng.normal(size=(2, 3, 2, 2))
        self.layer.forward(x, train=True)
        unbiased = x.var(axis=(0, 2, 3), ddof=1)
        np.testing.assert_allclose(self.layer.running_var, 0.9 + 0.1 * unbiased)
        np.testing.assert_allclose(self.layer.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))

    def test_evaluation_uses_running_statistics(self):
        x = self.rng.normal(size=(2, 3, 2, 2))
        out = self.layer.forward(x, train=False)
        expected = (x / np.sqrt(1 + 1e-5)) * self.layer.weight[None, :, None, None] \
            + self.layer.bias[None, :, None, None]
        np.testing.assert_allclose(out, expected)


class DenseAndPoolTests(unittest.TestCase):

    def test_dense_backward(self):
        rng = np.random.default_rng(1)
        layer = Dense(5, 3, rng=rng)
        x = rng.normal(size=(4, 5))
        upstream = rng.normal(size=(4, 3))

        def loss():
            return float((layer.forward(x) * upstream).sum())

        layer.forward(x)
        dx = layer.backward(upstream)
        self.assertLess(relative_error(dx, numerical_gradient(loss, x)), 1e-6)
        self.assertLess(
            relative_error(layer.grads["weight"], numerical_gradient(loss, layer.weight)), 1e-6
        )

    def test_pool_backward_spreads_evenly(self):
        pool = GlobalAvgPool()
        pool.forward(np.zeros((1, 2, 2, 2)))
        grad = pool.backward(np.array([[4.0, 8.0]]))
        np.testing.assert_array_equal(grad[0, 0], np.ones((2, 2)))
        np.testing.assert_array_equal(grad[0, 1], 2 * np.ones((2, 2)))


class BlockTests(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(11)

    def _basic_block(self, in_channels, out_channels, stride):
        block = BasicBlock(
            Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False,
                   prunable=True, rng=self.rng),
            BatchNorm2d(out_channels),
            Conv2d(out_channels, out_channels, 3, padding=1, bias=False, rng=self.rng),
            BatchNorm2d(out_channels),
        )
        block.set_name("blocks.1")
        return block

    def test_shortcut_pads_channels(self):
        block = self._basic_block(2, 4, 2)
        x = self.rng.normal(size=(1, 2, 4, 4))
        identity = block.shortcut(x)
        self.assertEqual(identity.shape, (1, 4, 2, 2))
        np.testing.assert_array_equal(identity[:, 1:3], x[:, :, ::2, ::2])
        self.assertFalse(identity[:, 0].any() or identity[:, 3].any())

    def test_residual_backward(self):
        for in_channels, out_channels, stride in ((3, 3, 1), (2, 4, 2)):
            block = self._basic_block(in_channels, out_channels, stride)
            x = self.rng.normal(size=(3, in_channels, 4, 4))
            out_shape = block.forward(x, train=True).shape
            upstream = self.rng.normal(size=out_shape)

            def loss():
                return float((block.forward(x, train=True) * upstream).sum())

            block.forward(x, train=True)
            dx = block.backward(upstream)
            self.assertLess(relative_error(dx, numerical_gradient(loss, x)), 1e-4)
            self.assertLess(
                relative_error(block.conv1.grads["weight"],
                               numerical_gradient(loss, block.conv1.weight)), 1e-4
            )

    def test_narrowing_block_is_rejected(self):
        with self.assertRaises(DimensionError):
            BasicBlock(Conv2d(4, 2, 3), BatchNorm2d(2), Conv2d(2, 2, 3), BatchNorm2d(2))

    def test_conv_block_names(self):
        block = ConvBlock(Conv2d(1, 2, 3), BatchNorm2d(2))
        block.set_name("blocks.3")
        self.assertEqual([layer.name for layer in block.leaves()],
                         ["blocks.3.conv", "blocks.3.bn"])

    def test_zeroed_channel_gets_no_downstream_gradient(self):
        model = Model(
            [ConvBlock(Conv2d(3, 2, 3, padding=1, rng=self.rng), stage=0),
             ConvBlock(Conv2d(2, 3, 3, padding=1, rng=self.rng), stage=1)],
            classifier=Dense(3, 4, rng=self.rng), input_shape=(3, 6, 6),
        )
        model.blocks[0].conv.weight[1] = 0.0
        model.blocks[0].conv.bias[1] = 0.0
        images = self.rng.normal(size=(4, 3, 6, 6))
        _, gradients = backward(model, images, np.array([0, 1, 2, 3]))
        weight_gradient = gradients["blocks.1.conv.weight"]
        self.assertFalse(weight_gradient[:, 1].any())
        self.assertTrue(weight_gradient[:, 0].any())


if __name__ == "__main__":
    unittest.main()
