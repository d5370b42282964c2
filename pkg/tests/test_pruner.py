import unittest

import numpy as np

from electroprune.exceptions import ConfigurationError, DependencyError, PruningError
from electroprune.layers import Conv2d, ConvBlock
from electroprune.network import Model, build_model, count_flops, count_params, forward
from electroprune.pruner import (
    PruningPlan,
    PruningRatios,
    apply_plan,
    build_plan,
    parse_ratios,
    prune,
    prune_report,
    rank_filters,
    speedup,
    uniform_ratios,
)
from tests.test_fixtures import (
    filter_weights,
    plain_model,
    prunable_conv,
    randomise_batch_norm,
    tiny_resnet,
    tiny_vgg,
)


class RankingTests(unittest.TestCase):

    def test_smallest_norm_first(self):
        layer = prunable_conv(filter_weights([3.0], [1.0], [-2.0]))
        self.assertEqual([index for index, _ in rank_filters(layer)], [1, 2, 0])

    def test_equal_norms_keep_index_order(self):
        layer = prunable_conv(filter_weights([1.0], [-1.0], [1.0], [0.5]))
        self.assertEqual([index for index, _ in rank_filters(layer)], [3, 0, 1, 2])


class RatioParsingTests(unittest.TestCase):

    def test_stage_list(self):
        ratios = parse_ratios("0,0.52,0.52,0.52,0", "resnet")
        self.assertEqual(ratios.values, (0.0, 0.52, 0.52, 0.52, 0.0))

    def test_layer_map_with_ranges(self):
        ratios = parse_ratios("0:0,1-15:0.65", "vgg")
        self.assertEqual(len(ratios.values), 16)
        self.assertEqual(ratios.values[0], 0.0)
        self.assertEqual(ratios.values[15], 0.65)

    def test_malformed(self):
        for text in ("a,b", "1-:0.5", "0:0:1"):
            with self.assertRaises(ConfigurationError, msg=text):
                parse_ratios(text, "vgg")

    def test_layer_map_for_residual_models(self):
        with self.assertRaises(ConfigurationError):
            parse_ratios("0:0,1-2:0.5", "resnet")

    def test_ratio_of_one(self):
        with self.assertRaises(PruningError):
            PruningRatios("resnet", (0.0, 1.0, 0.0))


class PlanTests(unittest.TestCase):

    def test_floor_counts(self):
        model = plain_model([4, 100, 10])
        plan = build_plan(model, PruningRatios("vgg", {1: 0.29, 2: 0.99}))
        self.assertEqual(len(plan.keep["blocks.1.conv"]), 71)
        self.assertEqual(len(plan.keep["blocks.2.conv"]), 1)

    def test_small_layer_rounds_down(self):
        model = plain_model([4, 3, 4])
        plan = build_plan(model, PruningRatios("vgg", {1: 0.5}))
        self.assertEqual(len(plan.keep["blocks.1.conv"]), 2)
        self.assertEqual(len(plan.keep["blocks.2.conv"]), 4)

    def test_kept_filters_are_the_largest(self):
        model = plain_model([2, 4, 2])
        model.blocks[1].conv.weight = np.stack(
            [np.full((2, 3, 3), value) for value in (0.4, 0.1, 0.3, 0.2)]
        )
        plan = build_plan(model, PruningRatios("vgg", {1: 0.5}))
        self.assertEqual(plan.keep["blocks.1.conv"], (0, 2))

    def test_exempt_layer_with_ratio(self):
        with self.assertRaises(PruningError):
            build_plan(tiny_vgg(), parse_ratios("0:0.5", "vgg"))
        with self.assertRaises(PruningError):
            build_plan(tiny_resnet(), parse_ratios("0.5,0.5,0.5,0", "resnet"))

    def test_stage_count_must_match(self):
        with self.assertRaises(PruningError):
            build_plan(tiny_resnet(), parse_ratios("0,0.5,0", "resnet"))

    def test_family_must_match(self):
        with self.assertRaises(PruningError):
            build_plan(tiny_vgg(), parse_ratios("0,0.5,0.5,0", "resnet"))

    def test_yaml_document(self):
        plan = build_plan(tiny_resnet(), parse_ratios("0,0.5,0.5,0", "resnet"))
        restored = PruningPlan.from_yaml(plan.to_yaml())
        self.assertEqual(restored.keep, plan.keep)
        self.assertEqual(restored.widths, plan.widths)
        self.assertEqual(restored.consumers["blocks.1.conv1"], "blocks.1.conv2")


class ApplyTests(unittest.TestCase):

    def setUp(self):
        self.model = randomise_batch_norm(tiny_resnet(seed=2))
        self.images = np.random.default_rng(0).normal(size=(2, 3, 8, 8))

    def test_physical_shapes(self):
        pruned, plan = prune(self.model, "0,0.5,0.5,0")
        block = pruned.blocks[2]
        self.assertEqual(block.conv1.weight.shape, (4, 4, 3, 3))
        self.assertEqual(block.bn1.weight.shape, (4,))
        self.assertEqual(block.bn1.running_var.shape, (4,))
        self.assertEqual(block.conv2.weight.shape, (8, 4, 3, 3))
        keep = list(plan.keep["blocks.2.conv1"])
        np.testing.assert_array_equal(block.conv1.weight, self.model.blocks[2].conv1.weight[keep])
        np.testing.assert_array_equal(block.conv2.weight,
                                      self.model.blocks[2].conv2.weight[:, keep])
        self.assertEqual(forward(pruned, self.images).shape, (2, 4))

    def test_input_model_is_untouched(self):
        before = {name: value.copy() for name, value in self.model.parameters().items()}
        prune(self.model, "0,0.5,0.5,0")
        for name, value in self.model.parameters().items():
            np.testing.assert_array_equal(value, before[name])

    def test_identity_plan(self):
        pruned, plan = prune(self.model, "0,0,0,0")
        self.assertTrue(plan.is_identity())
        np.testing.assert_array_equal(forward(pruned, self.images), forward(self.model, self.images))
        self.assertEqual(speedup(self.model, pruned, (3, 8, 8)), 1.0)

    def test_zero_channels_prune_without_changing_logits(self):
        model = randomise_batch_norm(tiny_vgg(seed=5))
        for block, dead in ((model.blocks[1], [0, 2]), (model.blocks[2], [1, 4, 6, 7])):
            block.conv.weight[dead] = 0.0
            block.bn.weight[dead] = 0.0
            block.bn.bias[dead] = 0.0
        pruned, plan = prune(model, "1:0.5,2:0.5")
        self.assertEqual(plan.keep["blocks.1.conv"], (1, 3))
        np.testing.assert_allclose(forward(pruned, self.images), forward(model, self.images),
                                   rtol=0, atol=1e-9)

    def test_speedup_matches_hand_count(self):
        pruned, _ = prune(self.model, "0,0.5,0.5,0")
        self.assertEqual(count_flops(pruned, (3, 8, 8)), 46144)
        self.assertAlmostEqual(speedup(self.model, pruned, (3, 8, 8)), 78400 / 46144,
                               delta=1e-6)

    def test_halving_a_layer_halves_its_flops(self):
        rng = np.random.default_rng(1)
        model = Model([
            ConvBlock(Conv2d(3, 8, 3, prunable=True, rng=rng)),
            ConvBlock(Conv2d(8, 1, 1, rng=rng)),
        ])
        pruned, plan = prune(model, "0:0.5")
        self.assertEqual(len(plan.keep["blocks.0.conv"]), 4)
        self.assertEqual(count_flops(model, (3, 10, 10)), 28672)
        self.assertEqual(speedup(model, pruned, (3, 10, 10)), 2.0)

    def test_more_pruning_never_costs_more(self):
        model = build_model("toy-vgg", (3, 8, 8), 3, width=8, depth=3, seed=4)
        prunable = sorted(uniform_ratios(model, 0.0).values)
        rng = np.random.default_rng(12)

        def cost(ratios):
            pruned, _ = prune(model, PruningRatios("vgg", ratios))
            return count_params(pruned), count_flops(pruned, (3, 8, 8))

        for trial in range(30):
            pairs = np.sort(rng.uniform(0, 0.9, size=(len(prunable), 2)), axis=1)
            lighter = cost({index: float(low) for index, (low, _) in zip(prunable, pairs)})
            heavier = cost({index: float(high) for index, (_, high) in zip(prunable, pairs)})
            self.assertLessEqual(heavier[0], lighter[0], f"trial {trial}")
            self.assertLessEqual(heavier[1], lighter[1], f"trial {trial}")
        grid = [cost({index: ratio for index in prunable}) for ratio in np.arange(10) / 10]
        self.assertEqual(grid, sorted(grid, reverse=True))

    def test_report(self):
        pruned, plan = prune(self.model, "0,0.5,0.5,0")
        report = prune_report(self.model, pruned, plan, (3, 8, 8))
        self.assertIn("blocks.0.conv", report["exempt"])
        self.assertIn("blocks.1.conv2", report["exempt"])
        self.assertEqual(report["flops before"], 78400)
        self.assertEqual({row["layer"]: row["pruned"] for row in report["layers"]},
                         {"blocks.1.conv1": 2, "blocks.2.conv1": 4})
        self.assertLess(report["params after"], report["params before"])

    def test_mismatched_plan(self):
        plan = build_plan(self.model, parse_ratios("0,0.5,0.5,0", "resnet"))
        plan.widths["blocks.1.conv1"] = 99
        with self.assertRaises(PruningError):
            apply_plan(self.model, plan)

    def test_broken_dependency(self):
        model = tiny_vgg()
        plan = build_plan(model, PruningRatios("vgg", {1: 0.5}))
        model.blocks[2].conv.weight = np.zeros((8, 3, 3, 3))
        with self.assertRaises(DependencyError) as context:
            apply_plan(model, plan)
        self.assertIn("blocks.2.conv", str(context.exception))

    def test_random_ratios_always_forward(self):
        rng = np.random.default_rng(9)
        for trial in range(20):
            model = tiny_resnet(seed=trial) if trial % 2 else tiny_vgg(seed=trial)
            ratio = float(rng.uniform(0, 0.95))
            pruned, plan = prune(model, uniform_ratios(model, ratio))
            for name, keep in plan.keep.items():
                removed = int(np.floor(ratio * plan.widths[name] + 1e-9))
                self.assertEqual(len(keep), plan.widths[name] - removed)
            self.assertTrue(np.isfinite(forward(pruned, self.images)).all())
            for layer in model.conv_layers():
                if layer.name not in plan.keep:
                    self.assertEqual(pruned.named_layers()[layer.name].out_channels,
                                     layer.out_channels)


if __name__ == "__main__":
    unittest.main()
