import unittest
from collections import defaultdict

import numpy as np

from electroprune.electrostatics import (
    COULOMB_CONSTANT,
    FilterCharge,
    charge,
    filter_sign,
    filter_table,
    force,
    force_fields,
    layer_force_field,
    minimum_distance,
    penalty,
    penalty_from_table,
    penalty_gradient,
    select_source,
)
from tests.test_fixtures import (
    filter_weights,
    numerical_gradient,
    prunable_conv,
    relative_error,
    tiny_resnet,
    tiny_vgg,
)


class ChargeTests(unittest.TestCase):

    def test_coulomb_constant(self):
        self.assertEqual(COULOMB_CONSTANT, 8.99e9)

    def test_sign_is_majority_of_entry_signs(self):
        self.assertEqual(filter_sign(np.array([0.1, 0.2, -5.0])), 1)
        self.assertEqual(filter_sign(np.array([-0.1, -0.2, 5.0])), -1)
        self.assertEqual(filter_sign(np.array([1.0, -1.0, 0.0])), 0)
        self.assertEqual(filter_sign(np.zeros(4)), 0)

    def test_charge(self):
        value = charge(np.array([-1.0, -2.0, 0.5]))
        self.assertEqual(value, FilterCharge(sign=-1, magnitude=3.5))
        self.assertEqual(value.charge, -3.5)

    def test_source_ties_go_to_lowest_index(self):
        charges = [FilterCharge(1, 2.0), FilterCharge(-1, 3.0), FilterCharge(1, 3.0)]
        self.assertEqual(select_source(charges), 1)


class ForceTests(unittest.TestCase):
    """Small cases worked out by hand."""

    def setUp(self):
        self.source = FilterCharge(1, 3.0)

    def test_no_force_on_the_source(self):
        self.assertEqual(force(self.source, self.source, 0, 0), 0.0)

    def test_no_force_on_neutral_filters(self):
        self.assertEqual(force(self.source, FilterCharge(0, 2.0), 1, 0), 0.0)

    def test_like_charges_feel_more_force(self):
        like = force(self.source, FilterCharge(1, 1.0), 1, 0, k_e=1.0)
        unlike = force(self.source, FilterCharge(-1, 1.0), 1, 0, k_e=1.0)
        self.assertAlmostEqual(like, 3.0 / 4.0)
        self.assertAlmostEqual(unlike, 3.0 / 16.0)
        self.assertGreater(like, unlike)

    def test_coincident_charges_are_clamped(self):
        value = force(self.source, FilterCharge(1, 3.0), 1, 0, k_e=1.0)
        self.assertTrue(np.isfinite(value))
        self.assertAlmostEqual(value, 9.0 / minimum_distance(3.0) ** 2)

    def test_clamp_scale(self):
        self.assertEqual(minimum_distance(0.2), 1e-3)
        self.assertEqual(minimum_distance(-40.0), 4e-2)

    def test_constant_must_be_positive(self):
        with self.assertRaises(ValueError):
            force(self.source, FilterCharge(1, 1.0), 1, 0, k_e=0)

    def test_opposite_charges(self):
        value = force(FilterCharge(1, 5.0), FilterCharge(-1, 3.0), 1, 0)
        self.assertAlmostEqual(value / 2.10703125e9, 1.0, delta=1e-12)

    def test_repulsion_dominates_over_random_pairs(self):
        rng = np.random.default_rng(4)
        for trial in range(500):
            weaker, stronger = np.sort(10 ** rng.uniform(-2, 2, size=2))
            if weaker == stronger:
                continue
            sign = int(rng.choice([-1, 1]))
            source = FilterCharge(sign, stronger)
            like = force(source, FilterCharge(sign, weaker), 1, 0)
            unlike = force(source, FilterCharge(-sign, weaker), 1, 0)
            self.assertGreater(like, unlike, f"trial {trial}")


class ForceFieldTests(unittest.TestCase):

    def setUp(self):
        self.layer = prunable_conv(filter_weights(
            [0.5, 0.5, 0.0],     # +1.0
            [2.0, 1.0, -0.5],    # +3.5, the source
            [-1.0, -0.5, 0.5],   # -2.0
            [1.0, -1.0, 0.0],    # neutral
        ))

    def test_field(self):
        field = layer_force_field(self.layer, k_e=1.0, timestamp=7)
        self.assertEqual(field.source_index, 1)
        self.assertEqual(field.timestamp, 7)
        np.testing.assert_array_equal(field.signs, [1, 1, -1, 0])
        np.testing.assert_allclose(field.charges, [1.0, 3.5, -2.0, 0.0])
        np.testing.assert_allclose(field.forces, [3.5 / 2.5 ** 2, 0.0, 7.0 / 5.5 ** 2, 0.0])

    def test_forces_match_the_scalar_rule(self):
        field = layer_force_field(self.layer)
        charges = field.filter_charges()
        for index, value in enumerate(field.forces):
            self.assertAlmostEqual(
                value, force(charges[1], charges[index], index, 1), delta=1e-6 * max(value, 1)
            )

    def test_all_zero_layer(self):
        self.layer.weight[:] = 0
        with self.assertLogs("electroprune", level="WARNING"):
            field = layer_force_field(self.layer)
        self.assertEqual(field.total(), 0.0)

    def test_exempt_layers_have_no_field(self):
        model = tiny_vgg()
        with self.assertRaises(ValueError):
            layer_force_field(model.conv_layers()[0])

    def test_every_prunable_layer_has_a_field(self):
        model = tiny_resnet()
        self.assertEqual(sorted(force_fields(model)),
                         sorted(layer.name for layer in model.prunable_layers()))

    def test_forces_are_unchanged_by_scaling_the_weights(self):
        rng = np.random.default_rng(6)
        checked = 0
        for trial in range(100):
            weights = rng.normal(size=(5, 2, 1, 3))
            scale = rng.uniform(0.05, 1.0)
            base = layer_force_field(prunable_conv(weights))
            scaled = layer_force_field(prunable_conv(scale * weights))
            top = np.sort(base.magnitudes)[-2:]
            if top[1] - top[0] < 1e-6:
                continue
            if (base.distances[base.active] <= base.r_min).any() \
                    or (scaled.distances[scaled.active] <= scaled.r_min).any():
                continue
            self.assertEqual(scaled.source_index, base.source_index)
            np.testing.assert_allclose(scaled.forces, base.forces, rtol=1e-9, atol=0)
            checked += 1
        self.assertGreater(checked, 80)

    def test_shrinking_a_filter_keeps_its_sign_and_the_source(self):
        rng = np.random.default_rng(8)
        for trial in range(200):
            weights = rng.normal(size=(4, 2, 3, 3))
            base = layer_force_field(prunable_conv(weights))
            n = int(rng.choice(np.flatnonzero(np.arange(4) != base.source_index)))
            weights[n] *= rng.uniform(1e-3, 1.0)
            scaled = layer_force_field(prunable_conv(weights))
            self.assertEqual(scaled.source_index, base.source_index, f"trial {trial}")
            self.assertEqual(scaled.signs[n], base.signs[n], f"trial {trial}")


class PenaltyGradientTests(unittest.TestCase):
    """The closed-form gradient of the penalty with the field held fixed."""

    def test_closed_form_over_random_layers(self):
        rng = np.random.default_rng(0)
        alpha_e = 1e-12
        for trial in range(100):
            filters = rng.integers(2, 7)
            weights = rng.normal(size=(filters, rng.integers(1, 4), 3, 3))
            layer = prunable_conv(weights)
            field = layer_force_field(layer)
            gradient = penalty_gradient(layer, field, alpha_e)

            q1 = abs(field.source_charge)
            expected = np.zeros_like(weights)
            for n in range(filters):
                if n == field.source_index or field.signs[n] == 0:
                    continue
                r = max(abs(field.charges[field.source_index] - field.charges[n]), field.r_min)
                expected[n] = alpha_e * COULOMB_CONSTANT * q1 / r ** 2 * np.sign(weights[n])
            np.testing.assert_allclose(gradient, expected, rtol=1e-12, atol=0)

            def surrogate():
                magnitudes = np.abs(layer.weight).sum(axis=(1, 2, 3))
                distances = np.maximum(field.distances, field.r_min)
                return float(alpha_e * COULOMB_CONSTANT * q1
                             * (magnitudes * field.active / distances ** 2).sum())

            numeric = numerical_gradient(surrogate, layer.weight)
            self.assertLess(relative_error(gradient, numeric), 1e-6, f"trial {trial}")

    def test_zero_rate_gives_zero_gradient(self):
        layer = prunable_conv(np.random.default_rng(1).normal(size=(4, 2, 3, 3)))
        gradient = penalty_gradient(layer, layer_force_field(layer), 0.0)
        self.assertFalse(gradient.any())

    def test_field_must_match_layer(self):
        layer = prunable_conv(np.ones((2, 1, 1, 1)))
        field = layer_force_field(layer)
        other = prunable_conv(np.ones((2, 1, 1, 1)), name="blocks.2.conv")
        with self.assertRaises(ValueError):
            penalty_gradient(other, field, 1.0)

    def test_hand_worked_gradient(self):
        layer = prunable_conv(filter_weights([3.0, 2.0, 2.0], [1.0, 1.0, 1.0]))
        field = layer_force_field(layer)
        gradient = penalty_gradient(layer, field, 1e-11)
        self.assertEqual(field.source_index, 0)
        self.assertFalse(gradient[0].any())
        np.testing.assert_allclose(gradient[1], np.full((1, 1, 3), 0.03933125), rtol=1e-12)


class FilterTableTests(unittest.TestCase):

    def setUp(self):
        self.model = tiny_resnet(seed=3)
        self.rows = filter_table(self.model)

    def test_one_source_per_layer(self):
        sources = defaultdict(int)
        for row in self.rows:
            sources[row["layer"]] += row["is_source"]
            if row["is_source"]:
                self.assertEqual(row["normalized_l1"], 1.0)
                self.assertEqual(row["force"], 0.0)
        self.assertEqual(set(sources.values()), {1})

    def test_penalty_recomputes_from_rows(self):
        expected = penalty(self.model)
        self.assertAlmostEqual(penalty_from_table(self.rows) / expected, 1.0, delta=1e-9)

    def test_rows_cover_every_filter(self):
        filters = sum(layer.out_channels for layer in self.model.prunable_layers())
        self.assertEqual(len(self.rows), filters)


if __name__ == "__main__":
    unittest.main()
