import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedmpq.quant import QuantizedLayer, ScalePolicy, dequantize, quantize
from fedmpq.server import (
    BudgetLedger,
    ClientUpdate,
    aggregate,
    aggregation_weights,
    binary_representation,
    convert_to_fp,
    pruning_growing,
    round_bitwidths,
)


def make_update(client_id, weights, bits, num_samples, budget, policy=ScalePolicy.RANGE_COVERING):
    layers = tuple(quantize(w, b, policy) for w, b in zip(weights, bits))
    biases = tuple(np.zeros(w.shape[0]) for w in weights)
    return ClientUpdate(
        client_id=client_id,
        layers=layers,
        biases=biases,
        bit_widths=tuple(bits),
        num_samples=num_samples,
        budget=budget,
    )


class TestConvertToFp:
    def test_one_bit_values(self):
        layer = QuantizedLayer.from_codes(np.array([[0, 1]]), 2.5, 1)
        update = ClientUpdate(0, (layer,), (np.zeros(1),), (1,), 10, 2.0)
        np.testing.assert_array_equal(convert_to_fp(update)[0], [[-2.5, 0.0]])

    def test_matches_dequantize(self):
        rng = np.random.default_rng(0)
        update = make_update(0, [rng.normal(size=(4, 3))], [5], 10, 4.0)
        np.testing.assert_array_equal(convert_to_fp(update)[0], dequantize(update.layers[0]))

    def test_round_trip_bound(self):
        rng = np.random.default_rng(1)
        w = rng.normal(size=(6, 4))
        update = make_update(0, [w], [6], 10, 6.0)
        layer = update.layers[0]
        clipped = np.clip(w, layer.min_value, layer.max_value)
        assert np.abs(convert_to_fp(update)[0] - clipped).max() <= 0.5 * layer.step + 1e-12


class TestAggregate:
    def test_single_client_identity(self):
        rng = np.random.default_rng(2)
        update = make_update(3, [rng.normal(size=(4, 4))], [4], 50, 4.0)
        result = aggregate([update], round_index=7)
        np.testing.assert_array_equal(result.weights[0], dequantize(update.layers[0]))
        np.testing.assert_array_equal(result.bit_widths, [4.0])
        assert result.round_index == 7

    def test_weighting_formula(self):
        # v = {2, 8}, |D| = {100, 100} gives p = {0.2, 0.8}.
        rng = np.random.default_rng(3)
        a = make_update(0, [rng.normal(size=(3, 3))], [2], 100, 2.0)
        b = make_update(1, [rng.normal(size=(3, 3))], [8], 100, 8.0)
        p = aggregation_weights([a, b])
        np.testing.assert_allclose(p, [0.2, 0.8])
        result = aggregate([a, b])
        expected = 0.2 * dequantize(a.layers[0]) + 0.8 * dequantize(b.layers[0])
        np.testing.assert_allclose(result.weights[0], expected)
        np.testing.assert_allclose(result.bit_widths, [0.2 * 2 + 0.8 * 8])

    def test_equal_budgets_plain_average(self):
        rng = np.random.default_rng(4)
        ups = [make_update(i, [rng.normal(size=(3, 3))], [4], 25, 4.0) for i in range(4)]
        result = aggregate(ups)
        expected = sum(dequantize(u.layers[0]) for u in ups) / 4
        np.testing.assert_allclose(result.weights[0], expected)

    def test_order_invariance(self):
        rng = np.random.default_rng(5)
        ups = [make_update(i, [rng.normal(size=(3, 3))], [4], 10 + i, 4.0) for i in range(3)]
        forward_order = aggregate(ups)
        reverse_order = aggregate(ups[::-1])
        np.testing.assert_array_equal(forward_order.weights[0], reverse_order.weights[0])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            aggregate([])

    def test_weights_sum_to_one(self):
        rng = np.random.default_rng(6)
        ups = [
            make_update(i, [rng.normal(size=(2, 2))], [3], int(rng.integers(1, 500)), float(rng.integers(1, 9)))
            for i in range(6)
        ]
        assert aggregation_weights(ups).sum() == pytest.approx(1.0)
        assert (aggregation_weights(ups) > 0).all()


class TestRoundBitwidths:
    def test_integers_pass_through(self):
        np.testing.assert_array_equal(round_bitwidths([4.0]), [4])

    def test_half_to_even(self):
        np.testing.assert_array_equal(round_bitwidths([4.5, 5.5]), [4, 6])

    def test_nearest_and_clamp(self):
        np.testing.assert_array_equal(round_bitwidths([2.3, 7.9]), [2, 8])
        np.testing.assert_array_equal(round_bitwidths([0.2, 9.7]), [1, 8])


class TestPruningGrowing:
    def test_on_budget_unchanged(self):
        out = pruning_growing([4, 4], [0, 0], [10, 10], 4.0)
        np.testing.assert_array_equal(out, [4, 4])

    def test_hand_traced_pruning(self):
        # m = {100, 10}, start {4, 4}, budget 3: layer 0 is decremented
        # twice (4.0 -> 3.09 -> 2.18) and nothing grows back.
        out = pruning_growing([4, 4], [0, 0], [100, 10], 3.0)
        np.testing.assert_array_equal(out, [2, 4])

    def test_growing_saturates_at_cap(self):
        out = pruning_growing([8, 8, 8], [0, 0, 0], [5, 5, 5], 9.0)
        np.testing.assert_array_equal(out, [8, 8, 8])

    def test_growing_never_touches_top_priority_layer(self):
        out = pruning_growing([2, 2], [0, 0], [100, 10], 8.0)
        assert out[0] == 2
        assert out[1] == 8

    def test_reduction_history_reorders_priority(self):
        # Equal sizes: the layer pruned more locally is cut first.
        out = pruning_growing([4, 4], [0, 1], [50, 50], 3.5)
        np.testing.assert_array_equal(out, [4, 3])

    def test_priority_tie_prefers_lower_index(self):
        out = pruning_growing([4, 4], [0, 0], [50, 50], 3.5)
        np.testing.assert_array_equal(out, [3, 4])

    def test_fixed_point_when_exactly_on_budget(self):
        m = [100, 10]
        first = pruning_growing([4, 4], [0, 0], m, 3.0)
        v = float(first @ np.asarray(m)) / sum(m)
        if v == 3.0:
            second = pruning_growing(first, [0, 0], m, 3.0)
            np.testing.assert_array_equal(second, first)

    @given(st.integers(0, 100_000))
    @settings(max_examples=200)
    def test_random_instances_satisfy_postconditions(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 8))
        bits = rng.integers(1, 9, n)
        delta = rng.integers(0, 4, n)
        m = rng.integers(1, 10_000, n)
        budget = float(rng.integers(1, 9))
        out = pruning_growing(bits, delta, m, budget)
        assert out.min() >= 1 and out.max() <= 8
        avg = float(out @ m) / m.sum()
        start = float(bits @ m) / m.sum()
        if start > budget:
            assert avg <= budget + 1e-12
        elif start < budget:
            assert avg < budget + m.max() / m.sum() + 1e-12
        else:
            np.testing.assert_array_equal(out, bits)
        np.testing.assert_array_equal(out, pruning_growing(bits, delta, m, budget))


class TestBinaryRepresentation:
    def test_round_trip_bound(self):
        rng = np.random.default_rng(9)
        weights = [rng.normal(size=(5, 4)), rng.normal(size=(3, 5))]
        layers = binary_representation(weights, [4, 6])
        for w, layer in zip(weights, layers):
            clipped = np.clip(w, layer.min_value, layer.max_value)
            assert np.abs(dequantize(layer) - clipped).max() <= 0.5 * layer.step + 1e-12

    def test_zero_layer_degenerate_scale(self):
        layers = binary_representation([np.zeros((2, 2))], [4])
        assert layers[0].scale == 1.0

    def test_initialization_uses_uniform_budget(self):
        rng = np.random.default_rng(10)
        weights = [rng.normal(size=(4, 4)), rng.normal(size=(2, 4))]
        layers = binary_representation(weights, [3, 3])
        assert [l.bit_width for l in layers] == [3, 3]
        assert [l.zero_point for l in layers] == [4, 4]


class TestBudgetLedger:
    def test_records_reductions(self):
        ledger = BudgetLedger()
        ledger.record(2, [4, 4], [4, 2])
        np.testing.assert_array_equal(ledger.get(2, 2), [0, 2])

    def test_default_is_zero(self):
        ledger = BudgetLedger()
        np.testing.assert_array_equal(ledger.get(5, 3), [0, 0, 0])

    def test_rejects_width_growth(self):
        ledger = BudgetLedger()
        with pytest.raises(ValueError):
            ledger.record(0, [4, 4], [5, 4])


class TestClientUpdateValidation:
    def test_bit_widths_must_match_layers(self):
        layer = quantize(np.ones((2, 2)), 4)
        with pytest.raises(ValueError):
            ClientUpdate(0, (layer,), (np.zeros(2),), (3,), 10, 4.0)

    def test_budget_check_allows_one_growing_step(self):
        update = make_update(0, [np.ones((10, 10)), np.ones((2, 5))], [5, 8], 10, 5.0)
        update.check_budget(np.array([100, 10]))

    def test_budget_check_rejects_blowout(self):
        update = make_update(0, [np.ones((10, 10)), np.ones((2, 5))], [8, 8], 10, 2.0)
        with pytest.raises(ValueError):
            update.check_budget(np.array([100, 10]))
