"""Tensor core: forward oracles, backward rules, finite differences."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spaner.errors import DimensionError, NumericError
from spaner.tensor import (Parameter, Rng, Tensor, add, broadcast_rows, concat,
                           elementwise_max_over_tokens, grad_check, layer_norm,
                           matmul, narrow, no_grad, reshape, row_normalize,
                           scale, softmax_cross_entropy_rows, softmax_last,
                           transpose)


def central_difference(loss_fn, param, h=1e-6):
    """Independent numeric gradient for a single parameter."""
    flat = param.data.reshape(-1)
    out = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            kept = flat[i]
            flat[i] = kept + h
            up = loss_fn().item()
            flat[i] = kept - h
            down = loss_fn().item()
            flat[i] = kept
            out[i] = (up - down) / (2.0 * h)
    return out.reshape(param.data.shape)


def tape_gradient(loss_fn, param):
    param.zero_grad()
    loss_fn().backward()
    return param.grad.copy()


def assert_grads_match(loss_fn, param, tol=1e-6):
    analytic = tape_gradient(loss_fn, param)
    numeric = central_difference(loss_fn, param)
    np.testing.assert_allclose(analytic, numeric, rtol=tol, atol=tol)


class TestMatmul:
    def test_hand_multiplied_product(self):
        out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_identity_is_neutral(self):
        x = np.arange(6.0).reshape(2, 3)
        out = matmul(Tensor(x), Tensor(np.eye(3)))
        np.testing.assert_array_equal(out.data, x)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError) as err:
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
        assert "(2, 3)" in str(err.value) and "(4, 5)" in str(err.value)

    def test_vector_inputs_rejected(self):
        with pytest.raises(DimensionError):
            matmul(Tensor(np.zeros(3)), Tensor(np.zeros((3, 2))))

    def test_gradient_both_operands(self):
        rng = Rng(7)
        a = Parameter(rng.normal((3, 4)), "a")
        b = Parameter(rng.normal((4, 2)), "b")

        def loss():
            out = matmul(a, b)
            return softmax_cross_entropy_rows(out, [0, 1, 0])

        assert_grads_match(loss, a)
        assert_grads_match(loss, b)

    def test_gradient_batched_with_shared_matrix(self):
        rng = Rng(8)
        a = Parameter(rng.normal((2, 3, 4)), "a")
        w = Parameter(rng.normal((4, 4)), "w")

        def loss():
            out = reshape(matmul(a, w), (6, 4))
            return softmax_cross_entropy_rows(out, [0, 1, 2, 3, 0, 1])

        assert_grads_match(loss, a)
        assert_grads_match(loss, w)


class TestRowNormalize:
    def test_three_four_five_row(self):
        out = row_normalize(Tensor([[3.0, 4.0]]))
        np.testing.assert_allclose(out.data, [[0.6, 0.8]], atol=1e-15)

    def test_zero_row_passes_through_as_zero(self):
        out = row_normalize(Tensor([[0.0, 0.0, 0.0]]))
        np.testing.assert_array_equal(out.data, [[0.0, 0.0, 0.0]])

    def test_unit_row_unchanged(self):
        row = np.array([[1.0, 0.0]])
        np.testing.assert_allclose(row_normalize(Tensor(row)).data, row, atol=1e-15)

    def test_idempotent(self):
        rng = Rng(3)
        x = rng.normal((5, 4))
        once = row_normalize(Tensor(x)).data
        twice = row_normalize(Tensor(once)).data
        np.testing.assert_allclose(twice, once, atol=1e-12)

    @given(st.lists(st.floats(-50, 50), min_size=3, max_size=3),
           st.floats(0.1, 100.0))
    @settings(max_examples=50, deadline=None)
    def test_scale_invariant_for_nonzero_rows(self, row, factor):
        base = np.array([row])
        if np.linalg.norm(base) < 1e-6:
            return
        a = row_normalize(Tensor(base)).data
        b = row_normalize(Tensor(base * factor)).data
        np.testing.assert_allclose(a, b, atol=1e-10)

    def test_rejects_non_matrix(self):
        with pytest.raises(DimensionError):
            row_normalize(Tensor(np.zeros(4)))

    def test_gradient(self):
        p = Parameter(Rng(5).normal((4, 3)), "p")

        def loss():
            return softmax_cross_entropy_rows(row_normalize(p), [0, 1, 2, 0])

        assert_grads_match(loss, p)

    def test_gradient_is_tangential(self):
        # moving along the row direction cannot change the normalized row
        p = Parameter([[3.0, 4.0]], "p")

        def loss():
            return softmax_cross_entropy_rows(row_normalize(p), [0])

        g = tape_gradient(loss, p)
        assert abs((g @ p.data.T).item()) < 1e-12


class TestSoftmaxCrossEntropyRows:
    def test_single_certain_row_is_zero(self):
        loss = softmax_cross_entropy_rows(Tensor([[5.0]]), [0])
        assert loss.item() == 0.0

    def test_uniform_logits_give_log_batch(self):
        for b in (2, 3, 7):
            loss = softmax_cross_entropy_rows(Tensor(np.zeros((b, b))), range(b))
            assert loss.item() == pytest.approx(math.log(b), abs=1e-12)

    def test_identity_logits_two_rows(self):
        loss = softmax_cross_entropy_rows(Tensor([[1.0, 0.0], [0.0, 1.0]]), [0, 1])
        assert loss.item() == pytest.approx(math.log(1.0 + math.exp(-1.0)), abs=1e-12)

    def test_matches_direct_arithmetic(self):
        rng = Rng(11)
        logits = rng.normal((5, 5)) * 3.0
        targets = [3, 0, 4, 1, 1]
        expected = 0.0
        for i, t in enumerate(targets):
            row = logits[i]
            expected -= math.log(math.exp(row[t]) / sum(math.exp(v) for v in row))
        expected /= len(targets)
        loss = softmax_cross_entropy_rows(Tensor(logits), targets)
        assert loss.item() == pytest.approx(expected, abs=1e-12)

    def test_stable_for_huge_logits(self):
        loss = softmax_cross_entropy_rows(Tensor([[1000.0, 0.0], [0.0, 1000.0]]), [0, 1])
        assert loss.item() == 0.0

    def test_out_of_range_target(self):
        with pytest.raises(IndexError) as err:
            softmax_cross_entropy_rows(Tensor(np.zeros((2, 2))), [0, 2])
        assert "2" in str(err.value)

    def test_target_count_mismatch(self):
        with pytest.raises(DimensionError):
            softmax_cross_entropy_rows(Tensor(np.zeros((3, 3))), [0, 1])

    def test_gradient(self):
        p = Parameter(Rng(13).normal((4, 6)), "p")

        def loss():
            return softmax_cross_entropy_rows(p, [5, 0, 2, 2])

        assert_grads_match(loss, p)

    def test_gradient_rows_sum_to_zero(self):
        # softmax grad per row is (p - onehot), which sums to zero
        p = Parameter(Rng(17).normal((3, 4)), "p")

        def loss():
            return softmax_cross_entropy_rows(p, [1, 3, 0])

        g = tape_gradient(loss, p)
        np.testing.assert_allclose(g.sum(axis=1), 0.0, atol=1e-14)


class TestMaxOverTokens:
    def test_coordinatewise_max(self):
        seq = Tensor([[[1.0, 5.0], [3.0, 2.0], [3.0, 7.0]]])
        out = elementwise_max_over_tokens(seq)
        np.testing.assert_array_equal(out.data, [[3.0, 7.0]])

    def test_value_invariant_to_token_order(self):
        rng = Rng(19)
        seq = rng.normal((2, 5, 3))
        shuffled = seq[:, ::-1, :].copy()
        a = elementwise_max_over_tokens(Tensor(seq)).data
        b = elementwise_max_over_tokens(Tensor(shuffled)).data
        np.testing.assert_array_equal(a, b)

    def test_tie_routes_gradient_to_lowest_token(self):
        p = Parameter([[[2.0, 0.0], [2.0, 1.0], [1.0, 1.0]]], "p")

        def loss():
            pooled = elementwise_max_over_tokens(p)  # [[2, 1]]
            return softmax_cross_entropy_rows(pooled, [0])

        g = tape_gradient(loss, p)
        # coordinate 0 ties between tokens 0 and 1: only token 0 gets gradient
        assert g[0, 0, 0] != 0.0
        assert g[0, 1, 0] == 0.0
        # coordinate 1 ties between tokens 1 and 2: only token 1 gets gradient
        assert g[0, 1, 1] != 0.0
        assert g[0, 2, 1] == 0.0

    def test_empty_token_axis_rejected(self):
        with pytest.raises(DimensionError):
            elementwise_max_over_tokens(Tensor(np.zeros((2, 0, 3))))

    def test_gradient_away_from_ties(self):
        p = Parameter(Rng(23).normal((2, 4, 3)), "p")

        def loss():
            return softmax_cross_entropy_rows(elementwise_max_over_tokens(p), [0, 2])

        assert_grads_match(loss, p)


class TestSoftmaxLast:
    def test_rows_sum_to_one(self):
        out = softmax_last(Tensor(Rng(29).normal((2, 3, 4))))
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_gradient(self):
        p = Parameter(Rng(31).normal((3, 4)), "p")

        def loss():
            probs = softmax_last(p)
            return softmax_cross_entropy_rows(probs, [0, 1, 2])

        assert_grads_match(loss, p)


class TestLayerNorm:
    def test_normalizes_last_axis(self):
        x = Tensor(Rng(37).normal((2, 3, 8)) * 4.0 + 2.0)
        gain = Parameter(np.ones(8), "g")
        bias = Parameter(np.zeros(8), "b")
        out = layer_norm(x, gain, bias).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)

    def test_affine_shape_mismatch(self):
        with pytest.raises(DimensionError):
            layer_norm(Tensor(np.zeros((2, 4))), Parameter(np.ones(3), "g"),
                       Parameter(np.zeros(4), "b"))

    def test_gradient_all_three_inputs(self):
        rng = Rng(41)
        x = Parameter(rng.normal((2, 3, 5)), "x")
        gain = Parameter(1.0 + 0.1 * rng.normal((5,)), "gain")
        bias = Parameter(0.1 * rng.normal((5,)), "bias")

        def loss():
            out = reshape(layer_norm(x, gain, bias), (6, 5))
            return softmax_cross_entropy_rows(out, [0, 1, 2, 3, 4, 0])

        assert_grads_match(loss, x, tol=1e-5)
        assert_grads_match(loss, gain, tol=1e-5)
        assert_grads_match(loss, bias, tol=1e-5)


class TestShapeOps:
    def test_concat_and_narrow_roundtrip(self):
        rng = Rng(43)
        a, b = rng.normal((2, 1, 3)), rng.normal((2, 4, 3))
        joined = concat([Tensor(a), Tensor(b)], axis=1)
        np.testing.assert_array_equal(narrow(joined, 1, 0, 1).data, a)
        np.testing.assert_array_equal(narrow(joined, 1, 1, 4).data, b)

    def test_narrow_out_of_range(self):
        with pytest.raises(DimensionError):
            narrow(Tensor(np.zeros((2, 3))), 1, 2, 2)

    def test_concat_gradient_splits(self):
        rng = Rng(47)
        a = Parameter(rng.normal((2, 2, 3)), "a")
        b = Parameter(rng.normal((2, 1, 3)), "b")

        def loss():
            pooled = elementwise_max_over_tokens(concat([a, b], axis=1))
            return softmax_cross_entropy_rows(pooled, [0, 1])

        assert_grads_match(loss, a)
        assert_grads_match(loss, b)

    def test_transpose_gradient(self):
        p = Parameter(Rng(53).normal((2, 3, 4)), "p")

        def loss():
            out = reshape(transpose(p, (1, 0, 2)), (6, 4))
            return softmax_cross_entropy_rows(out, [0, 1, 2, 3, 0, 1])

        assert_grads_match(loss, p)

    def test_broadcast_rows_sums_gradient_over_batch(self):
        p = Parameter([[1.0, 2.0]], "p")

        def loss():
            tiled = broadcast_rows(p, 3)  # [3, 1, 2]
            return softmax_cross_entropy_rows(reshape(tiled, (3, 2)), [0, 0, 0])

        g = tape_gradient(loss, p)
        assert_grads_match(loss, p)
        # all three rows are identical, so the pooled grad is 3x one row's
        single = Parameter([[1.0, 2.0]], "q")

        def loss_one():
            return softmax_cross_entropy_rows(single, [0])

        np.testing.assert_allclose(g, tape_gradient(loss_one, single), atol=1e-12)


class TestAutogradPlumbing:
    def test_gradient_accumulates_across_uses(self):
        p = Parameter([[1.0, -1.0]], "p")

        def loss():
            return softmax_cross_entropy_rows(add(p, p), [0])

        # d(2p)/dp doubles the single-use gradient
        doubled = tape_gradient(loss, p)

        def loss_single():
            return softmax_cross_entropy_rows(scale(p, 2.0), [0])

        np.testing.assert_allclose(doubled, tape_gradient(loss_single, p), atol=1e-12)

    def test_gradient_accumulates_across_backward_calls(self):
        p = Parameter([[1.0, 0.0]], "p")

        def loss():
            return softmax_cross_entropy_rows(p, [0])

        once = tape_gradient(loss, p)
        loss().backward()  # no zeroing in between
        np.testing.assert_allclose(p.grad, 2.0 * once, atol=1e-15)

    def test_no_grad_blocks_recording(self):
        p = Parameter([[1.0, 0.0]], "p")
        with no_grad():
            out = softmax_cross_entropy_rows(p, [0])
        assert out._backward_fn is None and not out.requires_grad

    def test_backward_needs_scalar(self):
        with pytest.raises(DimensionError):
            Tensor(np.zeros((2, 2)), requires_grad=True).backward()

    def test_add_broadcast_bias_gradient(self):
        rng = Rng(59)
        x = Parameter(rng.normal((3, 4)), "x")
        b = Parameter(rng.normal((4,)), "b")

        def loss():
            return softmax_cross_entropy_rows(add(x, b), [0, 1, 2])

        assert_grads_match(loss, x)
        assert_grads_match(loss, b)


class TestGradCheck:
    def test_quadratic_is_exact(self):
        p = Parameter(Rng(61).normal((3, 2)), "p")

        def loss():
            return softmax_cross_entropy_rows(matmul(p, transpose(p)), [0, 1, 2])

        report = grad_check(loss, [p], h=1e-5)
        assert report.max_rel_error < 1e-6
        assert report.worst_param == "p"

    def test_frozen_parameter_skipped_with_zero_grad(self):
        live = Parameter(Rng(67).normal((2, 3)), "live")
        ice = Parameter(Rng(71).normal((3, 3)), "ice", frozen=True)

        def loss():
            return softmax_cross_entropy_rows(matmul(live, ice), [0, 1])

        report = grad_check(loss, [live, ice], h=1e-5)
        assert "ice" not in report.per_param
        assert np.all(ice.grad == 0.0)
        assert report.max_rel_error < 1e-6

    def test_nonfinite_loss_raises(self):
        p = Parameter([[1.0]], "p")

        def loss():
            return scale(p, math.inf) + Tensor(0.0)

        with pytest.raises(NumericError):
            grad_check(loss, [p])


class TestParameter:
    def test_freeze_clears_grad_and_stops_flow(self):
        p = Parameter([[1.0, 2.0]], "p")
        softmax_cross_entropy_rows(p, [0]).backward()
        assert np.any(p.grad != 0.0)
        p.freeze()
        assert np.all(p.grad == 0.0)
        softmax_cross_entropy_rows(p, [0]).backward()
        assert np.all(p.grad == 0.0)

    def test_copies_its_initial_value(self):
        source = np.ones((2, 2))
        p = Parameter(source, "p")
        source[0, 0] = 99.0
        assert p.data[0, 0] == 1.0


class TestRng:
    def test_same_seed_same_bytes(self):
        a = Rng(123).normal((4, 4))
        b = Rng(123).normal((4, 4))
        assert a.tobytes() == b.tobytes()

    def test_split_streams_are_distinct_and_reproducible(self):
        left1, right1 = Rng(9).split(2)
        left2, right2 = Rng(9).split(2)
        assert left1.normal((8,)).tobytes() == left2.normal((8,)).tobytes()
        assert right1.normal((8,)).tobytes() == right2.normal((8,)).tobytes()
        assert left1.normal((8,)).tobytes() != right1.normal((8,)).tobytes()

    def test_glorot_limit(self):
        w = Rng(77).glorot(30, 10)
        limit = math.sqrt(6.0 / 40.0)
        assert w.shape == (30, 10)
        assert np.all(np.abs(w) <= limit)

    def test_permutation_is_a_permutation(self):
        p = Rng(80).permutation(20)
        assert sorted(p.tolist()) == list(range(20))
