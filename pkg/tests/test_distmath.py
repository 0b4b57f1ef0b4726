"""Distribution algebra: closed-form softmax values, KL hand evaluations,
top-k selection against an exhaustive-sort oracle, and the L1 normalizer's
ratio preservation."""

import math

import numpy as np
import pytest

from mtdistill import diffcore as dc
from mtdistill.diffcore import backward
from mtdistill.distmath import (SparseScoreMatrix, TopKIndexSet, gather_topk,
                                kl_rows, l1_normalize_rows,
                                similarity_distribution, topk_indices)
from mtdistill.errors import ContractError

# softmax of logits {1, 0}: e / (e + 1)
P_HOT_1 = math.e / (math.e + 1.0)          # 0.73105857863...
# softmax of logits {2, 0}: e^2 / (e^2 + 1)
P_HOT_2 = math.e ** 2 / (math.e ** 2 + 1)  # 0.88079707797...


class TestSimilarityDistribution:
    def test_identity_rows_tau_1(self):
        out = similarity_distribution(np.eye(2), np.eye(2), 1.0)
        expected = [[P_HOT_1, 1 - P_HOT_1], [1 - P_HOT_1, P_HOT_1]]
        np.testing.assert_allclose(out.values, expected, atol=1e-4)
        np.testing.assert_allclose(out.values, [[0.7311, 0.2689], [0.2689, 0.7311]],
                                   atol=1e-4)

    def test_identity_rows_tau_half(self):
        out = similarity_distribution(np.eye(2), np.eye(2), 0.5)
        np.testing.assert_allclose(out.values, [[P_HOT_2, 1 - P_HOT_2],
                                                [1 - P_HOT_2, P_HOT_2]], atol=1e-10)
        np.testing.assert_allclose(out.values[0], [0.8808, 0.1192], atol=1e-4)

    def test_huge_temperature_is_uniform(self):
        out = similarity_distribution(np.eye(2), np.eye(2), 1e6)
        np.testing.assert_allclose(out.values, 0.25 + np.full((2, 2), 0.25), atol=1e-6)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        img = rng.standard_normal((7, 5))
        img /= np.linalg.norm(img, axis=1, keepdims=True)
        txt = rng.standard_normal((9, 5))
        txt /= np.linalg.norm(txt, axis=1, keepdims=True)
        out = similarity_distribution(img, txt, 0.3)
        np.testing.assert_allclose(out.values.sum(axis=1), 1.0, atol=1e-9)

    def test_shift_invariance(self):
        # adding a constant to all logits of a row leaves softmax unchanged
        rng = np.random.default_rng(1)
        logits = rng.standard_normal((4, 6))
        a = dc.row_softmax(dc.constant(logits)).values
        b = dc.row_softmax(dc.constant(logits + 13.7)).values
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_argmax_invariant_to_temperature(self):
        rng = np.random.default_rng(2)
        img = rng.standard_normal((8, 6))
        img /= np.linalg.norm(img, axis=1, keepdims=True)
        txt = rng.standard_normal((8, 6))
        txt /= np.linalg.norm(txt, axis=1, keepdims=True)
        argmaxes = [similarity_distribution(img, txt, t).values.argmax(axis=1)
                    for t in (0.05, 0.5, 5.0)]
        for other in argmaxes[1:]:
            np.testing.assert_array_equal(argmaxes[0], other)

    def test_bad_temperature(self):
        with pytest.raises(ContractError):
            similarity_distribution(np.eye(2), np.eye(2), 0.0)
        with pytest.raises(ContractError):
            similarity_distribution(np.eye(2), np.eye(2), -1.0)

    def test_dim_mismatch(self):
        with pytest.raises(ContractError):
            similarity_distribution(np.eye(2), np.eye(3), 1.0)

    def test_learnable_temperature_gets_gradient(self):
        log_tau = dc.parameter([[math.log(0.2)]])
        out = similarity_distribution(dc.constant(np.eye(2)), dc.constant(np.eye(2)),
                                      dc.exp(log_tau))
        backward(dc.total_sum(dc.mul(out, out)))
        assert log_tau.grad is not None and abs(log_tau.grad[0, 0]) > 0


class TestKlRows:
    def test_identity_is_zero(self):
        d = np.array([[0.2, 0.8], [0.6, 0.4]])
        assert kl_rows(d, d.copy()).item() == pytest.approx(0.0, abs=1e-12)

    def test_one_hot_vs_uniform_is_ln2(self):
        got = kl_rows(np.array([[1.0, 0.0]]), np.array([[0.5, 0.5]])).item()
        assert got == pytest.approx(math.log(2.0), abs=1e-6)

    def test_hand_evaluated_value(self):
        target = np.array([[P_HOT_1, 1 - P_HOT_1]])
        got = kl_rows(np.array([[0.5, 0.5]]), target).item()
        expected = 0.5 * math.log(0.5 / P_HOT_1) + 0.5 * math.log(0.5 / (1 - P_HOT_1))
        assert got == pytest.approx(expected, abs=1e-12)
        assert got == pytest.approx(0.1201, abs=2e-4)

    def test_nonnegative_on_random_pairs(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            d = rng.dirichlet(np.ones(5), size=4)
            e = rng.dirichlet(np.ones(5), size=4)
            assert kl_rows(d, e).item() >= -1e-12

    def test_zero_iff_equal(self):
        rng = np.random.default_rng(4)
        d = rng.dirichlet(np.ones(4), size=3)
        e = d.copy()
        e[1] = rng.dirichlet(np.ones(4))
        assert kl_rows(d, e).item() > 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            kl_rows(np.ones((2, 2)) / 2, np.ones((2, 3)) / 3)


class TestTopkIndices:
    def test_tie_broken_to_lowest_column(self):
        p = topk_indices(np.array([[0.1, 0.5, 0.2, 0.2]]), 2)
        np.testing.assert_array_equal(p.indices, [[1, 2]])

    def test_full_selection(self):
        p = topk_indices(np.array([[0.3, 0.4, 0.3]]), 3)
        np.testing.assert_array_equal(sorted(p.indices[0]), [0, 1, 2])

    def test_matches_exhaustive_sort_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(25):
            n = int(rng.integers(1, 33))
            m = int(rng.integers(1, 33))
            k = int(rng.integers(1, m + 1))
            d = rng.random((n, m))
            p = topk_indices(d, k)
            for row in range(n):
                expected = sorted(range(m), key=lambda c: (-d[row, c], c))[:k]
                np.testing.assert_array_equal(p.indices[row], expected)

    def test_k_out_of_range(self):
        with pytest.raises(ContractError, match="4"):
            topk_indices(np.ones((2, 4)) / 4, 5)


class TestGatherTopk:
    def test_diagonal_identity(self):
        p = TopKIndexSet(n=3, m=3, k=1, indices=np.array([[0], [1], [2]]))
        out = gather_topk(np.eye(3), p)
        np.testing.assert_array_equal(out, [[1.0], [1.0], [1.0]])

    def test_direct_lookup(self):
        p = TopKIndexSet(n=1, m=3, k=2, indices=np.array([[1, 2]]))
        out = gather_topk(np.array([[0.2, 0.5, 0.3]]), p)
        np.testing.assert_array_equal(out, [[0.5, 0.3]])

    def test_sparse_roundtrip(self):
        p = TopKIndexSet(n=2, m=4, k=2, indices=np.array([[0, 3], [1, 2]]))
        values = np.array([[0.9, 0.1], [0.6, 0.4]])
        sparse = SparseScoreMatrix(index_set=p, values=values)
        np.testing.assert_array_equal(gather_topk(sparse, p), values)

    def test_sparse_undefined_entry(self):
        p = TopKIndexSet(n=1, m=3, k=1, indices=np.array([[2]]))
        sparse = SparseScoreMatrix(index_set=p, values=np.array([[0.7]]))
        assert sparse.entry(0, 2) == pytest.approx(0.7)
        with pytest.raises(ContractError, match="undefined"):
            sparse.entry(0, 0)
        other = TopKIndexSet(n=1, m=3, k=1, indices=np.array([[1]]))
        with pytest.raises(ContractError):
            gather_topk(sparse, other)

    def test_tensor_gather_is_differentiable(self):
        x = dc.parameter([[0.2, 0.5, 0.3]])
        p = TopKIndexSet(n=1, m=3, k=2, indices=np.array([[1, 2]]))
        backward(dc.total_sum(gather_topk(x, p)))
        np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 1.0]])


class TestL1NormalizeRows:
    def test_published_ratio_example(self):
        out = l1_normalize_rows(np.array([[0.8, 0.4, 0.2]]))
        np.testing.assert_allclose(out, [[0.571, 0.286, 0.143]], atol=1e-3)
        ratios = out[0] / out[0, -1]
        np.testing.assert_allclose(ratios, [4.0, 2.0, 1.0], atol=1e-12)

    def test_one_hot_unchanged(self):
        out = l1_normalize_rows(np.array([[0.0, 1.0, 0.0]]))
        np.testing.assert_array_equal(out, [[0.0, 1.0, 0.0]])

    def test_symmetric_row(self):
        np.testing.assert_allclose(l1_normalize_rows(np.array([[0.25, 0.25]])),
                                   [[0.5, 0.5]])

    def test_preserves_pairwise_ratios(self):
        rng = np.random.default_rng(6)
        m = rng.random((5, 7)) + 0.01
        out = l1_normalize_rows(m)
        for row in range(5):
            for a in range(7):
                for b in range(7):
                    assert out[row, a] / out[row, b] == pytest.approx(
                        m[row, a] / m[row, b], rel=1e-9)

    def test_preserves_order(self):
        rng = np.random.default_rng(7)
        m = rng.random((4, 6)) + 0.01
        out = l1_normalize_rows(m)
        np.testing.assert_array_equal(np.argsort(out, axis=1), np.argsort(m, axis=1))

    def test_zero_row_is_contract_error(self):
        with pytest.raises(ContractError, match="row 1"):
            l1_normalize_rows(np.array([[0.5, 0.5], [0.0, 0.0]]))

    def test_negative_entry_is_contract_error(self):
        with pytest.raises(ContractError):
            l1_normalize_rows(np.array([[0.5, -0.1]]))

    def test_tensor_path_matches_numpy_path(self):
        rng = np.random.default_rng(8)
        m = rng.random((3, 4)) + 0.1
        np.testing.assert_allclose(l1_normalize_rows(dc.constant(m)).values,
                                   l1_normalize_rows(m), atol=1e-14)
