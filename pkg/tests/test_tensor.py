import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from opmtl.errors import DimensionError, DTypeError
from opmtl.tensor import Tensor, conv2d, hadamard, matmul, permute_axes

from oracles import conv2d_seven_loop, matmul_triple_loop, permute_index_map


class TestTensor:
    def test_shape_dtype_size(self):
        t = Tensor(np.zeros((2, 3, 4)), dtype="float32")
        assert t.shape == (2, 3, 4)
        assert t.dtype == "float32"
        assert t.size == 24

    def test_rejects_nan_inf(self):
        with pytest.raises(ValueError):
            Tensor([1.0, np.nan])
        with pytest.raises(ValueError):
            Tensor([np.inf, 0.0])

    def test_rejects_bad_dtype(self):
        with pytest.raises(DTypeError):
            Tensor([1.0], dtype="int32")

    def test_immutable_buffer(self):
        t = Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            t.data[0] = 5.0

    def test_scalar_promoted_to_rank_one(self):
        assert Tensor(3.0).shape == (1,)


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = matmul(Tensor(np.eye(2)), a)
        assert out.tolist() == [[1.0, 2.0], [3.0, 4.0]]

    def test_hand_checked_1x2_2x1(self):
        out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert out.tolist() == [[11.0]]

    def test_matches_triple_loop_oracle_exactly(self):
        rng = np.random.default_rng(7)
        a = rng.standard_normal((5, 4))
        b = rng.standard_normal((4, 3))
        expected = matmul_triple_loop(a, b)
        got = matmul(Tensor(a), Tensor(b)).data
        assert np.array_equal(got, expected)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_dtype_mismatch(self):
        with pytest.raises(DTypeError):
            matmul(Tensor(np.ones((2, 2)), dtype="float32"),
                   Tensor(np.ones((2, 2)), dtype="float64"))

    def test_bit_deterministic(self):
        rng = np.random.default_rng(1)
        a = Tensor(rng.standard_normal((17, 9)), dtype="float32")
        b = Tensor(rng.standard_normal((9, 13)), dtype="float32")
        assert matmul(a, b).bit_equal(matmul(a, b))

    def test_associativity_within_float32_tolerance(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            a = Tensor(rng.uniform(-1, 1, (6, 5)), dtype="float32")
            b = Tensor(rng.uniform(-1, 1, (5, 7)), dtype="float32")
            c = Tensor(rng.uniform(-1, 1, (7, 4)), dtype="float32")
            left = matmul(matmul(a, b), c).data
            right = matmul(a, matmul(b, c)).data
            assert np.allclose(left, right, rtol=1e-5)


class TestHadamard:
    def test_values(self):
        out = hadamard(Tensor([2.0, 3.0]), Tensor([5.0, 7.0]))
        assert out.tolist() == [10.0, 21.0]

    def test_ones_identity(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.standard_normal((3, 4)))
        assert hadamard(a, Tensor(np.ones((3, 4)))).bit_equal(a)

    def test_commutative(self):
        a, b = Tensor([2.0, 3.0]), Tensor([5.0, 7.0])
        assert hadamard(a, b).bit_equal(hadamard(b, a))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            hadamard(Tensor(np.ones(3)), Tensor(np.ones(4)))


class TestPermuteAxes:
    def test_spatial_svd_reordering(self):
        x = Tensor(np.zeros((8, 4, 3, 3)))
        assert permute_axes(x, (0, 2, 3, 1)).shape == (8, 3, 3, 4)

    def test_identity_permutation_bitwise(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.standard_normal((3, 4, 2)))
        assert permute_axes(x, (0, 1, 2)).bit_equal(x)

    def test_round_trip_matches_index_map_oracle(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 5, 3, 4))
        order = (2, 0, 3, 1)
        inverse = tuple(np.argsort(order))
        forward = permute_axes(Tensor(x), order)
        assert np.array_equal(forward.data, permute_index_map(x, order))
        assert permute_axes(forward, inverse).bit_equal(Tensor(x))

    def test_invalid_permutation(self):
        with pytest.raises(ValueError):
            permute_axes(Tensor(np.zeros((2, 2))), (0, 0))

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_random_round_trip_property(self, seed):
        rng = np.random.default_rng(seed)
        ndim = int(rng.integers(1, 5))
        shape = tuple(rng.integers(1, 5, ndim))
        order = tuple(rng.permutation(ndim))
        inverse = tuple(np.argsort(order))
        x = Tensor(rng.standard_normal(shape))
        assert permute_axes(permute_axes(x, order), inverse).bit_equal(x)


class TestConv2d:
    def test_1x1_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 1, 5, 5))
        w = np.ones((1, 1, 1, 1))
        out = conv2d(Tensor(x), Tensor(w))
        assert np.array_equal(out.data, x)

    def test_all_ones_3x3(self):
        ci = 4
        x = Tensor(np.ones((1, ci, 3, 3)))
        w = Tensor(np.ones((1, ci, 3, 3)))
        out = conv2d(x, w)
        assert out.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == 9 * ci

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (1, 2)])
    def test_matches_seven_loop_oracle(self, stride, padding):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((2, 3, 7, 7)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        expected = conv2d_seven_loop(
            x.astype(np.float64), w.astype(np.float64), stride, padding
        )
        got = conv2d(Tensor(x), Tensor(w), stride, padding).data
        rel = np.abs(got - expected) / np.maximum(np.abs(expected), 1.0)
        assert rel.max() <= 1e-6

    def test_identity_impulse_kernel_shifts_input(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((1, 1, 6, 6))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0  # centered impulse, pad 1 -> exact identity
        out = conv2d(Tensor(x), Tensor(w), stride=1, padding=1)
        assert np.array_equal(out.data, x)

    def test_non_integral_output_extent(self):
        with pytest.raises(DimensionError):
            conv2d(Tensor(np.ones((1, 1, 6, 6))), Tensor(np.ones((1, 1, 3, 3))), stride=2)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            conv2d(Tensor(np.ones((1, 2, 5, 5))), Tensor(np.ones((1, 3, 3, 3))))

    def test_bit_deterministic(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.standard_normal((2, 3, 8, 8)), dtype="float32")
        w = Tensor(rng.standard_normal((5, 3, 3, 3)), dtype="float32")
        a = conv2d(x, w, 1, 1)
        b = conv2d(x, w, 1, 1)
        assert a.bit_equal(b)
