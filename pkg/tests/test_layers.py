import itertools

import numpy as np
import pytest

from opmtl.errors import DimensionError, RankError
from opmtl.layers import (
    Conv2d,
    FactorizedConv2d,
    FactorizedLinear,
    Linear,
    MaxPool2d,
    MtlModel,
    ReLU,
    Upsample2d,
    backward,
    compose_diag,
    contract_conv,
    contract_linear,
    forward,
    task_block_slices,
)
from opmtl.linalg import spectral_factorize
from opmtl.tensor import Tensor, conv2d_raw

from oracles import fro_rel, numeric_grad, rel_err


def set_random_factors(layer, rng, scale=1.0):
    layer.u.assign(scale * rng.standard_normal(layer.u.data.shape))
    layer.v.assign(scale * rng.standard_normal(layer.v.data.shape))
    for p in layer.task_diags:
        p.assign(rng.standard_normal(p.data.shape))
    if layer.bias is not None:
        layer.bias.assign(rng.standard_normal(layer.bias.data.shape))


class TestComposeDiag:
    def test_single(self):
        d = Tensor([2.0, 5.0])
        assert compose_diag([d]).bit_equal(d)

    def test_two(self):
        out = compose_diag([Tensor([2.0, 3.0]), Tensor([5.0, 7.0])])
        assert out.tolist() == [10.0, 21.0]

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            compose_diag([])

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            compose_diag([Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0])])

    def test_all_orderings_agree(self):
        rng = np.random.default_rng(0)
        diags = [Tensor(rng.standard_normal(5)) for _ in range(3)]
        results = [compose_diag([diags[i] for i in perm]).data
                   for perm in itertools.permutations(range(3))]
        for r in results[1:]:
            assert rel_err(results[0], r) <= 1e-12


class TestTaskBlocks:
    def test_even_split(self):
        assert task_block_slices(6, 3) == [slice(0, 2), slice(2, 4), slice(4, 6)]

    def test_remainder_goes_to_first_blocks(self):
        assert task_block_slices(7, 3) == [slice(0, 3), slice(3, 5), slice(5, 7)]


class TestContractLinear:
    def test_ones_diags_give_uv(self):
        rng = np.random.default_rng(1)
        layer = FactorizedLinear(4, 3, r=3, t=2, init="identity-diag", dtype="float64", seed=0)
        w = contract_linear(layer)
        assert np.allclose(w.data, layer.u.data @ layer.v.data)

    def test_spectral_init_reproduces_dense_init(self):
        from opmtl.linalg import init_dense
        layer = FactorizedLinear(6, 4, t=2, init="spectral", dtype="float32", seed=7)
        dense = init_dense((6, 4), "kaiming-uniform", 7, dtype="float32")
        w = contract_linear(layer)
        assert fro_rel(w.data, dense.data) <= 1e-6

    def test_matches_explicit_diagonal_matrix_oracle(self):
        rng = np.random.default_rng(3)
        layer = FactorizedLinear(4, 3, r=3, t=2, init="identity-diag", dtype="float64", seed=1)
        set_random_factors(layer, rng)
        d = layer.task_diags[0].data * layer.task_diags[1].data
        expected = layer.u.data @ np.diag(d) @ layer.v.data
        assert np.array_equal(contract_linear(layer).data, expected) or \
            rel_err(contract_linear(layer).data, expected) <= 1e-14

    def test_rank_below_min_rejected(self):
        with pytest.raises(RankError):
            FactorizedLinear(5, 4, r=3)


class TestContractConv:
    def test_k1_degenerates_to_linear(self):
        rng = np.random.default_rng(2)
        layer = FactorizedConv2d(2, 2, 1, r=2, t=1, init="identity-diag", dtype="float64", seed=0)
        set_random_factors(layer, rng)
        kernel = contract_conv(layer)
        u2 = layer.u.data.reshape(2, 2)
        v2 = layer.v.data.reshape(2, 2)
        d = layer.task_diags[0].data
        expected = ((u2 * d) @ v2).reshape(2, 1, 1, 2).transpose(0, 3, 1, 2)
        assert rel_err(kernel.data, expected) <= 1e-14

    def test_spectral_round_trip_8x4x3x3(self):
        from opmtl.linalg import init_dense
        layer = FactorizedConv2d(4, 8, 3, t=2, init="spectral", dtype="float32", seed=5)
        dense = init_dense((8, 4, 3, 3), "kaiming-uniform", 5, dtype="float32")
        kernel = contract_conv(layer)
        assert kernel.shape == (8, 4, 3, 3)
        assert fro_rel(kernel.data, dense.data) <= 1e-6

    def test_permute_factorize_contract_round_trip(self):
        rng = np.random.default_rng(8)
        kernel = rng.standard_normal((5, 3, 3, 3)).astype(np.float32)
        co, ci, k = 5, 3, 3
        wmat = kernel.transpose(0, 2, 3, 1).reshape(co * k, k * ci)
        u, m, v = spectral_factorize(Tensor(wmat), min(co * k, k * ci))
        recon = ((u.data * m.data) @ v.data).reshape(co, k, k, ci).transpose(0, 3, 1, 2)
        assert fro_rel(recon, kernel) <= 1e-6


class TestForward:
    def test_identity_factors_pass_input_through(self):
        layer = FactorizedLinear(3, 3, r=3, t=1, init="identity-diag", bias=False, dtype="float64")
        layer.u.assign(np.eye(3))
        layer.v.assign(np.eye(3))
        x = Tensor(np.random.default_rng(0).standard_normal((4, 3)))
        out = forward(layer, x, mode="factorized")
        assert np.allclose(out.data, x.data)

    def test_factorized_vs_contracted_modes_agree(self):
        rng = np.random.default_rng(4)
        layer = FactorizedConv2d(3, 6, 3, t=2, padding=1, init="spectral", dtype="float32", seed=2)
        x = Tensor(rng.standard_normal((2, 3, 8, 8)).astype(np.float32))
        a = forward(layer, x, mode="factorized")
        b = forward(layer, x, mode="contracted")
        assert np.abs(a.data - b.data).max() <= 1e-5

    def test_zero_diagonals_give_bias(self):
        layer = FactorizedLinear(3, 4, t=2, init="identity-diag", dtype="float64", seed=0)
        for p in layer.task_diags:
            p.assign(np.zeros(p.data.shape))
        layer.bias.assign(np.array([1.0, 2.0, 3.0, 4.0]))
        x = Tensor(np.random.default_rng(0).standard_normal((2, 3)))
        out = forward(layer, x)
        assert np.allclose(out.data, np.tile([1.0, 2.0, 3.0, 4.0], (2, 1)))

    def test_unknown_mode(self):
        layer = FactorizedLinear(2, 2, dtype="float64")
        with pytest.raises(ValueError):
            forward(layer, Tensor(np.ones((1, 2))), mode="half")


class TestBackward:
    def test_scalar_chain_rule(self):
        # m = n = r = 1: W = u*m*v, dL/dm = u*v*x*upstream.
        layer = FactorizedLinear(1, 1, r=1, t=1, bias=False, init="identity-diag", dtype="float64")
        layer.u.assign(np.array([[2.0]]))
        layer.v.assign(np.array([[3.0]]))
        layer.task_diags[0].assign(np.array([5.0]))
        grads = backward(layer, Tensor(np.array([[7.0]])), Tensor(np.array([[11.0]])))
        assert grads["d_task_diags"][0].data[0] == pytest.approx(2.0 * 3.0 * 7.0 * 11.0)
        assert grads["du"].data[0, 0] == pytest.approx(5.0 * 3.0 * 7.0 * 11.0)
        assert grads["dv"].data[0, 0] == pytest.approx(2.0 * 5.0 * 7.0 * 11.0)
        assert grads["dx"].data[0, 0] == pytest.approx(2.0 * 5.0 * 3.0 * 11.0)

    def test_upstream_shape_mismatch(self):
        layer = FactorizedLinear(3, 4, dtype="float64")
        with pytest.raises(DimensionError):
            backward(layer, Tensor(np.ones((2, 3))), Tensor(np.ones((2, 5))))

    def test_zeroed_other_diag_annihilates_gradient(self):
        layer = FactorizedLinear(3, 3, r=3, t=2, bias=False, init="identity-diag", dtype="float64")
        rng = np.random.default_rng(0)
        set_random_factors(layer, rng)
        layer.task_diags[1].assign(np.zeros(3))
        grads = backward(layer, Tensor(rng.standard_normal((2, 3))),
                         Tensor(rng.standard_normal((2, 3))))
        assert np.all(grads["d_task_diags"][0].data == 0.0)

    @pytest.mark.parametrize("t", [1, 2, 3])
    def test_linear_grads_match_finite_differences(self, t):
        rng = np.random.default_rng(10 + t)
        layer = FactorizedLinear(4, 3, r=4, t=t, init="identity-diag", dtype="float64", seed=t)
        set_random_factors(layer, rng)
        x = rng.standard_normal((5, 4))
        up = rng.standard_normal((5, 3))
        grads = backward(layer, Tensor(x), Tensor(up))

        def loss_with(param, values):
            saved = param.data.copy()
            param.assign(values)
            y = layer.forward(x.copy())
            param.assign(saved)
            return float((y * up).sum())

        for param, key in [(layer.u, "du"), (layer.v, "dv"), (layer.bias, "dbias")]:
            fd = numeric_grad(lambda vals, p=param: loss_with(p, vals), param.data)
            assert rel_err(grads[key].data, fd, floor=1e-6) <= 1e-4
        for j in range(t):
            fd = numeric_grad(lambda vals, p=layer.task_diags[j]: loss_with(p, vals),
                              layer.task_diags[j].data)
            assert rel_err(grads["d_task_diags"][j].data, fd, floor=1e-6) <= 1e-4
        fd_x = numeric_grad(lambda xv: float((layer.forward(xv) * up).sum()), x)
        assert rel_err(grads["dx"].data, fd_x, floor=1e-6) <= 1e-4

    @pytest.mark.parametrize("t", [1, 2])
    def test_conv_grads_match_finite_differences(self, t):
        rng = np.random.default_rng(20 + t)
        layer = FactorizedConv2d(2, 3, 3, t=t, padding=1, init="identity-diag",
                                 dtype="float64", seed=t)
        set_random_factors(layer, rng, scale=0.5)
        x = rng.standard_normal((2, 2, 5, 5))
        y = layer.forward(x.copy())
        up = rng.standard_normal(y.shape)
        grads = backward(layer, Tensor(x), Tensor(up))

        def loss_with(param, values):
            saved = param.data.copy()
            param.assign(values)
            out = layer.forward(x.copy())
            param.assign(saved)
            return float((out * up).sum())

        for param, key in [(layer.u, "du"), (layer.v, "dv"), (layer.bias, "dbias")]:
            fd = numeric_grad(lambda vals, p=param: loss_with(p, vals), param.data)
            assert rel_err(grads[key].data, fd, floor=1e-6) <= 1e-4
        for j in range(t):
            fd = numeric_grad(lambda vals, p=layer.task_diags[j]: loss_with(p, vals),
                              layer.task_diags[j].data)
            assert rel_err(grads["d_task_diags"][j].data, fd, floor=1e-6) <= 1e-4


class TestInvariants:
    def test_task_order_invariance_of_contraction(self):
        rng = np.random.default_rng(6)
        layer = FactorizedLinear(5, 4, r=5, t=3, init="identity-diag", dtype="float64", seed=0)
        set_random_factors(layer, rng)
        base = contract_linear(layer).data
        diags = list(layer.task_diags)
        for perm in itertools.permutations(range(3)):
            layer.task_diags = [diags[i] for i in perm]
            assert rel_err(contract_linear(layer).data, base) <= 1e-12

    def test_contracted_param_count_identity(self):
        fac = FactorizedLinear(7, 5, r=9, t=3, dtype="float32", init="identity-diag")
        plain = fac.to_plain()
        assert plain.param_count() == 7 * 5 + 5
        fc = FactorizedConv2d(4, 6, 3, t=2, init="identity-diag")
        assert fc.to_plain().param_count() == 6 * 4 * 9 + 6

    def test_training_param_count(self):
        fac = FactorizedLinear(4, 3, r=3, t=2, bias=False, init="identity-diag")
        assert fac.param_count() == 4 * 3 + 2 * 3 + 3 * 3

    def test_contraction_equivalence_float64(self):
        rng = np.random.default_rng(9)
        layer = FactorizedConv2d(3, 4, 3, t=3, padding=1, init="identity-diag",
                                 dtype="float64", seed=0)
        set_random_factors(layer, rng, scale=0.3)
        x = rng.standard_normal((2, 3, 6, 6))
        a = layer.forward(x.copy())
        plain = layer.to_plain()
        b = plain.forward(x.copy())
        assert np.abs(a - b).max() <= 1e-10


class TestPlainLayers:
    def test_maxpool_forward_backward(self):
        x = np.array([[[[1.0, 2.0], [4.0, 3.0]]]])
        pool = MaxPool2d()
        y = pool.forward(x)
        assert y[0, 0, 0, 0] == 4.0
        dx = pool.backward(np.ones_like(y))
        assert dx[0, 0, 1, 0] == 1.0 and dx.sum() == 1.0

    def test_upsample_round_trip_shapes(self):
        x = np.random.default_rng(0).standard_normal((2, 3, 4, 4))
        up = Upsample2d()
        y = up.forward(x)
        assert y.shape == (2, 3, 8, 8)
        assert np.array_equal(up.backward(y), 4.0 * x)

    def test_plain_conv_matches_raw(self):
        rng = np.random.default_rng(1)
        conv = Conv2d(2, 3, 3, padding=1, dtype="float64", seed=0)
        x = rng.standard_normal((1, 2, 6, 6))
        y = conv.forward(x)
        expected = conv2d_raw(x, conv.weight.data, 1, 1) + conv.bias.data[None, :, None, None]
        assert np.array_equal(y, expected)


class TestMtlModel:
    def test_head_with_factorized_layer_rejected(self):
        trunk = [Linear(4, 4, dtype="float64")]
        heads = [[FactorizedLinear(4, 2, dtype="float64")]]
        with pytest.raises(ValueError):
            MtlModel(trunk, heads)

    def test_task_count_mismatch_rejected(self):
        trunk = [FactorizedLinear(4, 4, t=3, init="identity-diag", dtype="float64")]
        heads = [[Linear(4, 2, dtype="float64")], [Linear(4, 2, dtype="float64")]]
        with pytest.raises(ValueError):
            MtlModel(trunk, heads)

    def test_named_params_and_forward(self):
        trunk = [FactorizedLinear(4, 4, t=2, init="identity-diag", dtype="float64"), ReLU()]
        heads = [[Linear(4, 2, dtype="float64")], [Linear(4, 3, dtype="float64")]]
        model = MtlModel(trunk, heads)
        names = [n for n, _ in model.named_params()]
        assert "trunk.0.diag.0" in names and "head.1.0.weight" in names
        outs = model.forward_all(np.zeros((2, 4)))
        assert outs[0].shape == (2, 2) and outs[1].shape == (2, 3)

    def test_config_round_trip(self):
        trunk = [FactorizedConv2d(3, 4, 3, t=2, padding=1, init="identity-diag"), ReLU(), MaxPool2d()]
        heads = [[Conv2d(4, 2, 1)], [Conv2d(4, 1, 1)]]
        model = MtlModel(trunk, heads)
        clone = MtlModel.from_config(model.config())
        assert clone.config() == model.config()
