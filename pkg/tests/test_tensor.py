import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from cambdepth.errors import ContractError, DomainError, ParameterError, ShapeError
from cambdepth.tensor import (Tape, Tensor, add, avgpool2, backward, broadcast_mul, concat, conv2d,
                              dense, pap_channel, pap_global, relu, sigmoid, tsum, upsample_nearest)
from oracles import broadcast_mul_loop, conv2d_loop, dense_loop


def grad_of(f, x):
    xt = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    return backward(f(xt))[xt]


class TestTensor:
    def test_integer_input_becomes_float(self):
        assert Tensor([1, 2]).dtype == np.float64

    def test_zero_extent_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((0, 3)))

    def test_backward_requires_scalar(self):
        with pytest.raises(ContractError):
            backward(Tensor(np.ones(3), requires_grad=True) * 2.0)

    def test_product_rule_at_3_4(self):
        x = Tensor(3.0, requires_grad=True)
        y = Tensor(4.0, requires_grad=True)
        g = backward(x * y)
        assert g[x] == 4.0 and g[y] == 3.0

    def test_shared_input_accumulates(self):
        x = Tensor(np.array([1.5, -2.0, 3.0]), requires_grad=True)
        g_twice = backward(tsum(x * x))[x]
        g_square = backward(tsum(x ** 2))[x]
        np.testing.assert_array_equal(g_twice, 2 * x.data)
        np.testing.assert_allclose(g_square, g_twice, rtol=0, atol=1e-15)

    def test_tape_is_topological_and_visits_once(self):
        x = Tensor(np.ones(4), requires_grad=True)
        h = relu(x * 2.0)
        out = tsum(h + h * x)
        tape = Tape.record(out)
        seen = set()
        for node in tape:
            assert id(node) not in seen
            for parent in node._parents:
                if parent.requires_grad:
                    assert id(parent) in seen
            seen.add(id(node))
        assert x in set(tape) and tape.nodes[-1] is out


class TestConv2d:
    def test_scalar_affine(self):
        out = conv2d(Tensor([[[5.0]]]), Tensor(np.full((1, 1, 1, 1), 2.0)), Tensor([1.0]))
        assert out.data.item() == 11.0

    def test_sum_of_ones(self):
        out = conv2d(Tensor(np.ones((3, 3, 1))), Tensor(np.ones((3, 3, 1, 1))), Tensor([0.0]))
        assert out.shape == (1, 1, 1) and out.data.item() == 9.0

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 3)])
    def test_matches_loop_oracle(self, rng, stride, padding):
        x = rng.normal(size=(5, 5, 2))
        k = rng.normal(size=(3, 3, 2, 3))
        b = rng.normal(size=3)
        out = conv2d(Tensor(x), Tensor(k), Tensor(b), stride=stride, padding=padding)
        np.testing.assert_allclose(out.data, conv2d_loop(x, k, b, stride, padding), rtol=0, atol=1e-12)

    def test_output_extent(self):
        out = conv2d(Tensor(np.ones((7, 9, 1))), Tensor(np.ones((3, 3, 1, 2))), stride=2, padding=1)
        assert out.shape == ((7 + 2 - 3) // 2 + 1, (9 + 2 - 3) // 2 + 1, 2)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.ones((4, 4, 2))), Tensor(np.ones((3, 3, 3, 1))))

    def test_kernel_larger_than_padded_input(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.ones((2, 2, 1))), Tensor(np.ones((5, 5, 1, 1))), padding=1)

    def test_batched_equals_per_image(self, rng):
        x = rng.normal(size=(3, 6, 6, 2))
        k = rng.normal(size=(3, 3, 2, 4))
        batched = conv2d(Tensor(x), Tensor(k), padding=1).data
        for n in range(3):
            np.testing.assert_allclose(batched[n], conv2d(Tensor(x[n]), Tensor(k), padding=1).data,
                                       rtol=0, atol=1e-12)


class TestDense:
    def test_basis_selection(self):
        out = dense(Tensor([1.0, 0.0]), Tensor([[2.0, 3.0], [4.0, 5.0]]), Tensor([0.0, 0.0]))
        np.testing.assert_array_equal(out.data, [2.0, 3.0])

    def test_identity(self, rng):
        x = rng.normal(size=5)
        np.testing.assert_array_equal(dense(Tensor(x), Tensor(np.eye(5)), Tensor(np.zeros(5))).data, x)

    def test_matches_loop_oracle(self, rng):
        x, w, b = rng.normal(size=8), rng.normal(size=(8, 4)), rng.normal(size=4)
        np.testing.assert_allclose(dense(Tensor(x), Tensor(w), Tensor(b)).data, dense_loop(x, w, b),
                                   rtol=0, atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            dense(Tensor(np.ones(3)), Tensor(np.ones((4, 2))))


class TestSigmoidRelu:
    def test_values(self):
        assert sigmoid(Tensor(0.0)).item() == 0.5
        assert sigmoid(Tensor(math.log(3.0))).item() == pytest.approx(0.75, abs=1e-15)

    @given(arrays(np.float64, st.integers(1, 20),
                  elements=st.floats(-1e300, 1e300, allow_nan=False)))
    def test_strictly_inside_unit_interval(self, x):
        s = sigmoid(Tensor(x)).data
        assert np.all(s > 0) and np.all(s < 1)

    def test_saturation_has_no_overflow(self):
        with np.errstate(all="raise"):
            s = sigmoid(Tensor([100.0, -100.0, 1e4, -1e4])).data
        assert np.all((s > 0) & (s < 1))

    def test_sigmoid_gradient_at_zero(self):
        np.testing.assert_allclose(grad_of(lambda t: tsum(sigmoid(t)), np.zeros(4)), 0.25)

    def test_relu(self):
        np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
        assert np.all(relu(Tensor(-np.arange(1.0, 5.0))).data == 0)

    def test_relu_gradient(self):
        np.testing.assert_array_equal(grad_of(lambda t: tsum(relu(t)), [-1.0, 2.0]), [0.0, 1.0])


class TestPowerAveragePooling:
    def test_sum_limit(self):
        x = np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1)
        assert pap_global(Tensor(x), 1.0).data.item() == 6.0

    def test_max_limit(self):
        x = np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1)
        assert pap_global(Tensor(x), 64.0).data.item() == pytest.approx(3.0, abs=0.05)

    def test_cube_root_of_nine(self):
        x = np.array([1.0, 2.0]).reshape(1, 2, 1)
        assert pap_global(Tensor(x), 3.0).data.item() == pytest.approx(9 ** (1 / 3), abs=1e-12)
        assert pap_channel(Tensor(x.reshape(1, 1, 2)), 3.0).data.item() == pytest.approx(2.0800838, abs=1e-6)

    def test_channel_single_channel_is_identity(self, rng):
        x = rng.uniform(0, 5, size=(4, 3, 1))
        np.testing.assert_allclose(pap_channel(Tensor(x), 3.0).data, x, rtol=1e-14)

    def test_channel_sum(self):
        assert pap_channel(Tensor(np.array([[[4.0, 6.0]]])), 1.0).data.item() == 10.0

    def test_shapes(self, rng):
        x = Tensor(rng.uniform(size=(2, 5, 6, 4)))
        assert pap_global(x, 3.0).shape == (2, 1, 1, 4)
        assert pap_channel(x, 3.0).shape == (2, 5, 6, 1)

    def test_negative_input_names_index(self):
        x = np.ones((2, 2, 1))
        x[1, 0, 0] = -0.5
        with pytest.raises(DomainError, match=r"\(1, 0, 0\)"):
            pap_global(Tensor(x), 3.0)

    def test_p_below_one(self):
        with pytest.raises(ParameterError):
            pap_channel(Tensor(np.ones((2, 2, 2))), 0.5)

    def test_zero_set_has_zero_gradient(self):
        g = grad_of(lambda t: tsum(pap_global(t, 3.0)), np.zeros((2, 2, 1)))
        assert np.all(g == 0)

    @given(st.integers(0, 2 ** 32 - 1), st.sampled_from([1.0, 2.0, 3.0, 7.5]))
    def test_permutation_invariant(self, seed, p):
        r = np.random.default_rng(seed)
        x = r.uniform(0, 10, size=(3, 4, 5))
        perm = r.permutation(12)
        shuffled = x.reshape(12, 5)[perm].reshape(3, 4, 5)
        np.testing.assert_allclose(pap_global(Tensor(shuffled), p).data, pap_global(Tensor(x), p).data,
                                   rtol=1e-14)
        cperm = r.permutation(5)
        np.testing.assert_allclose(pap_channel(Tensor(x[..., cperm]), p).data, pap_channel(Tensor(x), p).data,
                                   rtol=1e-14)

    def test_large_inputs_do_not_overflow(self):
        x = np.full((2, 2, 1), 1e200)
        assert pap_global(Tensor(x), 64.0).data.item() == pytest.approx(1e200 * 4 ** (1 / 64), rel=1e-12)


class TestBroadcastAndPlumbing:
    def test_channel_scaling(self):
        out = broadcast_mul(Tensor(np.array([0.5, 2.0]).reshape(1, 1, 2)), Tensor(np.ones((2, 2, 2))))
        np.testing.assert_array_equal(out.data, np.broadcast_to([0.5, 2.0], (2, 2, 2)))

    @pytest.mark.parametrize("sa,sb", [((1, 1, 3), (4, 5, 3)), ((4, 5, 1), (4, 5, 3)), ((4, 5, 3), (4, 5, 3))])
    def test_matches_loop_oracle(self, rng, sa, sb):
        a, b = rng.normal(size=sa), rng.normal(size=sb)
        np.testing.assert_allclose(broadcast_mul(Tensor(a), Tensor(b)).data, broadcast_mul_loop(a, b),
                                   rtol=0, atol=1e-12)

    def test_ones_is_identity(self, rng):
        a = rng.normal(size=(3, 3, 2))
        np.testing.assert_array_equal(broadcast_mul(Tensor(a), Tensor(np.ones((1, 1, 2)))).data, a)

    def test_incompatible_shapes(self):
        with pytest.raises(ShapeError):
            broadcast_mul(Tensor(np.ones((2, 2, 3))), Tensor(np.ones((2, 2, 2))))
        with pytest.raises(ShapeError):
            add(Tensor(np.ones((3, 2))), Tensor(np.ones((2, 3))))

    def test_upsample(self):
        out = upsample_nearest(Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)), 2)
        expected = np.kron(np.array([[1.0, 2.0], [3.0, 4.0]]), np.ones((2, 2)))
        np.testing.assert_array_equal(out.data[..., 0], expected)

    def test_concat(self):
        assert concat(Tensor(np.ones((3, 3, 2))), Tensor(np.ones((3, 3, 3)))).shape == (3, 3, 5)
        with pytest.raises(ShapeError):
            concat(Tensor(np.ones((3, 3, 2))), Tensor(np.ones((4, 3, 3))))

    def test_avgpool(self):
        out = avgpool2(Tensor(np.array([[1.0, 3.0], [5.0, 7.0]]).reshape(2, 2, 1)))
        assert out.data.item() == 4.0
        with pytest.raises(ShapeError):
            avgpool2(Tensor(np.ones((3, 4, 1))))

    def test_no_nan_from_finite_inputs(self, rng):
        x = Tensor(rng.uniform(0, 1e3, size=(4, 4, 2)))
        for y in (sigmoid(x), relu(x), pap_global(x, 3.0), pap_channel(x, 64.0), avgpool2(x)):
            assert not np.isnan(y.data).any()
