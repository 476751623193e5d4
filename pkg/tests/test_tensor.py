import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from accar import tensor as T
from accar.tensor import GraphError, ShapeError, Tensor, gradient_check


def rng(seed=0):
    return np.random.default_rng(seed)


def away_from_zero(a, margin=1e-2):
    return np.where(np.abs(a) < margin, margin * np.sign(a + 1e-300) + margin, a)


class TestConv2d:
    def test_identity_1x1(self):
        x = rng().random((1, 5, 6))
        out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x)

    def test_all_ones_3x3_on_constant(self):
        out = T.conv2d(Tensor(np.ones((1, 6, 6))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)), padding=1)
        # direct summation: interior pixels see 9 ones, edges 6, corners 4
        assert np.all(out.data[0, 1:-1, 1:-1] == 9.0)
        assert out.data[0, 0, 0] == 4.0
        assert out.data[0, 0, 3] == 6.0

    def test_matches_direct_summation(self):
        r = rng(1)
        x, w, b = r.normal(size=(2, 7, 5)), r.normal(size=(3, 2, 3, 3)), r.normal(size=3)
        for stride in (1, 2):
            out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=1).data
            xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
            ho, wo = (7 + 2 - 3) // stride + 1, (5 + 2 - 3) // stride + 1
            assert out.shape == (3, ho, wo)
            for o in range(3):
                for i in range(ho):
                    for j in range(wo):
                        patch = xp[:, i * stride:i * stride + 3, j * stride:j * stride + 3]
                        assert out[o, i, j] == pytest.approx((patch * w[o]).sum() + b[o], abs=1e-12)

    def test_weight_gradient_matches_fd(self):
        r = rng(2)
        x = Tensor(r.normal(size=(2, 6, 6)))
        b = Tensor(r.normal(size=3))
        err = gradient_check(lambda w: T.reduce_sum(T.conv2d(x, w, b, padding=1)), r.normal(size=(3, 2, 3, 3)))
        assert err < 1e-6

    @pytest.mark.parametrize("stride", [1, 2])
    def test_input_and_bias_gradients(self, stride):
        r = rng(3)
        w = Tensor(r.normal(size=(2, 2, 3, 3)))
        coef = Tensor(r.normal(size=(2, 3 if stride == 2 else 5, 3 if stride == 2 else 5)))
        f = lambda x: T.reduce_sum(T.conv2d(x, w, None, stride=stride, padding=1) * coef)
        assert gradient_check(f, r.normal(size=(2, 5, 5))) < 1e-6
        x = Tensor(r.normal(size=(2, 5, 5)))
        g = lambda b: T.reduce_sum(T.conv2d(x, w, b, stride=stride, padding=1) * coef)
        assert gradient_check(g, r.normal(size=2)) < 1e-6

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


class TestLinear:
    def test_identity(self):
        x = np.array([0.3, -1.0, 2.0])
        np.testing.assert_array_equal(T.linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x)

    def test_small_example(self):
        out = T.linear(Tensor([1.0, 1.0]), Tensor([[2.0, 0.0], [0.0, 3.0]]), Tensor([1.0, 1.0]))
        np.testing.assert_array_equal(out.data, [3.0, 4.0])

    def test_input_gradient_is_w_transpose_upstream(self):
        r = rng(4)
        w = r.normal(size=(3, 4))
        up = r.normal(size=3)
        x = Tensor(r.normal(size=4), requires_grad=True)
        T.reduce_sum(T.linear(x, Tensor(w), Tensor(np.zeros(3))) * Tensor(up)).backward()
        np.testing.assert_allclose(x.grad, w.T @ up, rtol=1e-12)
        assert gradient_check(lambda v: T.reduce_sum(T.linear(v, Tensor(w)) * Tensor(up)), r.normal(size=4)) < 1e-6

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            T.linear(Tensor(np.zeros(3)), Tensor(np.zeros((2, 4))))


class TestLeakyRelu:
    def test_values(self):
        out = T.leaky_relu(Tensor([3.0, -1.0]), 0.2).data
        assert out[0] == 3.0
        assert out[1] == pytest.approx(-0.2)

    def test_gradients(self):
        x = Tensor([-2.0, 2.0, 0.0], requires_grad=True)
        T.reduce_sum(T.leaky_relu(x, 0.2)).backward()
        np.testing.assert_allclose(x.grad, [0.2, 1.0, 0.2])


class TestInstanceNorm:
    def test_constant_channel(self):
        n, mu, sigma = T.instance_normalize(Tensor(np.full((1, 3, 3), 4.0)))
        assert np.allclose(n.data, 0)
        assert mu.data[0] == 4.0 and sigma.data[0] == 0.0

    def test_two_values(self):
        n, mu, sigma = T.instance_normalize(Tensor(np.array([[[0.0, 2.0]]])), eps=1e-12)
        assert mu.data[0] == 1.0 and sigma.data[0] == 1.0
        np.testing.assert_allclose(n.data.ravel(), [-1.0, 1.0], atol=1e-9)

    def test_standardizes(self):
        x = rng(5).normal(3.0, 2.0, size=(4, 8, 8))
        n, _, _ = T.instance_normalize(Tensor(x))
        assert np.all(np.abs(n.data.mean(axis=(1, 2))) < 1e-10)
        var = x.var(axis=(1, 2))
        # eps shrinks the unit std slightly: σ/√(σ²+eps)
        np.testing.assert_allclose(n.data.std(axis=(1, 2)), np.sqrt(var / (var + 1e-5)), rtol=1e-12)

    def test_gradients_of_all_outputs(self):
        r = rng(6)
        coef = Tensor(r.normal(size=(2, 4, 4)))
        cm, cs = Tensor(r.normal(size=2)), Tensor(r.normal(size=2))
        pts = r.normal(size=(2, 4, 4))
        assert gradient_check(lambda x: T.reduce_sum(T.instance_normalize(x)[0] * coef), pts) < 1e-5
        assert gradient_check(lambda x: T.reduce_sum(T.instance_normalize(x)[1] * cm), pts) < 1e-6
        assert gradient_check(lambda x: T.reduce_sum(T.instance_normalize(x)[2] * cs), pts) < 1e-5


class TestUpsample:
    def test_constant(self):
        out = T.upsample2x_bilinear(Tensor(np.full((2, 3, 3), 0.7)))
        np.testing.assert_allclose(out.data, 0.7)

    def test_shape(self):
        assert T.upsample2x_bilinear(Tensor(np.zeros((3, 4, 4)))).shape == (3, 8, 8)

    def test_ramp(self):
        out = T.upsample2x_bilinear(Tensor(np.array([[[0.0, 1.0]]])))
        # align corners: positions 0, 1/3, 2/3, 1
        np.testing.assert_allclose(out.data[0, 0], [0, 1 / 3, 2 / 3, 1], atol=1e-15)
        np.testing.assert_allclose(out.data[0, 1], out.data[0, 0])

    def test_gradient(self):
        r = rng(7)
        coef = Tensor(r.normal(size=(2, 6, 8)))
        assert gradient_check(lambda x: T.reduce_sum(T.upsample2x_bilinear(x) * coef), r.normal(size=(2, 3, 4))) < 1e-6


class TestConcat:
    def test_shape_and_roundtrip(self):
        a = rng(8).normal(size=(2, 4, 4))
        out = T.concat_channels(Tensor(a), Tensor(np.zeros((3, 4, 4))))
        assert out.shape == (5, 4, 4)
        np.testing.assert_array_equal(out[:2].data, a)

    def test_blockwise_gradient(self):
        r = rng(9)
        coef = r.normal(size=(5, 3, 3))
        a = Tensor(r.normal(size=(2, 3, 3)), requires_grad=True)
        b = Tensor(r.normal(size=(3, 3, 3)), requires_grad=True)
        T.reduce_sum(T.concat_channels(a, b) * Tensor(coef)).backward()
        np.testing.assert_array_equal(a.grad, coef[:2])
        np.testing.assert_array_equal(b.grad, coef[2:])
        bb = Tensor(b.data)
        assert gradient_check(lambda x: T.reduce_sum(T.concat_channels(x, bb) * Tensor(coef) ** 2), a.data) < 1e-6

    def test_spatial_mismatch(self):
        with pytest.raises(ShapeError):
            T.concat_channels(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 4, 5))))


class TestReduceMean:
    def test_values(self):
        assert T.reduce_mean(Tensor([1.0, 2.0, 3.0])).item() == 2.0
        assert T.reduce_mean(Tensor(np.zeros(5))).item() == 0.0

    def test_mean_of_squares_gradient(self):
        x = rng(10).normal(size=6)
        t = Tensor(x, requires_grad=True)
        T.reduce_mean(t * t).backward()
        np.testing.assert_allclose(t.grad, 2 * x / 6, rtol=1e-14)
        assert gradient_check(lambda v: T.reduce_mean(v * v), x) < 1e-7


class TestDetach:
    def test_stop_gradient_composite(self):
        x = rng(11).normal(size=5)
        t = Tensor(x, requires_grad=True)
        T.reduce_mean(T.detach(t) * t).backward()
        np.testing.assert_allclose(t.grad, x / 5, rtol=1e-14)
        # a finite-difference oracle on the frozen composite agrees
        frozen = Tensor(x)
        assert gradient_check(lambda v: T.reduce_mean(frozen * v), x) < 1e-7

    def test_values_preserved(self):
        x = Tensor(np.full(3, 2.5), requires_grad=True)
        d = T.detach(x)
        np.testing.assert_array_equal(d.data, x.data)
        assert not d.requires_grad

    def test_no_leak(self):
        x = Tensor(rng(12).normal(size=4), requires_grad=True)
        loss = T.reduce_sum(T.exp(T.detach(x * 2.0)) * 3.0)
        loss.backward()
        assert x.grad is None


class TestBackward:
    def test_chain_matches_fd(self):
        r = rng(13)
        w = r.normal(size=(3, 2, 3, 3))
        x = r.normal(size=(2, 6, 6))
        coef = Tensor(r.normal(size=(3, 6, 6)))
        f_x = lambda v: T.reduce_sum(T.leaky_relu(T.conv2d(v, Tensor(w), padding=1), 0.2) * coef)
        f_w = lambda v: T.reduce_sum(T.leaky_relu(T.conv2d(Tensor(x), v, padding=1), 0.2) * coef)
        assert gradient_check(f_x, x) < 1e-5
        assert gradient_check(f_w, w) < 1e-5

    def test_constant_loss_zero_grads(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = T.reduce_sum(x * 0.0) + 5.0
        loss.backward()
        np.testing.assert_array_equal(x.grad, 0.0)

    def test_double_backward_is_error(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = T.reduce_sum(x * x)
        loss.backward()
        with pytest.raises(GraphError):
            loss.backward()

    def test_non_scalar_is_error(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(GraphError):
            (x * 2.0).backward()

    def test_shared_subgraph_consumed(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = x * 2.0
        T.reduce_sum(y).backward()
        with pytest.raises(GraphError):
            T.reduce_sum(y * 3.0).backward()

    def test_tape_topological(self):
        x = Tensor(np.ones(2), requires_grad=True)
        loss = T.reduce_sum(T.exp(x) * x)
        tape = T.Tape(loss)
        ids = [n.node_id for n in tape.nodes]
        assert ids == sorted(ids)
        for i, node in enumerate(tape.nodes):
            for p in node._parents:
                assert tape.nodes.index(p) < i


class TestGradientCheck:
    def test_quadratic(self):
        assert gradient_check(lambda x: T.reduce_mean(x * x), rng(14).normal(size=10)) < 1e-7

    def test_linear_composite(self):
        r = rng(15)
        w, b = Tensor(r.normal(size=(3, 5))), Tensor(r.normal(size=3))
        assert gradient_check(lambda x: T.reduce_sum(T.linear(x, w, b) * 2.0), r.normal(size=5)) < 1e-6

    def test_constant_function(self):
        assert gradient_check(lambda x: T.reduce_sum(Tensor(np.ones(3))), np.ones(3)) == 0.0


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (2, 3, 3), elements=st.floats(-3, 3)))
def test_forward_is_deterministic(x):
    w = Tensor(rng(16).normal(size=(2, 2, 3, 3)))
    a = T.instance_normalize(T.conv2d(Tensor(x), w, padding=1))[0].data
    b = T.instance_normalize(T.conv2d(Tensor(x), w, padding=1))[0].data
    assert np.array_equal(a, b)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_elementwise_ops_gradients(seed):
    r = rng(seed)
    x = away_from_zero(r.uniform(0.5, 2.0, size=(3, 4)))
    c = Tensor(r.normal(size=(3, 4)))
    for f in (lambda v: T.reduce_sum(T.log(v) * c),
              lambda v: T.reduce_sum(T.sqrt(v) * c),
              lambda v: T.reduce_sum(v ** 3 * c),
              lambda v: T.reduce_sum(c / v),
              lambda v: T.reduce_sum((v - c) * (v + 1.0)),
              lambda v: T.reduce_mean(T.box_sum(v, 3) * c),
              lambda v: T.reduce_sum(v[1:, ::2] * 2.0),
              lambda v: T.reduce_sum(T.reshape(v, (4, 3)) * T.reshape(c, (4, 3)))):
        assert gradient_check(f, x) <= 1e-4
