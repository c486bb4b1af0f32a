import numpy as np
import pytest

from epnp import diffgraph
from epnp.diffgraph import Graph, ParamBlock, activation, activation_deriv, grad_check


def conv(x, w, b=None, **kw):
    g = Graph()
    return g.conv2d(g.constant(x), g.constant(w), None if b is None else g.constant(b), **kw).value


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = rng.standard_normal((1, 1, 5, 4))
        np.testing.assert_array_equal(conv(x, np.ones((1, 1, 1, 1))), x)

    def test_scalar_affine(self):
        x = np.array([[[[1.0, 2], [3, 4]]]])
        y = conv(x, np.full((1, 1, 1, 1), 2.0), np.array([1.0]))
        np.testing.assert_array_equal(y[0, 0], [[3, 5], [7, 9]])

    def test_average_kernel_on_constant(self):
        c = 0.9
        y = conv(np.full((1, 1, 6, 6), c), np.full((1, 1, 3, 3), 1 / 9))[0, 0]
        np.testing.assert_allclose(y[1:-1, 1:-1], c)
        for corner in (y[0, 0], y[0, -1], y[-1, 0], y[-1, -1]):
            assert corner == pytest.approx(4 * c / 9)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ValueError):
            conv(rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((1, 3, 3, 3)))

    def test_even_kernel_rejected(self, rng):
        with pytest.raises(ValueError):
            conv(rng.standard_normal((1, 1, 4, 4)), rng.standard_normal((1, 1, 2, 2)))


class TestConv2dTranspose:
    @pytest.mark.parametrize("stride", [1, 2])
    def test_dot_test(self, rng, stride):
        x = rng.standard_normal((2, 3, 8, 8))
        w = rng.standard_normal((4, 3, 3, 3))
        y = diffgraph.conv2d_kernel(x, w, stride=stride)
        r = rng.standard_normal(y.shape)
        xt = diffgraph.conv2d_transpose_kernel(r, w, stride=stride, out_hw=(8, 8))
        lhs, rhs = np.sum(y * r), np.sum(x * xt)
        assert abs(lhs - rhs) <= 1e-10 * abs(lhs)

    def test_scalar_kernel(self, rng):
        y = rng.standard_normal((1, 1, 3, 3))
        out = diffgraph.conv2d_transpose_kernel(y, np.full((1, 1, 1, 1), 2.5))
        np.testing.assert_allclose(out, 2.5 * y)

    def test_stride_two_shape(self, rng):
        w = rng.standard_normal((1, 1, 3, 3))
        assert diffgraph.conv2d_kernel(rng.standard_normal((1, 1, 8, 8)), w, stride=2).shape[2:] == (4, 4)
        out = diffgraph.conv2d_transpose_kernel(rng.standard_normal((1, 1, 4, 4)), w, stride=2)
        assert out.shape[2:] == (8, 8)

    def test_inconsistent_shape(self, rng):
        with pytest.raises(ValueError):
            diffgraph.conv2d_transpose_kernel(rng.standard_normal((1, 1, 4, 4)), rng.standard_normal((1, 1, 3, 3)),
                                              stride=2, out_hw=(5, 9))


class TestPointwise:
    def test_relu(self):
        x = np.array([-1.0, 0.0, 2.0])
        np.testing.assert_array_equal(activation(x, "relu"), [0, 0, 2])
        np.testing.assert_array_equal(activation_deriv(x, "relu"), [0, 0, 1])

    def test_softplus(self):
        assert activation(np.array([0.0]), "softplus")[0] == pytest.approx(np.log(2))
        assert activation_deriv(np.array([0.0]), "softplus")[0] == 0.5

    def test_silu(self):
        assert activation(np.array([0.0]), "silu")[0] == 0
        assert activation_deriv(np.array([0.0]), "silu")[0] == 0.5

    def test_unknown(self):
        with pytest.raises(ValueError):
            activation(np.zeros(2), "tanh")

    @pytest.mark.parametrize("kind", ["softplus", "silu"])
    def test_deriv_is_graph_op(self, rng, kind):
        # d/dx sum(phi'(x)) by reverse mode vs central differences
        x0 = rng.standard_normal(6)
        g = Graph()
        x = g.input(x0)
        out = g.sum(g.pointwise_deriv(x, kind))
        gx = g.backward(out)[x]
        eps = 1e-6
        fd = (activation_deriv(x0 + eps, kind) - activation_deriv(x0 - eps, kind)) / (2 * eps)
        np.testing.assert_allclose(gx, fd, rtol=1e-6, atol=1e-9)


class TestLinear:
    def test_identity(self, rng):
        x = rng.standard_normal((1, 4))
        g = Graph()
        np.testing.assert_array_equal(g.linear(g.constant(x), g.constant(np.eye(4))).value, x)

    def test_row_of_ones(self):
        g = Graph()
        out = g.linear(g.constant(np.array([[1.0, 2, 3]])), g.constant(np.ones((1, 3))))
        assert out.value.tolist() == [[6.0]]

    def test_adjoint(self, rng):
        W = rng.standard_normal((3, 5))
        x, y = rng.standard_normal((1, 5)), rng.standard_normal((1, 3))
        g = Graph()
        fx = g.linear(g.constant(x), g.constant(W)).value
        ty = g.linear(g.constant(y), g.constant(W), transpose=True).value
        assert abs(np.sum(fx * y) - np.sum(x * ty)) <= 1e-10 * abs(np.sum(fx * y))

    def test_dim_mismatch(self, rng):
        g = Graph()
        with pytest.raises(ValueError):
            g.linear(g.constant(np.ones((1, 4))), g.constant(np.ones((2, 3))))


class TestBackward:
    def test_bilinear(self, rng):
        xv, wv = rng.standard_normal(5), rng.standard_normal(5)
        g = Graph()
        x, w = g.input(xv), g.input(wv)
        grads = g.backward(g.sum(g.mul(w, x)))
        np.testing.assert_allclose(grads[w], xv)
        np.testing.assert_allclose(grads[x], wv)

    def test_zero_seed(self, rng):
        block = ParamBlock("w", rng.standard_normal((2, 1, 3, 3)))
        g = Graph()
        x = g.input(rng.standard_normal((1, 1, 5, 5)))
        y = g.pointwise(g.conv2d(x, g.param(block)), "softplus")
        grads = g.backward(y, np.zeros_like(y.value))
        assert not grads[x].any() and not block.grad.any()

    def test_seed_shape_mismatch(self, rng):
        g = Graph()
        y = g.pointwise(g.input(rng.standard_normal(4)), "relu")
        with pytest.raises(ValueError):
            g.backward(y, np.ones(3))

    def test_conv_relu_sum_matches_fd(self, rng):
        xv = rng.standard_normal((1, 2, 6, 6))
        w = ParamBlock("w", rng.standard_normal((3, 2, 3, 3)))
        b = ParamBlock("b", rng.standard_normal(3))
        inp = ParamBlock("x", xv)

        def build(g):
            return g.sum(g.pointwise(g.conv2d(g.param(inp), g.param(w), g.param(b)), "relu"))

        # Kinks are hit with probability zero at random inputs.
        assert grad_check(build, [w, b, inp], eps=1e-6, max_coords=40, rng=rng) <= 1e-6

    def test_deterministic(self, rng):
        xv = rng.standard_normal((1, 1, 5, 5))
        w = ParamBlock("w", rng.standard_normal((2, 1, 3, 3)))

        def run():
            w.zero_grad()
            g = Graph()
            out = g.sum(g.pointwise(g.conv2d(g.constant(xv), g.param(w)), "silu"))
            g.backward(out)
            return out.value.copy(), w.grad.copy()

        a, b = run(), run()
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def _smooth_net(rng):
    x = rng.standard_normal((1, 2, 6, 6))
    w1 = ParamBlock("w1", 0.5 * rng.standard_normal((3, 2, 3, 3)))
    w2 = ParamBlock("w2", 0.5 * rng.standard_normal((1, 3, 3, 3)))

    def build(g):
        h = g.pointwise(g.conv2d(g.constant(x), g.param(w1)), "softplus")
        return g.sum(g.pointwise(g.conv2d(h, g.param(w2)), "silu"))

    return build, [w1, w2]


class TestGradCheck:
    def test_quadratic(self, rng):
        a = ParamBlock("a", rng.standard_normal(6))
        assert grad_check(lambda g: g.sum(g.mul(g.param(a), g.param(a))), [a], eps=1e-5) <= 1e-8

    def test_flags_corrupted_weight_gradient(self, rng, monkeypatch):
        build, params = _smooth_net(rng)
        assert grad_check(build, params, eps=1e-6, max_coords=30, rng=np.random.default_rng(0)) <= 1e-6
        orig = diffgraph.conv2d_weight_grad
        monkeypatch.setattr(diffgraph, "conv2d_weight_grad", lambda *a, **k: 1.01 * orig(*a, **k))
        assert grad_check(build, params, eps=1e-6, max_coords=30, rng=np.random.default_rng(0)) >= 1e-3

    def test_eps_sweep_has_interior_minimum(self):
        # exp has large higher derivatives, so truncation dominates at 1e-4
        # and cancellation at 1e-6.
        a = ParamBlock("a", np.linspace(2.0, 3.0, 8))

        def build(g):
            p = g.param(a)
            e = g.pointwise(g.scale(p, 4.0), "softplus")
            return g.sum(g.mul(e, g.mul(e, e)))

        errs = [grad_check(build, [a], eps=e) for e in (1e-4, 1e-5, 1e-6)]
        assert errs[1] < errs[0] and errs[1] < errs[2], errs

    def test_scalar_output_required(self, rng):
        a = ParamBlock("a", rng.standard_normal(3))
        with pytest.raises(ValueError):
            grad_check(lambda g: g.param(a), [a])
