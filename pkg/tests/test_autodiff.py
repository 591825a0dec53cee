import math

import numpy as np
import pytest

from deeprbf import autodiff as ad


def finite_difference(f, x, h=1e-5):
    """Independent central-difference oracle: df/dx of scalar f at ndarray x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = f(x)
        flat[i] = keep - h
        fm = f(x)
        flat[i] = keep
        gflat[i] = (fp - fm) / (2 * h)
    return g


class TestForwardPrimitives:
    def test_relu(self):
        out = ad.relu(ad.constant([-1.0, 2.0]))
        np.testing.assert_array_equal(out.values, [0.0, 2.0])

    def test_abs_sum_is_l1_norm(self):
        out = ad.sum_(ad.absolute(ad.constant([-3.0, 0.0, 4.0])))
        assert out.item() == 7.0

    def test_softplus_scalar(self):
        # log(1 + e^0.7) evaluated independently
        expected = math.log(1.0 + math.exp(0.7))
        out = ad.softplus(ad.constant(0.7))
        np.testing.assert_allclose(out.item(), expected, rtol=1e-15)
        np.testing.assert_allclose(out.item(), 1.103186048885458, rtol=1e-12)

    def test_softplus_no_overflow(self):
        big = ad.softplus(ad.constant([800.0, -800.0]))
        np.testing.assert_allclose(big.values, [800.0, 0.0], atol=1e-12)
        assert np.all(np.isfinite(big.values))

    def test_shape_error_names_primitive_and_shapes(self):
        with pytest.raises(ad.ShapeError) as exc:
            ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((4, 5))))
        assert "matmul" in str(exc.value)
        assert "(2, 3)" in str(exc.value) and "(4, 5)" in str(exc.value)

    def test_apply_op_dispatch(self):
        out = ad.apply_op("relu", ad.constant([-2.0, 5.0]))
        np.testing.assert_array_equal(out.values, [0.0, 5.0])
        with pytest.raises(ValueError):
            ad.apply_op("no_such_primitive", ad.constant(1.0))

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        out = ad.softmax(ad.constant(rng.normal(size=(5, 7)) * 30))
        np.testing.assert_allclose(out.values.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(out.values > 0)

    def test_logsumexp_stable(self):
        x = ad.constant([[1000.0, 1000.0]])
        out = ad.logsumexp(x, axis=1)
        np.testing.assert_allclose(out.values, 1000.0 + math.log(2.0))


class TestBackward:
    def test_sum_of_squares(self):
        x = ad.parameter([1.0, 2.0])
        loss = ad.sum_(ad.square(x))
        grads = ad.backward(loss)
        np.testing.assert_array_equal(grads[x], [2.0, 4.0])

    def test_gradient_of_constant_is_zero(self):
        x = ad.parameter([1.0, 2.0])
        loss = ad.constant(5.0)
        grads = ad.backward(loss)
        np.testing.assert_array_equal(grads[x], [0.0, 0.0])
        assert x not in grads

    def test_backward_requires_scalar(self):
        x = ad.parameter([1.0, 2.0])
        with pytest.raises(ValueError):
            ad.backward(ad.square(x))

    def test_two_layer_network_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        w1 = rng.normal(size=(3, 4))
        w2 = rng.normal(size=(4, 2))
        x = rng.normal(size=(5, 3))

        def build(w1v, w2v):
            a = ad.parameter(w1v)
            b = ad.parameter(w2v)
            h = ad.relu(ad.matmul(ad.constant(x), a))
            out = ad.matmul(h, b)
            return a, b, ad.sum_(ad.square(out))

        a, b, loss = build(w1, w2)
        grads = ad.backward(loss)

        fd_w1 = finite_difference(lambda v: build(v, w2)[2].item(), w1.copy())
        fd_w2 = finite_difference(lambda v: build(w1, v)[2].item(), w2.copy())
        for got, want in ((grads[a], fd_w1), (grads[b], fd_w2)):
            rel = np.abs(got - want) / np.maximum(1.0, np.abs(want))
            assert rel.max() < 1e-4

    def test_linearity_of_backward(self):
        rng = np.random.default_rng(3)
        x = ad.parameter(rng.normal(size=6))
        l1 = ad.sum_(ad.square(x))
        l2 = ad.sum_(ad.softplus(x))
        a_, b_ = 0.7, -2.5
        combo = ad.backward(a_ * l1 + b_ * l2)[x]
        separate = a_ * ad.backward(l1)[x] + b_ * ad.backward(l2)[x]
        np.testing.assert_allclose(combo, separate, atol=1e-12)

    def test_determinism(self):
        rng = np.random.default_rng(11)
        w = rng.normal(size=(4, 4))
        xv = rng.normal(size=(3, 4))

        def run():
            p = ad.parameter(w.copy())
            loss = ad.sum_(ad.absolute(ad.matmul(ad.constant(xv), p)))
            return loss.item(), ad.backward(loss)[p].copy()

        l1, g1 = run()
        l2, g2 = run()
        assert l1 == l2
        np.testing.assert_array_equal(g1, g2)

    def test_take_per_row(self):
        x = ad.parameter([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        picked = ad.take_per_row(x, [2, 0])
        np.testing.assert_array_equal(picked.values, [3.0, 4.0])
        grads = ad.backward(ad.sum_(picked))
        np.testing.assert_array_equal(grads[x], [[0, 0, 1], [1, 0, 0]])

    def test_broadcast_add_unbroadcasts_gradient(self):
        b = ad.parameter([1.0, -1.0])
        x = ad.constant(np.ones((4, 2)))
        loss = ad.sum_(ad.square(x + b))
        grads = ad.backward(loss)
        # d/db sum (1+b)^2 over 4 rows = 8(1+b)
        np.testing.assert_allclose(grads[b], [16.0, 0.0])


class TestTapeStructure:
    def test_linearize_topological_and_unique(self):
        x = ad.parameter([1.0, 2.0])
        y = ad.square(x)
        z = ad.sum_(y + y)
        order = ad.linearize(z)
        assert len(order) == len({id(t) for t in order})
        pos = {id(t): i for i, t in enumerate(order)}
        for t in order:
            for p in t.parents:
                assert pos[id(p)] < pos[id(t)]

    def test_shared_subexpression_gradient_accumulates(self):
        x = ad.parameter(3.0)
        y = ad.square(x)
        loss = ad.sum_(y + y)
        assert ad.backward(loss)[x] == pytest.approx(12.0)


class TestConv2d:
    def test_known_tiny_convolution(self):
        x = ad.constant(np.arange(16.0).reshape(1, 1, 4, 4))
        w = ad.constant(np.ones((1, 1, 2, 2)))
        out = ad.conv2d(x, w, stride=1, padding="valid")
        assert out.shape == (1, 1, 3, 3)
        # top-left window 0+1+4+5
        assert out.values[0, 0, 0, 0] == 10.0

    def test_same_padding_geometry(self):
        x = ad.constant(np.zeros((2, 3, 28, 28)))
        w = ad.constant(np.zeros((8, 3, 5, 5)))
        assert ad.conv2d(x, w, stride=2, padding="same").shape == (2, 8, 14, 14)
        assert ad.conv2d(x, w, stride=2, padding="valid").shape == (2, 8, 12, 12)

    @pytest.mark.parametrize("stride,padding", [(1, "valid"), (2, "same"), (2, "valid")])
    def test_conv_gradients_match_finite_differences(self, stride, padding):
        rng = np.random.default_rng(5)
        xv = rng.normal(size=(2, 2, 6, 6))
        wv = rng.normal(size=(3, 2, 3, 3))

        def loss_of(xa, wa):
            return ad.sum_(ad.square(ad.conv2d(ad.constant(xa) if xa is not xt else xt,
                                               ad.constant(wa) if wa is not wt else wt,
                                               stride=stride, padding=padding)))

        xt = ad.parameter(xv)
        wt = ad.parameter(wv)
        loss = ad.sum_(ad.square(ad.conv2d(xt, wt, stride=stride, padding=padding)))
        grads = ad.backward(loss)

        def f_x(v):
            return ad.sum_(ad.square(ad.conv2d(ad.constant(v), ad.constant(wv),
                                               stride=stride, padding=padding))).item()

        def f_w(v):
            return ad.sum_(ad.square(ad.conv2d(ad.constant(xv), ad.constant(v),
                                               stride=stride, padding=padding))).item()

        np.testing.assert_allclose(grads[xt], finite_difference(f_x, xv.copy()),
                                   rtol=1e-5, atol=1e-7)
        np.testing.assert_allclose(grads[wt], finite_difference(f_w, wv.copy()),
                                   rtol=1e-5, atol=1e-7)

    def test_maxpool_forward_and_gradient(self):
        xv = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        x = ad.parameter(xv)
        out = ad.maxpool2d(x, 2)
        assert out.values.reshape(()) == 4.0
        grads = ad.backward(ad.sum_(out))
        np.testing.assert_array_equal(grads[x], [[[[0, 0], [0, 1]]]])


class TestCheckGradient:
    def test_quadratic_bowl(self):
        w = ad.parameter([1.0, -1.0])
        report = ad.check_gradient(lambda ps: ad.sum_(ad.square(ps[0])), [w],
                                   tolerance=1e-6)
        assert report.passed
        assert report.max_rel_error < 1e-9
        got = {c: a for (_, c, a, _, _) in report.entries}
        assert got[0] == pytest.approx(2.0) and got[1] == pytest.approx(-2.0)

    def test_l1_head_away_from_kinks(self):
        z = ad.parameter([5.0, -5.0])
        report = ad.check_gradient(lambda ps: ad.sum_(ad.absolute(ps[0])), [z])
        assert report.passed and not report.skipped
        signs = [a for (_, _, a, _, _) in report.entries]
        assert signs == [1.0, -1.0]

    def test_zero_coordinate_is_flagged_as_skipped(self):
        z = ad.parameter([5.0, 0.0])
        report = ad.check_gradient(lambda ps: ad.sum_(ad.absolute(ps[0])), [z])
        assert (0, 1) in report.skipped
        assert all(c != 1 for (_, c, *_rest) in report.entries)
        assert report.passed

    def test_near_kink_coordinate_is_skipped(self):
        z = ad.parameter([5.0, 5e-4])
        report = ad.check_gradient(lambda ps: ad.sum_(ad.absolute(ps[0])), [z])
        assert (0, 1) in report.skipped

    def test_nonfinite_loss_raises(self):
        w = ad.parameter([0.0])
        with pytest.raises(FloatingPointError):
            ad.check_gradient(lambda ps: ad.sum_(ad.log(ps[0])), [w])

    def test_unreached_parameter_reads_zero(self):
        used = ad.parameter([2.0])
        unused = ad.parameter([7.0])
        grads = ad.backward(ad.sum_(ad.square(used)))
        np.testing.assert_array_equal(grads[unused], [0.0])
