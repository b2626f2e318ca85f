import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moganet.errors import AutodiffError, ShapeError
from moganet.gradcheck import check, max_rel_err
from moganet.tensor import (Tensor, act, add, backward, batchnorm2d,
                            channel_concat, channel_split, conv2d, elementwise,
                            gap_spatial, gelu, linear, mul, no_grad, sigmoid,
                            silu, softmax_xent, sub, tsum)


def T(arr, rg=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=rg)


def rand(shape, seed=0, rg=False):
    return Tensor(np.random.default_rng(seed).uniform(-1, 1, shape), requires_grad=rg)


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

class TestConv:
    def test_depthwise_delta_kernel_is_identity(self):
        x = rand((2, 3, 5, 5), seed=1)
        w = np.zeros((3, 1, 3, 3))
        w[:, 0, 1, 1] = 1.0
        b = T(np.zeros(3))
        out = conv2d(x, T(w), b, padding=1, groups=3)
        assert np.array_equal(out.data, x.data)

    def test_pointwise_identity_matrix(self):
        x = rand((1, 4, 6, 6), seed=2)
        w = np.eye(4).reshape(4, 4, 1, 1)
        out = conv2d(x, T(w), T(np.zeros(4)))
        assert np.array_equal(out.data, x.data)

    def test_output_shape_formula(self):
        x = rand((1, 2, 9, 9))
        w = rand((2, 2, 3, 3))
        out = conv2d(x, w, stride=2, padding=1)
        assert out.shape == (1, 2, 5, 5)

    def test_gradcheck_dilated_depthwise(self):
        # k=7, dilation 3, same padding 9 on [1,8,5,5]
        rng = np.random.default_rng(3)
        x = Tensor(rng.uniform(-1, 1, (1, 8, 5, 5)), requires_grad=True)
        w = Tensor(rng.uniform(-1, 1, (8, 1, 7, 7)), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, 8), requires_grad=True)
        err = check(lambda: tsum(conv2d(x, w, b, dilation=3, padding=9, groups=8)),
                    [x, w, b])
        assert err <= 1e-4

    def test_gradcheck_strided_grouped(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.uniform(-1, 1, (2, 4, 6, 6)), requires_grad=True)
        w = Tensor(rng.uniform(-1, 1, (6, 2, 3, 3)), requires_grad=True)
        err = check(lambda: tsum(conv2d(x, w, stride=2, padding=1, groups=2)), [x, w])
        assert err <= 1e-4

    def test_groups_must_divide_channels(self):
        x = rand((1, 6, 4, 4))
        w = rand((6, 2, 3, 3))
        with pytest.raises(ShapeError, match="groups"):
            conv2d(x, w, groups=4)

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError, match="odd"):
            conv2d(rand((1, 2, 4, 4)), rand((2, 2, 2, 2)))

    def test_weight_channel_mismatch_names_dimension(self):
        with pytest.raises(ShapeError, match="Cin"):
            conv2d(rand((1, 4, 4, 4)), rand((4, 3, 3, 3)))

    def test_matches_reference_sample(self):
        from reference_conv import conv2d_reference
        rng = np.random.default_rng(5)
        for n, c, h, w_, k, d, s, g in [(2, 3, 7, 5, 3, 2, 1, 1), (1, 4, 8, 8, 5, 1, 2, 4),
                                        (3, 2, 6, 6, 7, 3, 1, 2), (4, 1, 3, 8, 1, 1, 2, 1)]:
            x = rng.uniform(-1, 1, (n, c, h, w_))
            wt = rng.uniform(-1, 1, (c, c // g, k, k))
            bt = rng.uniform(-1, 1, c)
            p = d * (k - 1) // 2
            got = conv2d(T(x), T(wt), T(bt), stride=s, dilation=d, padding=p, groups=g)
            ref = conv2d_reference(x.tolist(), wt.tolist(), bt.tolist(),
                                   stride=s, dilation=d, padding=p, groups=g)
            assert np.array_equal(got.data, np.array(ref))


# ---------------------------------------------------------------------------
# gap / batchnorm
# ---------------------------------------------------------------------------

class TestGap:
    def test_constant_field(self):
        x = T(np.full((2, 3, 4, 4), 1.7))
        out = gap_spatial(x)
        assert out.shape == (2, 3, 1, 1)
        assert np.allclose(out.data, 1.7)
        assert np.allclose((x - gap_spatial(x)).data, 0.0)

    def test_arithmetic_mean(self):
        x = T(np.array([1.0, 2, 3, 4]).reshape(1, 1, 2, 2))
        assert gap_spatial(x).data.reshape(()) == 2.5

    def test_gradient_is_inverse_area(self):
        x = rand((1, 2, 3, 5), rg=True)
        backward(tsum(gap_spatial(x)))
        assert np.allclose(x.grad, 1.0 / 15)


class TestBatchNorm:
    def test_training_normalizes(self):
        rng = np.random.default_rng(6)
        x = T(rng.normal(3.0, 2.0, (4, 3, 5, 5)))
        g, b = T(np.ones(3), rg=True), T(np.zeros(3), rg=True)
        out = batchnorm2d(x, g, b, np.zeros(3), np.ones(3), training=True)
        assert np.allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-7)
        assert np.allclose(out.data.var(axis=(0, 2, 3)), 1.0, atol=1e-3)

    def test_running_stat_update(self):
        x = T(np.random.default_rng(7).normal(2.0, 1.0, (4, 2, 3, 3)))
        rm, rv = np.zeros(2), np.ones(2)
        batchnorm2d(x, T(np.ones(2)), T(np.zeros(2)), rm, rv, training=True, momentum=0.1)
        want_m = 0.1 * x.data.mean(axis=(0, 2, 3))
        want_v = 0.9 + 0.1 * x.data.var(axis=(0, 2, 3))
        assert np.allclose(rm, want_m)
        assert np.allclose(rv, want_v)

    def test_eval_identity_stats(self):
        x = rand((2, 3, 4, 4), seed=8)
        out = batchnorm2d(x, T(np.ones(3)), T(np.zeros(3)), np.zeros(3), np.ones(3),
                          training=False, eps=1e-5)
        assert np.allclose(out.data, x.data, atol=1e-5)

    def test_gradcheck(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.uniform(-1, 1, (2, 4, 3, 3)), requires_grad=True)
        g = Tensor(rng.uniform(0.5, 1.5, 4), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, 4), requires_grad=True)
        rm, rv = np.zeros(4), np.ones(4)
        err = check(lambda: tsum(batchnorm2d(x, g, b, rm, rv, training=True)), [x, g, b])
        assert err <= 1e-4
        err = check(lambda: tsum(batchnorm2d(x, g, b, rm, rv, training=False)), [x, g, b])
        assert err <= 1e-4

    def test_single_element_training_rejected(self):
        x = rand((1, 2, 1, 1))
        with pytest.raises(ShapeError, match="N\\*H\\*W"):
            batchnorm2d(x, T(np.ones(2)), T(np.zeros(2)), np.zeros(2), np.ones(2),
                        training=True)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

class TestActivations:
    def test_origin_values(self):
        z = T(np.array([0.0]))
        assert silu(z).data[0] == 0.0
        assert gelu(z).data[0] == 0.0
        assert sigmoid(z).data[0] == 0.5

    def test_silu_asymptote(self):
        assert abs(silu(T(np.array([20.0]))).data[0] - 20.0) < 1e-6

    def test_large_negative_inputs_stay_finite(self):
        z = T(np.array([-1e4, -50.0, 50.0]))
        for kind in ("gelu", "silu", "sigmoid"):
            assert np.isfinite(act(z, kind).data).all()

    @pytest.mark.parametrize("kind", ["gelu", "silu", "sigmoid"])
    def test_gradcheck(self, kind):
        x = Tensor(np.random.default_rng(10).uniform(-3, 3, 64), requires_grad=True)
        err = check(lambda: tsum(act(x, kind)), [x])
        assert err <= 1e-4

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown activation"):
            act(T(np.zeros(2)), "relu")


# ---------------------------------------------------------------------------
# elementwise / broadcasting
# ---------------------------------------------------------------------------

class TestElementwise:
    def test_multiplicative_identity(self):
        a = rand((2, 3, 4, 4), seed=11)
        out = mul(a, T(np.ones((2, 3, 4, 4))))
        assert np.array_equal(out.data, a.data)

    def test_channel_broadcast(self):
        a = rand((2, 4, 3, 3), seed=12)
        b = rand((2, 1, 3, 3), seed=13)
        out = sub(a, b)
        assert out.shape == (2, 4, 3, 3)
        assert np.array_equal(out.data, a.data - b.data)

    def test_product_rule(self):
        a = rand((2, 3), seed=14, rg=True)
        b = rand((2, 3), seed=15)
        backward(tsum(mul(a, b)))
        assert np.array_equal(a.grad, b.data)

    def test_incompatible_shapes(self):
        with pytest.raises(ShapeError, match="incompatible"):
            add(rand((2, 3, 4, 4)), rand((2, 2, 4, 4)))

    @given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3),
           st.booleans(), st.booleans(), st.booleans(),
           st.sampled_from(["add", "sub", "mul"]))
    @settings(max_examples=40, deadline=None)
    def test_broadcast_gradient_reduction(self, d0, d1, d2, s0, s1, s2, kind):
        # gradient through broadcasting equals brute-force expansion then sum
        full = (d0 + 1, d1 + 1, d2 + 1)
        small = tuple(1 if s else d for d, s in zip(full, (s0, s1, s2)))
        rng = np.random.default_rng(d0 * 100 + d1 * 10 + d2)
        a = Tensor(rng.uniform(-1, 1, full), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, small), requires_grad=True)
        backward(tsum(elementwise(a, b, kind)))
        assert b.grad.shape == b.data.shape
        expanded = Tensor(np.broadcast_to(b.data, full).copy(), requires_grad=True)
        backward(tsum(elementwise(Tensor(a.data, requires_grad=True), expanded, kind)))
        axes = tuple(i for i, s in enumerate(small) if s == 1)
        assert np.allclose(b.grad, expanded.grad.sum(axis=axes, keepdims=True))


# ---------------------------------------------------------------------------
# channel split / concat
# ---------------------------------------------------------------------------

class TestSplitConcat:
    def test_round_trip_bitwise(self):
        x = rand((1, 8, 2, 2), seed=16)
        parts = channel_split(x, (1, 3, 4))
        assert [p.shape[1] for p in parts] == [1, 3, 4]
        assert np.array_equal(channel_concat(parts).data, x.data)

    def test_degenerate_split(self):
        x = rand((1, 8, 2, 2), seed=17)
        a, b, c = channel_split(x, (8, 0, 0))
        assert np.array_equal(a.data, x.data)
        assert b.shape[1] == 0 and c.shape[1] == 0
        assert np.array_equal(channel_concat([a, b, c]).data, x.data)

    def test_slice_gradient(self):
        x = rand((1, 8, 2, 2), seed=18, rg=True)
        _, mid, _ = channel_split(x, (2, 3, 3))
        backward(tsum(mid))
        want = np.zeros((1, 8, 2, 2))
        want[:, 2:5] = 1.0
        assert np.array_equal(x.grad, want)

    def test_size_mismatch(self):
        with pytest.raises(ShapeError, match="sum"):
            channel_split(rand((1, 8, 2, 2)), (2, 2, 2))


# ---------------------------------------------------------------------------
# linear / cross-entropy
# ---------------------------------------------------------------------------

class TestHead:
    def test_uniform_logits_loss_is_ln2(self):
        loss = softmax_xent(T(np.zeros((1, 2))), np.array([0]), smoothing=0.0)
        assert abs(float(loss.data) - math.log(2)) < 1e-12

    def test_confident_limit(self):
        logits = np.zeros((1, 3))
        logits[0, 1] = 200.0
        loss = softmax_xent(T(logits), np.array([1]), smoothing=0.0)
        assert float(loss.data) < 1e-12

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            softmax_xent(T(np.zeros((2, 3))), np.array([0, 3]))

    def test_smoothing_domain(self):
        with pytest.raises(ValueError, match="smoothing"):
            softmax_xent(T(np.zeros((1, 2))), np.array([0]), smoothing=1.0)

    def test_gradcheck_loss(self):
        rng = np.random.default_rng(19)
        logits = Tensor(rng.uniform(-2, 2, (4, 5)), requires_grad=True)
        labels = np.array([0, 2, 4, 1])
        err = check(lambda: softmax_xent(logits, labels, 0.1), [logits])
        assert err <= 1e-4

    def test_linear_gradcheck(self):
        rng = np.random.default_rng(20)
        x = Tensor(rng.uniform(-1, 1, (3, 6)), requires_grad=True)
        w = Tensor(rng.uniform(-1, 1, (4, 6)), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, 4), requires_grad=True)
        err = check(lambda: tsum(linear(x, w, b)), [x, w, b])
        assert err <= 1e-4


# ---------------------------------------------------------------------------
# backward bookkeeping
# ---------------------------------------------------------------------------

class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = rand((3, 4), seed=21, rg=True)
        backward(tsum(x + T(np.zeros((3, 4)))))
        assert np.array_equal(x.grad, np.ones((3, 4)))

    def test_square_gradient(self):
        x = rand((5,), seed=22, rg=True)
        backward(tsum(mul(x, x)))
        assert np.allclose(x.grad, 2 * x.data)

    def test_non_scalar_root_rejected(self):
        x = rand((2, 2), rg=True)
        with pytest.raises(AutodiffError, match="scalar"):
            backward(mul(x, x))

    def test_detached_root_rejected(self):
        with pytest.raises(AutodiffError, match="detached"):
            backward(T(np.array(1.0)))
        x = rand((2,), rg=True)
        with no_grad():
            loss = tsum(x)
        with pytest.raises(AutodiffError, match="detached"):
            backward(loss)

    def test_double_backward_rejected(self):
        x = rand((2,), rg=True)
        loss = tsum(x)
        backward(loss)
        with pytest.raises(AutodiffError, match="already ran"):
            backward(loss)

    def test_no_grad_for_frozen_tensors(self):
        x = rand((2, 2), seed=23, rg=True)
        y = rand((2, 2), seed=24, rg=False)
        backward(tsum(mul(x, y)))
        assert y.grad is None

    def test_grad_accumulates_across_uses(self):
        x = rand((3,), seed=25, rg=True)
        backward(tsum(add(x, x)))
        assert np.array_equal(x.grad, np.full(3, 2.0))

    def test_determinism(self):
        def run():
            x = rand((2, 4, 5, 5), seed=26, rg=True)
            w = rand((4, 4, 3, 3), seed=27, rg=True)
            out = conv2d(silu(x), w, padding=1)
            backward(tsum(mul(out, out)))
            return out.data.copy(), x.grad.copy(), w.grad.copy()

        a, b = run(), run()
        for x, y in zip(a, b):
            assert np.array_equal(x, y)

    def test_forward_outputs_finite(self):
        rng = np.random.default_rng(28)
        x = Tensor(rng.uniform(-1, 1, (2, 4, 6, 6)))
        w = Tensor(rng.uniform(-1, 1, (4, 4, 3, 3)))
        out = gelu(conv2d(silu(x), w, padding=1))
        assert np.isfinite(out.data).all()


def test_max_rel_err_metric():
    assert max_rel_err(np.array([1.0]), np.array([1.0])) == 0.0
    assert max_rel_err(np.array([2.0]), np.array([1.0])) == 0.5
    # below-unit magnitudes are judged absolutely
    assert max_rel_err(np.array([1e-9]), np.array([0.0])) == 1e-9
