import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from prevmatch.nn import (
    DimensionError,
    LabelRangeError,
    OptimizerState,
    SegModel,
    Tensor,
    conv2d,
    masked_cross_entropy,
    poly_lr,
    relu,
    sgd_step,
    slice_batch,
    softmax_channels,
)
from prevmatch.nn.gradcheck import check_gradients, numeric_grad, relative_error


def conv_loop_reference(x, k, b):
    """Six nested loops, zero padding, cross-correlation."""
    B, Cin, H, W = x.shape
    Cout, _, kh, kw = k.shape
    out = np.zeros((B, Cout, H, W))
    for n in range(B):
        for o in range(Cout):
            for i in range(H):
                for j in range(W):
                    acc = b[o]
                    for c in range(Cin):
                        for di in range(kh):
                            for dj in range(kw):
                                ii, jj = i + di - kh // 2, j + dj - kw // 2
                                if 0 <= ii < H and 0 <= jj < W:
                                    acc += k[o, c, di, dj] * x[n, c, ii, jj]
                    out[n, o, i, j] = acc
    return out


class TestConv2d:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).normal(size=(2, 1, 5, 7))
        out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        assert np.array_equal(out.data, x)

    def test_zero_kernel_gives_bias(self):
        x = np.random.default_rng(1).normal(size=(1, 3, 6, 6))
        out = conv2d(Tensor(x), Tensor(np.zeros((2, 3, 3, 3))), Tensor(np.array([0.7, -1.5])))
        assert np.all(out.data[:, 0] == 0.7)
        assert np.all(out.data[:, 1] == -1.5)

    def test_matches_loop_nest(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 1, 5, 5))
        k = rng.normal(size=(2, 1, 3, 3))
        b = rng.normal(size=2)
        ref = conv_loop_reference(x, k, b)
        out = conv2d(Tensor(x), Tensor(k), Tensor(b)).data
        assert np.max(np.abs(out - ref) / np.maximum(np.abs(ref), 1e-300)) < 1e-12

    def test_matches_loop_nest_rectangular_kernel(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 3, 4, 6))
        k = rng.normal(size=(2, 3, 3, 5))
        b = rng.normal(size=2)
        np.testing.assert_allclose(conv2d(Tensor(x), Tensor(k), Tensor(b)).data,
                                   conv_loop_reference(x, k, b), rtol=1e-12, atol=1e-12)

    def test_channel_mismatch_names_axis(self):
        with pytest.raises(DimensionError) as err:
            conv2d(Tensor(np.zeros((1, 2, 5, 5))), Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)))
        assert err.value.axis == "in_channels"

    def test_even_kernel_rejected(self):
        with pytest.raises(DimensionError) as err:
            conv2d(Tensor(np.zeros((1, 1, 5, 5))), Tensor(np.zeros((1, 1, 2, 3))), Tensor(np.zeros(1)))
        assert "kernel_height" in err.value.axis

    def test_bias_mismatch(self):
        with pytest.raises(DimensionError):
            conv2d(Tensor(np.zeros((1, 1, 5, 5))), Tensor(np.zeros((2, 1, 3, 3))), Tensor(np.zeros(3)))


class TestSoftmax:
    def test_uniform(self):
        p = softmax_channels(Tensor(np.full((2, 4, 3, 3), 1.7))).data
        assert np.all(p == 0.25)

    def test_large_logits_stable(self):
        logits = np.zeros((1, 2, 1, 1))
        logits[0, 0] = 1000.0
        p = softmax_channels(Tensor(logits)).data
        assert np.all(np.isfinite(p))
        assert p[0, 0, 0, 0] == 1.0 and p[0, 1, 0, 0] == 0.0

    def test_extended_precision_oracle(self):
        rng = np.random.default_rng(4)
        mpmath.mp.dps = 50
        for _ in range(20):
            a, b = rng.normal(scale=5, size=2)
            p = softmax_channels(Tensor(np.array([a, b]).reshape(1, 2, 1, 1))).data.reshape(2)
            ea, eb = mpmath.exp(mpmath.mpf(a)), mpmath.exp(mpmath.mpf(b))
            ref = [float(ea / (ea + eb)), float(eb / (ea + eb))]
            np.testing.assert_allclose(p, ref, rtol=1e-12, atol=1e-15)

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, (2, 5, 3, 2), elements=st.floats(-500, 500)))
    def test_normalized(self, logits):
        p = softmax_channels(Tensor(logits)).data
        assert np.all(np.abs(p.sum(axis=1) - 1.0) <= 1e-9)
        assert np.all(p >= 0)


class TestMaskedCrossEntropy:
    def test_uniform_gives_log_c(self):
        targets = np.random.default_rng(5).integers(0, 5, size=(2, 3, 4))
        loss = masked_cross_entropy(Tensor(np.zeros((2, 5, 3, 4))), targets)
        assert loss.item() == pytest.approx(math.log(5), abs=1e-15)

    def test_empty_mask_zero_loss_and_grad(self):
        model = SegModel(2, 3, (4,), seed=1)
        x = np.random.default_rng(6).normal(size=(1, 2, 5, 5))
        loss = masked_cross_entropy(model(x), np.zeros((1, 5, 5), dtype=int), np.zeros((1, 5, 5), dtype=bool))
        assert loss.item() == 0.0
        loss.backward()
        for p in model.parameters():
            assert p.grad is None or not p.grad.any()

    def test_summation_oracle(self):
        rng = np.random.default_rng(7)
        logits = rng.normal(size=(1, 4, 3, 3))
        targets = rng.integers(0, 4, size=(1, 3, 3))
        mask = rng.random((1, 3, 3)) < 0.6
        mask[0, 0, 0] = True
        total, count = 0.0, 0
        for i in range(3):
            for j in range(3):
                if mask[0, i, j]:
                    z = logits[0, :, i, j]
                    total += -(z[targets[0, i, j]] - math.log(sum(math.exp(v) for v in z)))
                    count += 1
        got = masked_cross_entropy(Tensor(logits), targets, mask).item()
        assert abs(got - total / count) <= 1e-12 * abs(total / count)

    def test_target_out_of_range_names_pixel(self):
        targets = np.zeros((1, 2, 2), dtype=int)
        targets[0, 1, 0] = 3
        with pytest.raises(LabelRangeError) as err:
            masked_cross_entropy(Tensor(np.zeros((1, 3, 2, 2))), targets)
        assert err.value.coord == (0, 1, 0)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            masked_cross_entropy(Tensor(np.zeros((1, 3, 2, 2))), np.zeros((1, 2, 3), dtype=int))


class TestBackward:
    def test_linear_map(self):
        x = Tensor(np.random.default_rng(8).normal(size=(3, 4)), requires_grad=True)
        (x * 2.0).sum().backward()
        assert np.all(x.grad == 2.0)

    def test_unused_parameter_has_zero_gradient(self):
        x = Tensor(np.ones(3), requires_grad=True)
        p = Tensor(np.ones(2), requires_grad=True)
        (x * 3.0).sum().backward()
        assert p.grad is None or not p.grad.any()

    def test_accumulates_additively(self):
        x = Tensor(np.arange(4.0), requires_grad=True)
        loss = (x * x).sum()
        loss.backward()
        first = x.grad.copy()
        loss.backward()
        np.testing.assert_array_equal(x.grad, 2 * first)
        x.zero_grad()
        loss.backward()
        np.testing.assert_array_equal(x.grad, first)

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            (x * 2.0).backward()

    def test_shared_subexpression(self):
        x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
        y = x * x
        (y + y * 3.0).sum().backward()
        np.testing.assert_allclose(x.grad, 8 * x.data)


def _loss_through(op, shape, seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=shape), requires_grad=True, name="x")
    g = rng.normal(size=op(x).shape)
    return x, lambda: (op(x) * g).sum()


class TestGradients:
    @pytest.mark.parametrize("seed", range(3))
    def test_conv2d(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(2, 3, 4, 5)), requires_grad=True, name="x")
        k = Tensor(rng.normal(size=(2, 3, 3, 3)), requires_grad=True, name="k")
        b = Tensor(rng.normal(size=2), requires_grad=True, name="b")
        g = rng.normal(size=(2, 2, 4, 5))
        errs = check_gradients(lambda: (conv2d(x, k, b) * g).sum(), [x, k, b])
        assert max(errs.values()) < 1e-4, errs

    def test_softmax(self):
        x, f = _loss_through(softmax_channels, (2, 3, 2, 2), 10)
        assert max(check_gradients(f, [x]).values()) < 1e-4

    def test_relu_away_from_kink(self):
        rng = np.random.default_rng(11)
        data = rng.normal(size=(3, 4))
        data[np.abs(data) < 0.05] = 0.5
        x = Tensor(data, requires_grad=True, name="x")
        g = rng.normal(size=(3, 4))
        assert max(check_gradients(lambda: (relu(x) * g).sum(), [x]).values()) < 1e-4

    def test_slice_batch(self):
        x, f = _loss_through(lambda t: slice_batch(t, 1, 3), (4, 2, 2, 2), 12)
        assert max(check_gradients(f, [x]).values()) < 1e-4

    def test_masked_cross_entropy(self):
        rng = np.random.default_rng(13)
        x = Tensor(rng.normal(size=(2, 4, 3, 3)), requires_grad=True, name="logits")
        t = rng.integers(0, 4, size=(2, 3, 3))
        m = rng.random((2, 3, 3)) < 0.5
        assert max(check_gradients(lambda: masked_cross_entropy(x, t, m), [x]).values()) < 1e-4

    def test_full_model(self):
        model = SegModel(3, 4, (6, 6, 6), seed=3)
        rng = np.random.default_rng(14)
        x = rng.normal(size=(2, 3, 5, 5))
        t = rng.integers(0, 4, size=(2, 5, 5))
        errs = check_gradients(lambda: masked_cross_entropy(model(x), t), model.parameters())
        assert len(errs) == 8
        assert max(errs.values()) < 1e-4, errs

    def test_numeric_grad_restores_input(self):
        a = np.array([1.0, 2.0])
        numeric_grad(lambda: float((a ** 2).sum()), a)
        np.testing.assert_array_equal(a, [1.0, 2.0])

    def test_relative_error_floor(self):
        assert relative_error(np.array([0.0]), np.array([1e-9])) == pytest.approx(1e-3)


class TestSegModel:
    def test_shape_preserved(self):
        model = SegModel(3, 5, (8, 8, 8), seed=0)
        out = model(np.zeros((2, 3, 7, 9)))
        assert out.shape == (2, 5, 7, 9)

    def test_same_seed_identical(self):
        a, b = SegModel(3, 5, seed=42), SegModel(3, 5, seed=42)
        for p, q in zip(a.parameters(), b.parameters()):
            assert np.array_equal(p.data, q.data)
        c = SegModel(3, 5, seed=43)
        assert not np.array_equal(a.parameters()[0].data, c.parameters()[0].data)

    def test_default_is_four_conv_layers_width_32(self):
        model = SegModel(3, 5)
        assert len(model.layers) == 4
        assert [w.shape[0] for w, _ in model.layers] == [32, 32, 32, 5]
        assert all(w.shape[2:] == (3, 3) for w, _ in model.layers)

    def test_fan_in_uniform_init(self):
        model = SegModel(3, 5, (32, 32, 32), seed=0)
        for w, b in model.layers:
            bound = math.sqrt(6.0 / (w.shape[1] * 9))
            assert np.abs(w.data).max() <= bound
            assert not b.data.any()

    def test_load_state_shape_check(self):
        model = SegModel(3, 5, (4,), seed=0)
        with pytest.raises(ValueError):
            model.load_state([np.zeros((1, 1, 3, 3))] * 4)

    def test_training_determinism(self):
        def run():
            model = SegModel(2, 3, (4, 4), seed=9)
            opt = OptimizerState.for_model(model, 0.05, 0.9, 0.9)
            rng = np.random.default_rng(0)
            for _ in range(5):
                x = rng.normal(size=(2, 2, 6, 6))
                t = rng.integers(0, 3, size=(2, 6, 6))
                model.zero_grad()
                masked_cross_entropy(model(x), t).backward()
                sgd_step(model, opt, 0.05)
            return model.state()

        for p, q in zip(run(), run()):
            assert np.array_equal(p, q)


class TestPolyLR:
    def test_endpoints(self):
        assert poly_lr(0.01, 0, 100, 0.9) == 0.01
        assert poly_lr(0.01, 100, 100, 0.9) == 0.0

    def test_linear_midpoint(self):
        assert poly_lr(0.2, 50, 100, 1.0) == pytest.approx(0.1, abs=1e-17)

    def test_overflow_clamps_with_warning(self):
        with pytest.warns(RuntimeWarning):
            assert poly_lr(0.1, 101, 100) == 0.0

    def test_monotone(self):
        vals = [poly_lr(1.0, i, 50, 0.9) for i in range(51)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))


def _scalar_model(value: float) -> SegModel:
    model = SegModel(1, 1, (), kernel_size=1, seed=0)
    model.load_state([np.full((1, 1, 1, 1), value), np.zeros(1)])
    return model


class TestSGD:
    def test_plain_step(self):
        model = _scalar_model(1.0)
        opt = OptimizerState.for_model(model, 0.1, momentum=0.0)
        w, b = model.parameters()
        w.grad = np.ones_like(w.data)
        sgd_step(model, opt, 0.1)
        assert w.data.item() == pytest.approx(0.9, abs=1e-15)
        assert b.data.item() == 0.0

    def test_zero_lr_bit_exact(self):
        model = SegModel(2, 3, (4,), seed=5)
        before = model.state()
        opt = OptimizerState.for_model(model, 0.1)
        for p in model.parameters():
            p.grad = np.random.default_rng(0).normal(size=p.shape)
        sgd_step(model, opt, 0.0)
        for a, p in zip(before, model.parameters()):
            assert np.array_equal(a, p.data)

    def test_momentum_closed_form(self):
        lr, m = 0.1, 0.9
        model = _scalar_model(1.0)
        opt = OptimizerState.for_model(model, lr, momentum=m)
        w = model.parameters()[0]
        expected, v = 1.0, 0.0
        for step in range(2):
            w.grad = np.ones_like(w.data)
            sgd_step(model, opt, lr)
            v = m * v + 1.0
            expected -= lr * v
            assert w.data.item() == pytest.approx(expected, abs=1e-15)
        # decrements lr*1 then lr*1.9
        assert 1.0 - w.data.item() == pytest.approx(lr * 1.0 + lr * 1.9, abs=1e-15)

    def test_nan_gradient_aborts(self):
        model = SegModel(2, 3, (4,), seed=5)
        before = model.state()
        opt = OptimizerState.for_model(model, 0.1)
        params = model.parameters()
        for p in params:
            p.grad = np.zeros_like(p.data)
        params[2].grad[0, 0, 0, 0] = np.nan
        with pytest.raises(FloatingPointError, match=params[2].name):
            sgd_step(model, opt, 0.1)
        for a, p in zip(before, params):
            assert np.array_equal(a, p.data)

    def test_buffers_parallel_to_parameters(self):
        model = SegModel(3, 5, (8, 8), seed=0)
        opt = OptimizerState.for_model(model)
        assert [b.shape for b in opt.buffers] == [p.shape for p in model.parameters()]

    @pytest.mark.parametrize("kw", [dict(base_lr=0.0), dict(momentum=1.0), dict(power=0.0)])
    def test_invalid_state(self, kw):
        with pytest.raises(ValueError):
            OptimizerState.for_model(SegModel(1, 2, (2,)), **kw)
