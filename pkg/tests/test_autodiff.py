import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from segforge import autodiff as ad
from segforge.autodiff import ConvSpec, DimensionError, Tensor, grad_check


def naive_conv(x, w, stride, padding):
    """Direct nested-loop cross-correlation used as an oracle."""
    n, ci = x.shape[:2]
    co = w.shape[0]
    k = w.shape[2:]
    xp = np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in padding])
    out_sp = [(s + 2 * p - kk) // st + 1 for s, p, kk, st in zip(x.shape[2:], padding, k, stride)]
    out = np.zeros((n, co, *out_sp))
    for pos in itertools.product(*(range(o) for o in out_sp)):
        window = tuple(slice(q * st, q * st + kk) for q, st, kk in zip(pos, stride, k))
        patch = xp[(slice(None), slice(None)) + window]  # [n, ci, *k]
        out[(slice(None), slice(None)) + pos] = np.tensordot(patch, w, axes=(list(range(1, patch.ndim)),
                                                                               list(range(1, w.ndim))))
    return out


def naive_conv_transpose(x, w, stride, padding):
    """Scatter oracle: every input voxel adds ``x * w`` into its output window."""
    n, ci = x.shape[:2]
    co = w.shape[1]
    k = w.shape[2:]
    full = [(s - 1) * st + kk for s, st, kk in zip(x.shape[2:], stride, k)]
    out = np.zeros((n, co, *full))
    for pos in itertools.product(*(range(s) for s in x.shape[2:])):
        window = tuple(slice(q * st, q * st + kk) for q, st, kk in zip(pos, stride, k))
        contrib = np.einsum("nc,co...->no...", x[(slice(None), slice(None)) + pos], w)
        out[(slice(None), slice(None)) + window] += contrib
    crop = tuple(slice(p, f - p) for p, f in zip(padding, full))
    return out[(slice(None), slice(None)) + crop]


class TestTensor:
    def test_shape_and_dtype_defaults(self):
        t = Tensor([[1, 2], [3, 4]])
        assert t.shape == (2, 2)
        assert t.dtype == np.float32

    def test_sum_of_squares_grad(self, rng):
        w = Tensor(rng.normal(size=(3, 4)), requires_grad=True, dtype=np.float64)
        ad.sum(w * w).backward()
        np.testing.assert_allclose(w.grad, 2 * w.data)

    def test_frozen_gets_no_grad(self, rng):
        w = Tensor(rng.normal(size=3), requires_grad=False, dtype=np.float64)
        v = Tensor(rng.normal(size=3), requires_grad=True, dtype=np.float64)
        ad.sum(w * v).backward()
        assert w.grad is None
        np.testing.assert_allclose(v.grad, w.data)

    def test_backward_needs_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            ad.backward(x * 2.0)

    def test_shared_subexpression_accumulates(self):
        x = Tensor(np.array([3.0]), requires_grad=True, dtype=np.float64)
        y = x * x
        ad.sum(y + y).backward()
        np.testing.assert_allclose(x.grad, [12.0])

    def test_index_and_concat(self, rng):
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True, dtype=np.float64)
        b = Tensor(rng.normal(size=(2, 1)), requires_grad=True, dtype=np.float64)
        c = ad.concat([a, b], axis=1)
        assert c.shape == (2, 4)
        ad.sum(c[:, 1:]).backward()
        np.testing.assert_array_equal(a.grad, [[0, 1, 1], [0, 1, 1]])
        np.testing.assert_array_equal(b.grad, [[1], [1]])


class TestActivations:
    def test_relu(self):
        np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])

    def test_leaky_relu_slope(self):
        np.testing.assert_allclose(ad.leaky_relu(Tensor([-10.0]), slope=0.1).data, [-1.0])

    def test_softmax_uniform(self):
        out = ad.softmax(Tensor(np.zeros((1, 4, 2, 2))), axis=1).data
        np.testing.assert_allclose(out, 0.25)

    def test_softmax_stable_for_large_logits(self):
        out = ad.softmax(Tensor(np.array([[1000.0, 0.0]]), dtype=np.float64), axis=1).data
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out.sum(axis=1), 1.0)

    def test_unknown_activation(self):
        with pytest.raises(ValueError):
            ad.activation(Tensor([1.0]), "gelu")


class TestConv:
    def test_hand_example(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]).reshape(1, 1, 1, 1, 3))
        spec = ConvSpec(3, 1, 1, (1, 1, 3))
        w = Tensor(np.ones((1, 1, 1, 1, 3)))
        assert ad.conv_nd(x, spec, w).data.reshape(-1).tolist() == [6.0]

    def test_identity_kernel(self, rng):
        x = rng.normal(size=(2, 1, 5, 6))
        spec = ConvSpec(2, 1, 1, 1)
        out = ad.conv_nd(Tensor(x, dtype=np.float64), spec, Tensor(np.ones((1, 1, 1, 1)), dtype=np.float64))
        np.testing.assert_array_equal(out.data, x)

    def test_zero_weight_gives_bias(self, rng):
        spec = ConvSpec(2, 2, 3, 3, padding=1)
        x = Tensor(rng.normal(size=(1, 2, 4, 4)))
        out = ad.conv_nd(x, spec, Tensor(np.zeros(spec.weight_shape)), Tensor(np.array([1.0, 2.0, 3.0])))
        np.testing.assert_allclose(out.data[0, :, 0, 0], [1.0, 2.0, 3.0])

    @pytest.mark.parametrize("dims,kernel,stride,padding", [
        (1, (3,), (1,), (1,)),
        (2, (3, 3), (2, 2), (1, 1)),
        (2, (1, 3), (1, 2), (0, 1)),
        (3, (3, 3, 3), (1, 2, 2), (1, 1, 1)),
        (3, (1, 3, 3), (1, 1, 1), (0, 0, 0)),
    ])
    def test_matches_naive_loop(self, rng, dims, kernel, stride, padding):
        spec = ConvSpec(dims, 2, 3, kernel, stride, padding)
        x = rng.normal(size=(2, 2) + (7,) * dims)
        w = rng.normal(size=spec.weight_shape)
        got = ad.conv_nd(Tensor(x, dtype=np.float64), spec, Tensor(w, dtype=np.float64)).data
        np.testing.assert_allclose(got, naive_conv(x, w, stride, padding), rtol=1e-12, atol=1e-12)

    def test_shape_error_names_axis(self, rng):
        spec = ConvSpec(2, 3, 4, 3)
        with pytest.raises(DimensionError, match="axis 1"):
            ad.conv_nd(Tensor(rng.normal(size=(1, 2, 5, 5))), spec, Tensor(np.zeros(spec.weight_shape)))

    def test_spec_round_trip(self):
        spec = ConvSpec(3, 2, 5, (1, 3, 3), (1, 2, 2), (0, 1, 1), transposed=True)
        assert ConvSpec.from_dict(spec.to_dict()) == spec
        assert spec.weight_shape == (2, 5, 1, 3, 3)


class TestConvTranspose:
    def test_length_two_stride_two(self):
        spec = ConvSpec(1, 1, 1, (2,), (2,), transposed=True)
        out = ad.conv_transpose_nd(Tensor(np.array([[[1.0, 2.0]]])), spec,
                                   Tensor(np.array([[[1.0, 10.0]]])))
        np.testing.assert_allclose(out.data.reshape(-1), [1.0, 10.0, 2.0, 20.0])

    @pytest.mark.parametrize("dims,kernel,stride,padding", [
        (1, (2,), (2,), (0,)),
        (2, (3, 3), (2, 2), (1, 1)),
        (3, (1, 2, 2), (1, 2, 2), (0, 0, 0)),
    ])
    def test_matches_scatter_oracle(self, rng, dims, kernel, stride, padding):
        spec = ConvSpec(dims, 3, 2, kernel, stride, padding, transposed=True)
        x = rng.normal(size=(2, 3) + (4,) * dims)
        w = rng.normal(size=spec.weight_shape)
        got = ad.conv_transpose_nd(Tensor(x, dtype=np.float64), spec, Tensor(w, dtype=np.float64)).data
        np.testing.assert_allclose(got, naive_conv_transpose(x, w, stride, padding), rtol=1e-12, atol=1e-12)

    def test_is_input_adjoint_of_conv(self, rng):
        # <conv(x, w), y> == <x, convT(y, w)> for the same weight
        fwd = ConvSpec(2, 3, 4, 3, 2, 1)
        bwd = ConvSpec(2, 4, 3, 3, 2, 1, transposed=True)
        x = rng.normal(size=(1, 3, 9, 9))
        w = rng.normal(size=fwd.weight_shape)
        y = rng.normal(size=(1, 4) + fwd.output_shape((9, 9)))
        lhs = np.sum(ad.conv_nd(Tensor(x, dtype=np.float64), fwd, Tensor(w, dtype=np.float64)).data * y)
        rhs = np.sum(ad.conv_transpose_nd(Tensor(y, dtype=np.float64), bwd, Tensor(w, dtype=np.float64)).data * x)
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_pointwise_mixing_preserves_shape(self, rng):
        spec = ConvSpec(2, 2, 3, 1, transposed=True)
        out = ad.conv_transpose_nd(Tensor(rng.normal(size=(1, 2, 5, 4))), spec,
                                   Tensor(rng.normal(size=spec.weight_shape)))
        assert out.shape == (1, 3, 5, 4)

    def test_zero_input_gives_bias(self):
        spec = ConvSpec(1, 1, 2, 2, 2, transposed=True)
        out = ad.conv_transpose_nd(Tensor(np.zeros((1, 1, 3))), spec, Tensor(np.ones(spec.weight_shape)),
                                   Tensor(np.array([4.0, -1.0])))
        np.testing.assert_allclose(out.data[0, 0], 4.0)
        np.testing.assert_allclose(out.data[0, 1], -1.0)


class TestNorms:
    def test_instance_norm_hand_case(self):
        x = Tensor(np.array([1.0, 3.0]).reshape(1, 1, 2), dtype=np.float64)
        out = ad.instance_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), eps=1e-5)
        np.testing.assert_allclose(out.data.reshape(-1), [-1.0, 1.0], atol=1e-5)

    def test_constant_channel_is_zero(self):
        x = Tensor(np.full((1, 1, 4, 4), 7.0), dtype=np.float64)
        out = ad.instance_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)))
        np.testing.assert_allclose(out.data, 0.0)

    def test_beta_shift(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4)), dtype=np.float64)
        base = ad.instance_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3))).data
        shifted = ad.instance_norm(x, Tensor(np.ones(3)), Tensor(np.full(3, 5.0))).data
        np.testing.assert_allclose(shifted - base, 5.0)

    def test_batch_norm_eval_uses_running_stats(self, rng):
        x = Tensor(rng.normal(size=(4, 2, 5)), dtype=np.float64)
        rm, rv = np.zeros(2), np.ones(2)
        ad.batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), running=(rm, rv), training=True)
        assert not np.allclose(rm, 0.0)
        out = ad.batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), running=(rm, rv), training=False)
        expect = (x.data - rm.reshape(1, -1, 1)) / np.sqrt(rv.reshape(1, -1, 1) + 1e-5)
        np.testing.assert_allclose(out.data, expect)


class TestGradCheck:
    def test_linear_is_exact(self, rng):
        w = Tensor(rng.normal(size=5), requires_grad=True, dtype=np.float64)
        c = rng.normal(size=5)
        assert grad_check(lambda: ad.sum(w * Tensor(c, dtype=np.float64)), [w]) < 1e-8

    def test_composite_conv_norm_relu(self, rng):
        spec = ConvSpec(2, 2, 3, 3, 1, 1)
        x = Tensor(rng.normal(size=(2, 2, 5, 5)), requires_grad=True, dtype=np.float64)
        w = Tensor(rng.normal(size=spec.weight_shape), requires_grad=True, dtype=np.float64)
        g = Tensor(rng.uniform(0.5, 1.5, size=3), requires_grad=True, dtype=np.float64)
        b = Tensor(rng.normal(size=3), requires_grad=True, dtype=np.float64)
        probe = Tensor(rng.normal(size=(2, 3, 5, 5)), dtype=np.float64)

        def fn():
            h = ad.leaky_relu(ad.instance_norm(ad.conv_nd(x, spec, w), g, b), 0.1)
            return ad.sum(h * probe)

        assert grad_check(fn, [x, w, g, b], eps=1e-6) < 1e-4

    @settings(max_examples=15, deadline=None)
    @given(st.integers(1, 2), st.integers(1, 3), st.integers(1, 2), st.integers(0, 1), st.integers(0, 10_000))
    def test_conv_grads_random_geometry(self, ci, k, stride, pad, seed):
        r = np.random.default_rng(seed)
        spec = ConvSpec(2, ci, 2, k, stride, min(pad, k - 1))
        x = Tensor(r.normal(size=(1, ci, 5, 4)), requires_grad=True, dtype=np.float64)
        w = Tensor(r.normal(size=spec.weight_shape), requires_grad=True, dtype=np.float64)
        probe = Tensor(r.normal(size=(1, 2) + spec.output_shape((5, 4))), dtype=np.float64)
        assert grad_check(lambda: ad.sum(ad.conv_nd(x, spec, w) * probe), [x, w], eps=1e-6) < 1e-4
