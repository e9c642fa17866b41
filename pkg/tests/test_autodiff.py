"""Autodiff engine: forward values against loop oracles, backward against
central differences, and the bookkeeping rules (liveness, accumulation,
finite checks)."""

import numpy as np
import pytest

from qsmkit import autodiff as ad
from qsmkit.autodiff import Tensor, backward, check_gradients, zero_grads
from qsmkit.dipole import apply_spectrum, build_dipole
from qsmkit.errors import InputError, NumericalError
from qsmkit.gradcheck import F32_TOL, F64_TOL, OPS, build_case
from qsmkit.volume import VolumeMeta


class TestTensor:
    def test_default_dtype_is_single(self):
        t = Tensor([1, 2, 3])
        assert t.dtype == np.float32

    def test_double_preserved(self):
        t = Tensor(np.arange(3, dtype=np.float64))
        assert t.dtype == np.float64

    def test_nonfinite_rejected(self):
        with pytest.raises(NumericalError):
            Tensor([1.0, np.inf])

    def test_locked_input_copied(self):
        arr = np.ones(4, dtype=np.float32)
        arr.setflags(write=False)
        t = Tensor(arr)
        t.data[0] = 5.0
        assert arr[0] == 1.0

    def test_detach_is_constant(self):
        t = Tensor([1.0], requires_grad=True)
        d = t.detach()
        assert not d.requires_grad and d._parents == () and not d._live

    def test_item(self):
        assert Tensor(2.5).item() == 2.5


class TestBackwardMechanics:
    def test_scalar_required(self):
        t = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(InputError):
            backward(t)

    def test_diamond_graph_single_visit(self):
        # f = sum(x*x + x*x) so df/dx = 4x; double-counting a shared node
        # would give 8x
        x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
        y = ad.mul(x, x)
        f = ad.tsum(ad.add(y, y))
        backward(f)
        np.testing.assert_allclose(x.grad, 4.0 * x.data, rtol=1e-6)

    def test_grad_accumulates_across_calls(self):
        x = Tensor([2.0], requires_grad=True)
        f = ad.tsum(ad.mul(x, x))
        backward(f)
        backward(f)
        np.testing.assert_allclose(x.grad, [8.0], rtol=1e-6)
        zero_grads([x])
        assert x.grad is None

    def test_detach_blocks_flow(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = ad.mul(x, x)
        f = ad.tsum(ad.mul(y.detach(), x))
        backward(f)
        # only the direct factor contributes, the detached x^2 is a constant
        np.testing.assert_allclose(x.grad, x.data ** 2, rtol=1e-6)

    def test_constant_branch_untracked(self):
        a = Tensor([3.0])
        x = Tensor([1.0], requires_grad=True)
        c = ad.mul(a, a)
        assert not c._live and c._parents == ()
        f = ad.tsum(ad.add(c, x))
        backward(f)
        assert a.grad is None
        np.testing.assert_allclose(x.grad, [1.0])

    def test_nonfinite_op_raises(self):
        a = Tensor([1.0])
        b = Tensor([0.0])
        with pytest.raises(NumericalError):
            ad.div(a, b)

    def test_gradcheck_requires_flow(self):
        x = Tensor([1.0], requires_grad=True)
        y = Tensor([1.0], requires_grad=True)
        with pytest.raises(NumericalError):
            check_gradients(lambda: ad.tsum(ad.mul(x, x)), [y])


class TestBroadcastGrads:
    def test_channel_affine_analytic(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(3, 2, 2, 2)), requires_grad=True, dtype=np.float64)
        gamma = Tensor(rng.normal(size=(3, 1, 1, 1)), requires_grad=True,
                       dtype=np.float64)
        beta = Tensor(rng.normal(size=(3, 1, 1, 1)), requires_grad=True,
                      dtype=np.float64)
        w = rng.normal(size=(3, 2, 2, 2))
        f = ad.tsum(ad.mul(ad.add(ad.mul(x, gamma), beta), Tensor(w)))
        backward(f)
        np.testing.assert_allclose(x.grad, w * gamma.data, rtol=1e-12)
        np.testing.assert_allclose(
            gamma.grad, (w * x.data).sum(axis=(1, 2, 3), keepdims=True), rtol=1e-12)
        np.testing.assert_allclose(
            beta.grad, w.sum(axis=(1, 2, 3), keepdims=True), rtol=1e-12)

    def test_scalar_broadcast(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True, dtype=np.float64)
        s = Tensor(2.0, requires_grad=True, dtype=np.float64)
        backward(ad.tsum(ad.mul(x, s)))
        np.testing.assert_allclose(s.grad, np.array(6.0))
        np.testing.assert_allclose(x.grad, [2.0, 2.0, 2.0])


def conv3d_loop(x: np.ndarray, w: np.ndarray, b, stride: int, pad: int) -> np.ndarray:
    c_in, xs, ys, zs = x.shape
    c_out, _, k1, k2, k3 = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))
    ox = (xs + 2 * pad - k1) // stride + 1
    oy = (ys + 2 * pad - k2) // stride + 1
    oz = (zs + 2 * pad - k3) // stride + 1
    out = np.zeros((c_out, ox, oy, oz))
    for o in range(c_out):
        for ix in range(ox):
            for iy in range(oy):
                for iz in range(oz):
                    acc = 0.0
                    for c in range(c_in):
                        for i in range(k1):
                            for j in range(k2):
                                for l in range(k3):
                                    acc += (xp[c, ix * stride + i, iy * stride + j,
                                               iz * stride + l] * w[o, c, i, j, l])
                    out[o, ix, iy, iz] = acc + (0.0 if b is None else b[o])
    return out


class TestConvForward:
    @pytest.mark.parametrize("stride,pad,k,with_bias", [
        (1, 0, 3, True),
        (1, 1, 3, True),
        (1, 2, 3, True),
        (2, 1, 3, False),
        (2, 0, 3, True),
        (1, 0, 1, True),
        (2, 1, 4, True),
        (3, 0, 2, True),
    ])
    def test_matches_loop_oracle(self, stride, pad, k, with_bias):
        rng = np.random.default_rng(stride * 100 + pad * 10 + k)
        x = rng.normal(size=(2, 6, 5, 4))
        w = rng.normal(size=(3, 2, k, k, k))
        b = rng.normal(size=3) if with_bias else None
        got = ad.conv3d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64),
                        None if b is None else Tensor(b, dtype=np.float64),
                        stride=stride, pad=pad)
        want = conv3d_loop(x, w, b, stride, pad)
        assert got.shape == want.shape
        np.testing.assert_allclose(got.data, want, rtol=1e-12, atol=1e-12)

    def test_identity_kernel(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(3, 4, 4, 4))
        w = np.zeros((3, 3, 1, 1, 1))
        for c in range(3):
            w[c, c, 0, 0, 0] = 1.0
        out = ad.conv3d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64))
        np.testing.assert_allclose(out.data, x, rtol=1e-15)

    def test_ones_kernel_counts_neighbourhood(self):
        x = Tensor(np.ones((1, 5, 5, 5)), dtype=np.float64)
        w = Tensor(np.ones((1, 1, 3, 3, 3)), dtype=np.float64)
        out = ad.conv3d(x, w, stride=1, pad=0)
        assert out.data[0, 1, 1, 1] == 27.0

    def test_bad_args(self):
        x = Tensor(np.zeros((2, 4, 4, 4)))
        w = Tensor(np.zeros((3, 2, 3, 3, 3)))
        with pytest.raises(InputError):
            ad.conv3d(x, Tensor(np.zeros((3, 5, 3, 3, 3))))  # channel mismatch
        with pytest.raises(InputError):
            ad.conv3d(x, w, stride=0)
        with pytest.raises(InputError):
            ad.conv3d(x, Tensor(np.zeros((3, 2, 1, 1, 1))), pad=1)  # pad > k-1
        with pytest.raises(InputError):
            ad.conv3d(x, Tensor(np.zeros((3, 2, 5, 5, 5))))  # kernel too large
        with pytest.raises(InputError):
            ad.conv3d(x, w, Tensor(np.zeros(4)))  # bias shape


class TestOpValues:
    def test_nn_upsample_is_block_replication(self):
        rng = np.random.default_rng(1)
        d = rng.normal(size=(2, 3, 2, 2))
        got = ad.nn_upsample(Tensor(d, dtype=np.float64), 2).data
        want = np.kron(d, np.ones((1, 2, 2, 2)))
        np.testing.assert_allclose(got, want, rtol=1e-15)
        np.testing.assert_allclose(
            ad.nn_upsample(Tensor(d, dtype=np.float64), 1).data, d)
        with pytest.raises(InputError):
            ad.nn_upsample(Tensor(d), 0)

    def test_nn_upsample_mean_pool_inverse(self):
        rng = np.random.default_rng(11)
        d = rng.normal(size=(2, 3, 2, 4))
        up = ad.nn_upsample(Tensor(d, dtype=np.float64), 2).data
        c, x, y, z = d.shape
        pooled = up.reshape(c, x, 2, y, 2, z, 2).mean(axis=(2, 4, 6))
        np.testing.assert_allclose(pooled, d, rtol=1e-15)

    def test_shift_diff_forward_difference(self):
        rng = np.random.default_rng(2)
        d = rng.normal(size=(1, 4, 5, 3))
        for axis in range(3):
            got = ad.shift_diff(Tensor(d, dtype=np.float64), axis).data
            want = np.zeros_like(d)
            sl_lo = [slice(None)] * 4
            sl_hi = [slice(None)] * 4
            n = d.shape[axis + 1]
            sl_lo[axis + 1] = slice(0, n - 1)
            sl_hi[axis + 1] = slice(1, n)
            want[tuple(sl_lo)] = d[tuple(sl_hi)] - d[tuple(sl_lo)]
            np.testing.assert_allclose(got, want, rtol=1e-15)
        with pytest.raises(InputError):
            ad.shift_diff(Tensor(d), 3)

    def test_spectral_filter_matches_kernel_application(self):
        meta = VolumeMeta((8, 6, 4), (1.0, 1.2, 0.9), (0.0, 1.0, 2.0))
        spec = build_dipole(meta).spectrum
        rng = np.random.default_rng(4)
        x = rng.normal(size=(2,) + meta.dims)
        got = ad.spectral_filter(Tensor(x, dtype=np.float64), spec).data
        want = np.stack([apply_spectrum(x[c], spec) for c in range(2)])
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)
        with pytest.raises(InputError):
            ad.spectral_filter(Tensor(x, dtype=np.float64), spec[:-1])

    def test_spectral_filter_self_adjoint(self):
        meta = VolumeMeta((6, 4, 4), (1.0, 1.0, 1.5), (1.0, 1.0, 0.0))
        spec = build_dipole(meta).spectrum
        rng = np.random.default_rng(5)
        u = rng.normal(size=(1,) + meta.dims)
        v = rng.normal(size=(1,) + meta.dims)
        hu = ad.spectral_filter(Tensor(u, dtype=np.float64), spec).data
        hv = ad.spectral_filter(Tensor(v, dtype=np.float64), spec).data
        assert abs(np.vdot(hu, v) - np.vdot(u, hv)) < 1e-12 * np.abs(np.vdot(hu, v))

    def test_elementwise_values(self):
        t = Tensor([-1.0, 0.0, 2.0], dtype=np.float64)
        np.testing.assert_allclose(ad.leaky_relu(t, 0.2).data, [-0.2, 0.0, 2.0])
        np.testing.assert_allclose(ad.absolute(t).data, [1.0, 0.0, 2.0])
        np.testing.assert_allclose(ad.neg(t).data, [1.0, 0.0, -2.0])
        np.testing.assert_allclose(ad.cos(t).data, np.cos(t.data))
        np.testing.assert_allclose(ad.sqrt(Tensor([4.0, 9.0])).data, [2.0, 3.0])

    def test_operator_sugar(self):
        a = Tensor([2.0], dtype=np.float64)
        np.testing.assert_allclose((a + 1.0).data, [3.0])
        np.testing.assert_allclose((1.0 - a).data, [-1.0])
        np.testing.assert_allclose((a * 3.0).data, [6.0])
        np.testing.assert_allclose((1.0 / a).data, [0.5])
        np.testing.assert_allclose((-a).data, [-2.0])

    def test_reductions_match_numpy(self):
        rng = np.random.default_rng(6)
        d = rng.normal(size=(2, 3, 4, 3))
        t = Tensor(d, dtype=np.float64)
        np.testing.assert_allclose(ad.tsum(t).data, d.sum(), rtol=1e-13)
        np.testing.assert_allclose(ad.tsum(t, axis=(1, 3)).data,
                                   d.sum(axis=(1, 3)), rtol=1e-13)
        np.testing.assert_allclose(ad.tmean(t, axis=2, keepdims=True).data,
                                   d.mean(axis=2, keepdims=True), rtol=1e-13)

    def test_concat_and_split_gradients(self):
        rng = np.random.default_rng(7)
        parts = [Tensor(rng.normal(size=(c, 2, 2, 2)), requires_grad=True,
                        dtype=np.float64) for c in (1, 2)]
        w = rng.normal(size=(3, 2, 2, 2))
        out = ad.concat(parts)
        np.testing.assert_allclose(out.data,
                                   np.concatenate([p.data for p in parts]))
        backward(ad.tsum(ad.mul(out, Tensor(w))))
        np.testing.assert_allclose(parts[0].grad, w[:1], rtol=1e-13)
        np.testing.assert_allclose(parts[1].grad, w[1:], rtol=1e-13)
        with pytest.raises(InputError):
            ad.concat([])
        with pytest.raises(InputError):
            ad.concat([parts[0], Tensor(np.zeros((1, 3, 2, 2)))])

    def test_instance_norm_statistics(self):
        rng = np.random.default_rng(8)
        x = Tensor(rng.normal(2.0, 3.0, size=(3, 5, 4, 4)), dtype=np.float64)
        ones = Tensor(np.ones((3, 1, 1, 1)), dtype=np.float64)
        zeros = Tensor(np.zeros((3, 1, 1, 1)), dtype=np.float64)
        out = ad.instance_norm(x, ones, zeros).data
        np.testing.assert_allclose(out.mean(axis=(1, 2, 3)), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=(1, 2, 3)), 1.0, atol=1e-4)
        gamma = Tensor(np.full((3, 1, 1, 1), 2.0), dtype=np.float64)
        beta = Tensor(np.full((3, 1, 1, 1), 0.5), dtype=np.float64)
        out2 = ad.instance_norm(x, gamma, beta).data
        np.testing.assert_allclose(out2, 2.0 * out + 0.5, rtol=1e-12)

    def test_instance_norm_constant_channel(self):
        x = Tensor(np.full((2, 3, 3, 3), 4.0), dtype=np.float64)
        ones = Tensor(np.ones((2, 1, 1, 1)), dtype=np.float64)
        zeros = Tensor(np.zeros((2, 1, 1, 1)), dtype=np.float64)
        out = ad.instance_norm(x, ones, zeros).data
        np.testing.assert_allclose(out, 0.0, atol=1e-12)

    def test_tape_linearity(self):
        # backward of a sum equals the sum of the separate backwards
        rng = np.random.default_rng(10)
        d = rng.normal(size=(2, 3, 3, 3))
        x1 = Tensor(d.copy(), requires_grad=True, dtype=np.float64)
        f1 = ad.tsum(ad.cos(x1))
        f2 = ad.tsum(ad.mul(x1, x1))
        backward(ad.add(f1, f2))
        g_joint = x1.grad.copy()
        x2 = Tensor(d.copy(), requires_grad=True, dtype=np.float64)
        backward(ad.tsum(ad.cos(x2)))
        g_a = x2.grad.copy()
        zero_grads([x2])
        backward(ad.tsum(ad.mul(x2, x2)))
        g_b = x2.grad.copy()
        np.testing.assert_allclose(g_joint, g_a + g_b, rtol=1e-12)


class TestGradientSuite:
    """The same per-op case families the acceptance gate runs, at a reduced
    case count so the unit suite stays fast."""

    @pytest.mark.parametrize("op", OPS)
    def test_single_precision(self, op):
        worst = 0.0
        for case in range(5):
            rng = np.random.default_rng([OPS.index(op), case])
            f, tensors = build_case(op, rng, np.float32)
            worst = max(worst, check_gradients(
                f, tensors, rng=np.random.default_rng(case), samples=8))
        assert worst < F32_TOL, f"{op}: worst rel error {worst:.3e}"

    @pytest.mark.parametrize("op", OPS)
    def test_double_precision(self, op):
        worst = 0.0
        for case in range(5):
            rng = np.random.default_rng([OPS.index(op), case])
            f, tensors = build_case(op, rng, np.float64)
            worst = max(worst, check_gradients(
                f, tensors, rng=np.random.default_rng(case), samples=8))
        assert worst < F64_TOL, f"{op}: worst rel error {worst:.3e}"
