"""Per-op forward values against naive references, gradients against
central differences, and the conv/transposed-conv adjoint identities."""
import numpy as np
import pytest

from inkwell import ops
from inkwell.autograd import Tensor
from inkwell.optim import grad_check

import reference


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def t(arr, grad=True):
    return Tensor(np.asarray(arr, dtype=np.float32), requires_grad=grad)


class TestElementwise:
    def test_add_broadcast_backward(self, rng):
        a = t(rng.normal(size=(3, 4)))
        b = t(rng.normal(size=(4,)))
        assert grad_check(lambda x, y: ops.sum_(ops.add(x, y)), (a, b), h=1e-2) < 1e-4

    def test_mul_div_values(self, rng):
        x = rng.normal(size=(5,)).astype(np.float32)
        y = rng.uniform(1.0, 2.0, size=(5,)).astype(np.float32)
        assert np.allclose(ops.mul(t(x), t(y)).data, x * y)
        assert np.allclose(ops.div(t(x), t(y)).data, x / y)

    def test_relu_grad_away_from_kink(self, rng):
        # inputs bounded away from 0 so finite differences are clean
        x = rng.normal(size=(4, 4)).astype(np.float32)
        x[np.abs(x) < 0.1] = 0.5
        dev = grad_check(lambda a: ops.sum_(ops.relu(a)), (t(x),), h=1e-2)
        assert dev < 1e-4

    def test_relu_zero_region(self):
        out = ops.relu(t([-1.0, 0.0, 2.0]))
        assert np.array_equal(out.data, [0.0, 0.0, 2.0])

    @pytest.mark.parametrize("op", [ops.add, ops.sub, ops.mul, ops.div])
    def test_binary_grads(self, op, rng):
        a = t(rng.uniform(0.5, 1.5, size=(2, 3)))
        b = t(rng.uniform(0.5, 1.5, size=(2, 3)))
        assert grad_check(lambda x, y: ops.sum_(op(x, y)), (a, b)) < 1e-3


class TestLinear:
    def test_matmul_value_and_grad(self, rng):
        a = t(rng.normal(size=(4, 4)))
        b = t(rng.normal(size=(4, 4)))
        got = ops.matmul(a, b).data
        assert np.allclose(got, a.data.astype(np.float64) @ b.data.astype(np.float64), atol=1e-5)
        assert grad_check(lambda x, y: ops.sum_(ops.matmul(x, y)), (a, b), h=1e-2) < 1e-4

    def test_matmul_shape_errors(self):
        with pytest.raises(ValueError):
            ops.matmul(t(np.zeros((2, 3))), t(np.zeros((4, 2))))
        with pytest.raises(ValueError):
            ops.matmul(t(np.zeros(3)), t(np.zeros((3, 2))))

    def test_transpose2d(self, rng):
        a = t(rng.normal(size=(3, 5)))
        assert np.array_equal(ops.transpose2d(a).data, a.data.T)
        assert grad_check(lambda x: ops.sum_(ops.mul(ops.transpose2d(x), 2.0)), (a,), h=1e-2) < 1e-4


class TestReductions:
    @pytest.mark.parametrize("axis,keepdims", [(None, False), (0, False), (1, True)])
    def test_sum_mean_grads(self, axis, keepdims, rng):
        a = t(rng.normal(size=(3, 4)))
        assert grad_check(lambda x: ops.sum_(ops.mul(ops.sum_(x, axis, keepdims), 1.0)), (a,), h=1e-2) < 1e-4
        assert grad_check(lambda x: ops.sum_(ops.mul(ops.mean(x, axis, keepdims), 1.0)), (a,), h=1e-2) < 1e-4

    def test_reshape_roundtrip_grad(self, rng):
        a = t(rng.normal(size=(2, 6)))
        out = ops.reshape(a, (3, 4))
        assert out.shape == (3, 4)
        assert grad_check(lambda x: ops.sum_(ops.mul(ops.reshape(x, (12,)), 3.0)), (a,), h=1e-2) < 1e-4


class TestConv:
    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1)])
    def test_forward_matches_naive(self, stride, pad, rng):
        x = rng.normal(size=(2, 3, 7, 8)).astype(np.float32)
        w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
        b = rng.normal(size=(4,)).astype(np.float32)
        got = ops.conv2d(t(x), t(w), t(b), stride=stride, pad=pad).data
        want = reference.ref_conv2d(x, w, b, stride=stride, pad=pad)
        assert np.allclose(got, want, atol=1e-4)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1)])
    def test_grads(self, stride, pad, rng):
        x = t(rng.normal(size=(1, 2, 5, 5)))
        w = t(rng.normal(size=(3, 2, 3, 3)))
        b = t(rng.normal(size=(3,)))
        dev = grad_check(
            lambda a, k, c: ops.sum_(ops.conv2d(a, k, c, stride=stride, pad=pad)),
            (x, w, b),
            h=1e-2,
        )
        assert dev < 1e-3

    def test_input_grad_matches_naive_scatter(self, rng):
        g = rng.normal(size=(2, 4, 3, 3)).astype(np.float32)
        w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
        got = ops.conv2d_input_grad_raw(g, w, stride=2, pad=1, in_hw=(6, 6))
        want = reference.ref_conv2d_input_grad(g, w, (2, 3, 6, 6), stride=2, pad=1)
        assert np.allclose(got, want, atol=1e-4)

    def test_channel_mismatch_raises(self):
        with pytest.raises(ValueError):
            ops.conv2d(t(np.zeros((1, 2, 5, 5))), t(np.zeros((3, 4, 3, 3))))

    def test_kernel_too_large_raises(self):
        with pytest.raises(ValueError):
            ops.conv2d(t(np.zeros((1, 1, 2, 2))), t(np.zeros((1, 1, 5, 5))))


class TestConvTranspose:
    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1), (3, 1)])
    def test_forward_matches_naive(self, stride, pad, rng):
        y = rng.normal(size=(2, 4, 4, 5)).astype(np.float32)
        w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
        got = ops.conv_transpose2d(t(y), t(w), stride=stride, pad=pad).data
        want = reference.ref_conv_transpose2d(y, w, stride=stride, pad=pad)
        assert np.allclose(got, want, atol=1e-4)

    def test_out_hw_padding(self, rng):
        # forward conv 5x5 stride 2 k3 pad 1 -> 3x3; the transpose must be
        # able to ask for the odd 5x5 output back
        y = rng.normal(size=(1, 2, 3, 3)).astype(np.float32)
        w = rng.normal(size=(2, 1, 3, 3)).astype(np.float32)
        out = ops.conv_transpose2d(t(y), t(w), stride=2, pad=1, out_hw=(5, 5))
        assert out.shape == (1, 1, 5, 5)
        want = reference.ref_conv_transpose2d(y, w, stride=2, pad=1, out_pad=0)
        assert np.allclose(out.data, want, atol=1e-4)

    def test_unreachable_out_hw_raises(self, rng):
        y = t(np.zeros((1, 2, 3, 3), dtype=np.float32))
        w = t(np.zeros((2, 1, 3, 3), dtype=np.float32))
        with pytest.raises(ValueError):
            ops.conv_transpose2d(y, w, stride=2, pad=1, out_hw=(9, 9))

    @pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1)])
    def test_grads(self, stride, pad, rng):
        y = t(rng.normal(size=(1, 3, 4, 4)))
        w = t(rng.normal(size=(3, 2, 3, 3)))
        dev = grad_check(
            lambda a, k: ops.sum_(ops.conv_transpose2d(a, k, stride=stride, pad=pad)),
            (y, w),
            h=1e-2,
        )
        assert dev < 1e-3

    @pytest.mark.parametrize("stride,pad,hw", [(1, 0, (6, 6)), (2, 1, (7, 9)), (3, 0, (8, 8))])
    def test_adjoint_of_conv2d_input_grad(self, stride, pad, hw, rng):
        """The zero-stuffed-forward route and the col2im scatter route are
        independent implementations of the same linear map."""
        w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
        oh, ow = ops.conv_out_hw(hw[0], hw[1], 3, 3, stride, pad)
        g = rng.normal(size=(2, 4, oh, ow)).astype(np.float32)
        via_scatter = ops.conv2d_input_grad_raw(g, w, stride, pad, hw)
        via_stuffing = ops.conv_transpose2d(t(g, grad=False), t(w, grad=False),
                                            stride=stride, pad=pad, out_hw=hw).data
        assert np.max(np.abs(via_scatter - via_stuffing)) < 1e-5 * max(
            1.0, np.max(np.abs(via_scatter))
        )


class TestPoolingAndUpsample:
    def test_maxpool_matches_naive(self, rng):
        x = rng.normal(size=(2, 3, 6, 6)).astype(np.float32)
        got = ops.maxpool2d(t(x), kernel=2).data
        assert np.allclose(got, reference.ref_maxpool2d(x, 2, 2))

    def test_maxpool_grad_routes_to_single_argmax(self):
        x = t(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        dev = grad_check(lambda a: ops.sum_(ops.maxpool2d(a, kernel=2)), (x,), h=1e-2)
        assert dev < 1e-4
        from inkwell.autograd import Tape, recording, backward

        x.grad = None
        tape = Tape()
        with recording(tape):
            loss = ops.sum_(ops.maxpool2d(x, kernel=2))
        backward(tape, loss)
        assert np.array_equal(x.grad.squeeze(), [[0, 0], [0, 1]])

    def test_maxpool_window_too_large(self):
        with pytest.raises(ValueError):
            ops.maxpool2d(t(np.zeros((1, 1, 2, 2))), kernel=3)

    def test_upsample_values_and_grad(self, rng):
        x = t(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        out = ops.upsample_nearest(x, 2)
        assert np.array_equal(
            out.data.squeeze(),
            [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]],
        )
        assert grad_check(lambda a: ops.sum_(ops.mul(ops.upsample_nearest(a, 2), 2.0)), (x,), h=1e-2) < 1e-4

    def test_upsample_then_sum_grad_is_factor_squared(self):
        x = t(np.ones((1, 1, 2, 2)))
        from inkwell.autograd import Tape, recording, backward

        tape = Tape()
        with recording(tape):
            loss = ops.sum_(ops.upsample_nearest(x, 3))
        backward(tape, loss)
        assert np.all(x.grad == 9.0)


class TestDropout:
    def test_eval_mode_is_identity(self, rng):
        x = t(rng.normal(size=(4, 4)))
        out = ops.dropout(x, 0.5, rng, train=False)
        assert np.array_equal(out.data, x.data)

    def test_train_mode_inverted_scaling(self):
        rng = np.random.default_rng(7)
        x = t(np.ones((100, 100)))
        out = ops.dropout(x, 0.3, rng, train=True)
        kept = out.data[out.data != 0]
        assert np.allclose(kept, 1.0 / 0.7, atol=1e-6)
        # empirical keep-rate close to 0.7
        assert abs((out.data != 0).mean() - 0.7) < 0.02

    def test_rate_validation(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            ops.dropout(t(np.ones(3)), 1.0, rng, train=True)

    def test_grad_uses_same_mask(self):
        rng = np.random.default_rng(3)
        x = t(np.ones((8, 8)))
        from inkwell.autograd import Tape, recording, backward

        tape = Tape()
        with recording(tape):
            out = ops.dropout(x, 0.4, rng, train=True)
            loss = ops.sum_(out)
        backward(tape, loss)
        assert np.array_equal((x.grad != 0), (out.data != 0))


class TestBatchNorm:
    def _state(self, c):
        return {
            "running_mean": np.zeros(c, dtype=np.float32),
            "running_var": np.ones(c, dtype=np.float32),
        }

    def test_train_forward_matches_reference(self, rng):
        x = rng.normal(size=(4, 3, 5, 5)).astype(np.float32)
        gamma = rng.uniform(0.5, 1.5, size=3).astype(np.float32)
        beta = rng.normal(size=3).astype(np.float32)
        got = ops.batchnorm2d(t(x), t(gamma), t(beta), self._state(3), train=True).data
        want = reference.ref_batchnorm_train(x, gamma, beta)
        assert np.allclose(got, want, atol=1e-4)

    def test_train_output_normalized(self, rng):
        x = rng.normal(loc=3.0, scale=2.0, size=(8, 2, 6, 6)).astype(np.float32)
        out = ops.batchnorm2d(t(x), t(np.ones(2)), t(np.zeros(2)), self._state(2)).data
        assert np.allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-4)
        assert np.allclose(out.std(axis=(0, 2, 3)), 1.0, atol=1e-2)

    def test_running_stats_update_and_eval(self, rng):
        x = rng.normal(loc=1.0, size=(16, 2, 4, 4)).astype(np.float32)
        state = self._state(2)
        ops.batchnorm2d(t(x), t(np.ones(2)), t(np.zeros(2)), state, train=True)
        assert not np.allclose(state["running_mean"], 0.0)
        out_eval = ops.batchnorm2d(
            t(x), t(np.ones(2)), t(np.zeros(2)), state, train=False
        ).data
        mu = state["running_mean"].reshape(1, 2, 1, 1)
        sd = np.sqrt(state["running_var"].reshape(1, 2, 1, 1) + 1e-5)
        assert np.allclose(out_eval, (x - mu) / sd, atol=1e-4)

    def test_grads(self, rng):
        x = t(rng.normal(size=(3, 2, 4, 4)))
        gamma = t(rng.uniform(0.5, 1.5, size=2))
        beta = t(rng.normal(size=2))
        dev = grad_check(
            lambda a, g, b: ops.sum_(
                ops.mul(ops.batchnorm2d(a, g, b, self._state(2), train=True), a)
            ),
            (x, gamma, beta),
            h=1e-2,
        )
        assert dev < 2e-3


class TestCrossEntropy:
    def test_matches_float64_reference(self, rng):
        z = rng.normal(size=(6, 10)).astype(np.float32)
        labels = rng.integers(0, 10, size=6)
        got = float(ops.cross_entropy(t(z), labels).data)
        assert abs(got - reference.ref_cross_entropy(z, labels)) < 1e-5

    def test_grad(self, rng):
        z = t(rng.normal(size=(4, 5)))
        labels = np.array([0, 2, 4, 1])
        assert grad_check(lambda a: ops.cross_entropy(a, labels), (z,)) < 1e-3

    def test_perfect_prediction_low_loss(self):
        z = np.full((2, 4), -20.0, dtype=np.float32)
        z[0, 1] = 20.0
        z[1, 3] = 20.0
        assert float(ops.cross_entropy(t(z), np.array([1, 3])).data) < 1e-5

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            ops.cross_entropy(t(np.zeros((2, 3, 4))), np.array([0, 1]))
        with pytest.raises(ValueError):
            ops.cross_entropy(t(np.zeros((2, 3))), np.array([0]))
