"""Tape mechanics: recording scope, accumulation, error paths."""
import numpy as np
import pytest

from inkwell import ops
from inkwell.autograd import (
    Tape,
    Tensor,
    backward,
    no_recording,
    recording,
    set_debug_checks,
)
from inkwell.graph import default_cnn, init_params, build_forward
from inkwell.params import ParameterStore


def test_tensor_is_float32_contiguous():
    t = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3).T)
    assert t.data.dtype == np.float32
    assert t.data.flags["C_CONTIGUOUS"]
    assert t.shape == (3, 2)


def test_scalar_tensor_stays_zero_dim():
    t = Tensor(np.float32(4.0))
    assert t.data.ndim == 0
    assert t.item() == 4.0


def test_item_rejects_non_scalar():
    with pytest.raises(ValueError):
        Tensor(np.zeros((2, 2))).item()


def test_no_tape_records_nothing():
    a = Tensor([1.0, 2.0], requires_grad=True)
    out = ops.mul(a, a)
    assert out.requires_grad is False  # nothing was recording


def test_recording_scope_nests():
    outer, inner = Tape(), Tape()
    a = Tensor([1.0], requires_grad=True)
    with recording(outer):
        ops.neg(a)
        with recording(inner):
            ops.neg(a)
            with no_recording():
                ops.neg(a)
        ops.neg(a)
    assert len(outer) == 2
    assert len(inner) == 1


def test_backward_simple_chain():
    a = Tensor([2.0, -3.0], requires_grad=True)
    tape = Tape()
    with recording(tape):
        loss = ops.sum_(ops.mul(a, a))
    backward(tape, loss)
    assert np.allclose(a.grad, [4.0, -6.0])


def test_backward_accumulates_across_calls():
    """Two forward+backward rounds double leaf grads exactly."""
    a = Tensor([1.5, 0.5], requires_grad=True)
    for expect_scale in (1, 2):
        tape = Tape()
        with recording(tape):
            loss = ops.sum_(ops.mul(a, a))
        backward(tape, loss)
        assert np.allclose(a.grad, np.array([3.0, 1.0]) * expect_scale)


def test_repeated_backward_same_tape_contributes_same_amount():
    a = Tensor([2.0], requires_grad=True)
    tape = Tape()
    with recording(tape):
        loss = ops.sum_(ops.mul(a, a))
    backward(tape, loss)
    backward(tape, loss)
    assert np.allclose(a.grad, [8.0])


def test_fanout_accumulates_within_one_backward():
    a = Tensor([3.0], requires_grad=True)
    tape = Tape()
    with recording(tape):
        loss = ops.sum_(ops.add(ops.mul(a, a), ops.mul(a, a)))
    backward(tape, loss)
    assert np.allclose(a.grad, [12.0])


def test_loss_not_on_tape_raises():
    a = Tensor([1.0], requires_grad=True)
    tape = Tape()
    with recording(tape):
        ops.neg(a)
    stray = ops.sum_(ops.mul(a, a))  # computed outside any recording
    with pytest.raises(ValueError, match="not produced on this tape"):
        backward(tape, stray)


def test_loss_must_be_scalar():
    a = Tensor([1.0, 2.0], requires_grad=True)
    tape = Tape()
    with recording(tape):
        out = ops.mul(a, a)
    with pytest.raises(ValueError, match="scalar"):
        backward(tape, out)


def test_non_tensor_loss_rejected():
    with pytest.raises(TypeError):
        backward(Tape(), np.float32(1.0))


def test_unreached_params_get_zero_grads():
    """With a store on the tape, params the loss never touched still end up
    with (zero) grad buffers so the optimizer sees a complete set."""
    store = ParameterStore(seed=0)
    used = store.add("used", np.ones(3, dtype=np.float32))
    unused = store.add("unused", np.ones(2, dtype=np.float32))
    tape = Tape(store=store)
    with recording(tape):
        loss = ops.sum_(ops.mul(used.tensor, used.tensor))
    backward(tape, loss)
    assert np.allclose(used.tensor.grad, 2.0)
    assert unused.tensor.grad is not None
    assert np.all(unused.tensor.grad == 0.0)


def test_grads_do_not_flow_into_constants():
    a = Tensor([1.0], requires_grad=True)
    c = Tensor([5.0])  # requires_grad False
    tape = Tape()
    with recording(tape):
        loss = ops.sum_(ops.mul(a, c))
    backward(tape, loss)
    assert c.grad is None
    assert np.allclose(a.grad, [5.0])


def test_debug_checks_catch_nonfinite():
    set_debug_checks(True)
    try:
        a = Tensor([1.0, 0.0], requires_grad=True)
        with pytest.raises(FloatingPointError):
            ops.div(a, Tensor([1.0, 0.0]))
    finally:
        set_debug_checks(False)


def test_whole_model_backward_reaches_every_parameter():
    spec = default_cnn()
    store = ParameterStore(seed=1)
    init_params(spec, store)
    graph = build_forward(spec, store)
    x = np.random.default_rng(0).random((2, 1, 28, 28), dtype=np.float32)
    out, tape = graph.forward(x, mode="train")
    with recording(tape):
        loss = ops.cross_entropy(out, np.array([3, 7]))
    backward(tape, loss)
    for p in store.parameters():
        assert p.tensor.grad is not None, p.id
        assert np.any(p.tensor.grad != 0.0), p.id
