"""Dense float32 tensors with reverse-mode gradient recording.

A Tensor is a contiguous row-major float32 array plus an optional gradient
buffer. Differentiable operations (see ops.py) append nodes to the active
Tape in execution order, which is already a topological order, so backward
is a single reverse sweep.
"""
from __future__ import annotations

import numpy as np

_debug_checks = False


def set_debug_checks(enabled):
    """Toggle NaN/Inf verification on every op output."""
    global _debug_checks
    _debug_checks = bool(enabled)


def debug_checks_enabled():
    return _debug_checks


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float32)
        # ascontiguousarray would promote 0-d scalars to 1-d
        self.data = arr if arr.flags["C_CONTIGUOUS"] else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(())[()])

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic dunders are installed by ops.py on import


class TapeNode:
    """One recorded op: kind, input refs, output ref and its backward closure."""

    __slots__ = ("op", "inputs", "output", "backward_fn", "saved")

    def __init__(self, op, inputs, output, backward_fn, saved=()):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.saved = saved


class Tape:
    """Append-only record of ops in execution (topological) order."""

    def __init__(self, store=None):
        self.nodes = []
        self.store = store

    def __len__(self):
        return len(self.nodes)


_tape_stack = [None]


class recording:
    """Context manager that makes `tape` the active recording target."""

    def __init__(self, tape):
        self.tape = tape

    def __enter__(self):
        _tape_stack.append(self.tape)
        return self.tape

    def __exit__(self, *exc):
        _tape_stack.pop()
        return False


class no_recording(recording):
    def __init__(self):
        super().__init__(None)


def active_tape():
    return _tape_stack[-1]


def backward(tape, loss):
    """Reverse sweep over `tape` from scalar `loss`.

    Gradients accumulate into leaf tensors (parameters, inputs); grads of
    intermediate outputs are reset first so a repeated backward over the
    same tape contributes the same amounts again. If the tape carries a
    parameter store, any parameter the loss did not reach gets a zero grad
    buffer so optimizers see a complete gradient set.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("loss must be a Tensor")
    if loss.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    produced = None
    for node in reversed(tape.nodes):
        if node.output is loss:
            produced = node
            break
    if produced is None:
        raise ValueError("loss was not produced on this tape")

    for node in tape.nodes:
        node.output.grad = None
    loss.grad = np.ones_like(loss.data)

    for node in reversed(tape.nodes):
        g = node.output.grad
        if g is None:
            continue
        grads = node.backward_fn(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                continue
            if _debug_checks and not np.all(np.isfinite(gi)):
                raise FloatingPointError(f"non-finite gradient out of op '{node.op}'")
            if inp.grad is None:
                inp.grad = np.zeros_like(inp.data)
            inp.grad += gi

    if tape.store is not None:
        for param in tape.store.parameters():
            if param.tensor.grad is None:
                param.tensor.grad = np.zeros_like(param.tensor.data)
