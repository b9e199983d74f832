"""Optimizers and the finite-difference gradient checker."""
from __future__ import annotations

import numpy as np

from .autograd import Tensor, Tape, backward, recording


class MissingGradError(Exception):
    pass


def _require_grads(params):
    missing = [p.id for p in params if p.tensor.grad is None]
    if missing:
        raise MissingGradError(f"parameters without gradients: {missing}")


class SGD:
    def __init__(self, lr=0.01):
        self.lr = float(lr)

    def step(self, store):
        params = store.parameters()
        _require_grads(params)
        for p in params:
            p.tensor.data -= np.float32(self.lr) * p.tensor.grad
        store.zero_grads()


class Adam:
    """Adam with bias correction; eps is added outside the square root."""

    def __init__(self, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.t = 0
        self._m = {}
        self._v = {}

    def step(self, store):
        params = store.parameters()
        _require_grads(params)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for p in params:
            g = p.tensor.grad
            m = self._m.get(p.id)
            if m is None or m.shape != g.shape:
                m = np.zeros_like(g)
                self._m[p.id] = m
                v = np.zeros_like(g)
                self._v[p.id] = v
            else:
                v = self._v[p.id]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            gg = np.square(g)
            gg *= 1.0 - b2
            v += gg
            # update = lr * (m/bc1) / (sqrt(v/bc2) + eps), fused in place
            upd = v / bc2
            np.sqrt(upd, out=upd)
            upd += self.eps
            np.divide(m, upd, out=upd)
            upd *= self.lr / bc1
            p.tensor.data -= upd
        store.zero_grads()


def grad_check(fn, inputs, h=1e-3):
    """Max relative deviation between analytic and central-difference grads.

    `fn` maps a tuple of Tensors to a scalar Tensor. Only inputs with
    requires_grad=True are perturbed. Returns the worst relative deviation
    over all of their elements, where each absolute difference is scaled by
    max(|analytic|, |numeric|, 1).
    """
    for x in inputs:
        if isinstance(x, Tensor):
            x.grad = None
    tape = Tape()
    with recording(tape):
        loss = fn(*inputs)
    if loss.size != 1:
        raise ValueError("grad_check expects a scalar-valued fn")
    backward(tape, loss)
    analytic = []
    for x in inputs:
        if not (isinstance(x, Tensor) and x.requires_grad):
            analytic.append(None)
            continue
        analytic.append(
            np.zeros_like(x.data) if x.grad is None else x.grad.copy()
        )

    worst = 0.0
    for x, ga in zip(inputs, analytic):
        if ga is None:
            continue
        flat = x.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn(*inputs).data)
            flat[i] = orig - h
            fm = float(fn(*inputs).data)
            flat[i] = orig
            gn = (fp - fm) / (2.0 * h)
            gav = float(ga.reshape(-1)[i])
            dev = abs(gav - gn) / max(abs(gav), abs(gn), 1.0)
            if dev > worst:
                worst = dev
    return worst
