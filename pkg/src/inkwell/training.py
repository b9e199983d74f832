"""Shared minibatch training loops."""
from __future__ import annotations

import numpy as np

from .autograd import backward, recording
from .ops import cross_entropy


def minibatches(dataset, batch_size, rng=None):
    """Yield (images, labels) batches; shuffled when an rng is given."""
    n = len(dataset)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for lo in range(0, n, batch_size):
        idx = order[lo : lo + batch_size]
        yield dataset.images[idx], dataset.labels[idx]


def train_step(store, graph, images, labels, opt):
    """One cross-entropy step; returns the loss value."""
    out, tape = graph.forward(images, mode="train")
    with recording(tape):
        loss = cross_entropy(out, labels)
    backward(tape, loss)
    opt.step(store)
    return float(loss.data)


def train_plain(store, graph, dataset, opt, epochs, batch_size=64, seed=0, after_epoch=None):
    """Plain task training. `after_epoch(epoch)` may record metrics; its
    return values are collected and returned."""
    rng = np.random.default_rng([seed, 11])
    records = []
    for epoch in range(epochs):
        for images, labels in minibatches(dataset, batch_size, rng):
            train_step(store, graph, images, labels, opt)
        if after_epoch is not None:
            records.append(after_epoch(epoch))
    return records
