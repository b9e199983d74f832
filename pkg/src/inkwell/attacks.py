"""Third-party attacks: fine-tuning, pruning, watermark erasure/overwrite,
and cross-dataset fine-tuning with head swapping.

Every attack mutates the store in place and returns a trace of per-step or
per-epoch (accuracy, watermark SSIM) measurements, taken through a probe
that carries the transposed graph, the true watermark, and an evaluation
split. Attacks use their own optimizers; the defender's optimizer state is
never reused.
"""
from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .autograd import backward, recording
from .graph import build_forward, restore_last_layer, swap_last_layer, transpose_model
from .optim import Adam
from .params import ParameterStore
from .training import minibatches, train_step
from .watermark import (
    Watermark,
    WatermarkKey,
    WatermarkSecret,
    extract,
    extraction_ssim,
    generate_keys,
    watermark_loss,
)


class AttackError(Exception):
    pass


@dataclass
class Probe:
    """Measurement hook: forward graph + eval split for accuracy, transposed
    graph + true watermark for extraction SSIM."""

    fwd: object
    transposed: object
    wm: Watermark
    eval_images: np.ndarray
    eval_labels: np.ndarray

    def measure(self):
        acc = metrics.accuracy(self.fwd, self.eval_images, self.eval_labels)
        ssim = float(np.mean(extraction_ssim(self.transposed, self.wm)))
        return acc, ssim


@dataclass
class AttackTrace:
    kind: str
    entries: list = field(default_factory=list)
    emitted: list = field(default_factory=list)
    seconds: float = 0.0

    def record(self, **kv):
        self.entries.append(kv)

    @property
    def final(self):
        return self.entries[-1] if self.entries else {}

    def to_dict(self):
        return {
            "kind": self.kind,
            "entries": self.entries,
            "emitted": self.emitted,
            "seconds": self.seconds,
        }


# ------------------------------------------------------------- fine-tuning


def fine_tune(store, fwd, dataset, base_lr, lr_factor, epochs, probe, batch_size=64, seed=100):
    """Continue main-task training at base_lr * lr_factor with a fresh Adam."""
    if epochs < 1:
        raise AttackError(f"fine_tune needs epochs >= 1, got {epochs}")
    opt = Adam(lr=base_lr * lr_factor)
    rng = np.random.default_rng([seed, 17])
    trace = AttackTrace(kind="fine_tune")
    t0 = time.perf_counter()
    acc, ssim = probe.measure()
    trace.record(epoch=0, accuracy=acc, mean_ssim=ssim)
    for epoch in range(1, epochs + 1):
        for images, labels in minibatches(dataset, batch_size, rng):
            train_step(store, fwd, images, labels, opt)
        acc, ssim = probe.measure()
        trace.record(epoch=epoch, accuracy=acc, mean_ssim=ssim)
    trace.seconds = time.perf_counter() - t0
    return trace


# ----------------------------------------------------------------- pruning


def prunable_ids(store):
    """Weight tensors only: biases and batchnorm scale/shift are excluded."""
    return [p.id for p in store.parameters() if p.id.endswith(".w")]


def prune(store, level):
    """Zero the lowest-magnitude floor(level * N) weights, ranked globally
    across all weight tensors."""
    if not 0.0 <= level < 1.0:
        raise AttackError(f"prune level must be in [0, 1), got {level}")
    ids = prunable_ids(store)
    if not ids:
        raise AttackError("store has no prunable weight tensors")
    flat = np.concatenate([store.get(pid).data.reshape(-1) for pid in ids])
    k = int(np.floor(level * flat.size))
    if k == 0:
        return store
    cut = np.argsort(np.abs(flat), kind="stable")[:k]
    mask = np.ones(flat.size, dtype=bool)
    mask[cut] = False
    off = 0
    for pid in ids:
        p = store.get(pid)
        n = p.data.size
        p.data = (p.data.reshape(-1) * mask[off : off + n]).reshape(p.data.shape)
        off += n
    return store


def fine_prune(store, fwd, dataset, base_lr, probe, epochs=2, level=0.4, batch_size=64, seed=101):
    """Fine-tune for a couple of epochs, then prune."""
    trace = fine_tune(store, fwd, dataset, base_lr, 1.0, epochs, probe, batch_size, seed=seed)
    trace.kind = "fine_prune"
    t0 = time.perf_counter()
    prune(store, level)
    acc, ssim = probe.measure()
    trace.record(epoch=f"prune@{level}", accuracy=acc, mean_ssim=ssim)
    trace.seconds += time.perf_counter() - t0
    return trace


# ------------------------------------------------------- erasure/overwrite


def make_adversary_watermark(
    spec,
    wm,
    key_source="random",
    secret_source="noise",
    seed=999,
    unwatermarked_seed=1234,
    added_dropout_rate=0.3,
):
    """Build the adversary's key/secret pairs.

    key_source: "embedded" (knows the true keys) or "random".
    secret_source: "noise", "black", or "unwatermarked_extraction" (what a
    freshly initialized model of the same architecture extracts for the
    adversary's keys).
    """
    n = len(wm)
    width = wm.keys[0].width
    shape = wm.secrets[0].image.shape
    if key_source == "embedded":
        keys = [WatermarkKey(k.vector.copy()) for k in wm.keys]
    elif key_source == "random":
        keys = generate_keys(n, width, seed=seed)
    else:
        raise AttackError(f"unknown key_source {key_source!r}")
    rng = np.random.default_rng([seed, 31])
    if secret_source == "noise":
        secrets = [
            WatermarkSecret(rng.random(shape, dtype=np.float32), name=f"noise{i}")
            for i in range(n)
        ]
    elif secret_source == "black":
        secrets = [
            WatermarkSecret(np.zeros(shape, dtype=np.float32), name=f"black{i}")
            for i in range(n)
        ]
    elif secret_source == "unwatermarked_extraction":
        from .graph import init_params

        clean = ParameterStore(seed=unwatermarked_seed)
        init_params(spec, clean)
        clean_t = transpose_model(spec, clean, added_dropout_rate=added_dropout_rate)
        images = extract(clean_t, keys)
        secrets = [
            WatermarkSecret(np.clip(images[i], 0.0, 1.0), name=f"clean{i}")
            for i in range(n)
        ]
    else:
        raise AttackError(f"unknown secret_source {secret_source!r}")
    return Watermark(
        keys=keys,
        secrets=secrets,
        ssim_stop=wm.ssim_stop,
        max_steps=wm.max_steps,
        ssim_weight=wm.ssim_weight,
        mse_weight=wm.mse_weight,
    )


def adversarial_hardening(
    store, transposed, adversary_wm, opt, steps, probe, checkpoints=None, emit_dir=None
):
    """Run the hardening mechanism on the adversary's pairs, measuring the
    damage to the true watermark at each checkpoint step."""
    if steps < 1:
        raise AttackError(f"need steps >= 1, got {steps}")
    checkpoints = set(checkpoints) if checkpoints else set(range(1, steps + 1))
    keys = adversary_wm.key_matrix()
    secrets = adversary_wm.secret_batch()
    trace = AttackTrace(kind="adversarial_hardening")
    t0 = time.perf_counter()
    acc, ssim = probe.measure()
    trace.record(step=0, accuracy=acc, mean_ssim=ssim)
    for step in range(1, steps + 1):
        out, tape = transposed.forward(keys, mode="train")
        with recording(tape):
            loss, _, _ = watermark_loss(out, secrets, adversary_wm)
        backward(tape, loss)
        opt.step(store)
        if step in checkpoints:
            acc, ssim = probe.measure()
            trace.record(step=step, accuracy=acc, mean_ssim=ssim)
            if emit_dir is not None:
                from .watermark import verify

                report = verify(
                    extract(transposed, probe.wm),
                    probe.wm.secrets,
                    emit_dir=os.path.join(emit_dir, f"step{step:04d}"),
                )
                trace.emitted.extend(report.emitted)
    trace.seconds = time.perf_counter() - t0
    return trace


def erase_watermark(store, transposed, adversary_wm, opt, steps, probe, checkpoints=None, emit_dir=None):
    trace = adversarial_hardening(
        store, transposed, adversary_wm, opt, steps, probe, checkpoints, emit_dir
    )
    trace.kind = "erase"
    return trace


def overwrite_watermark(store, transposed, new_wm, opt, steps, probe, checkpoints=None, emit_dir=None):
    """Embed the adversary's own watermark; the trace tracks what remains of
    the original one."""
    trace = adversarial_hardening(
        store, transposed, new_wm, opt, steps, probe, checkpoints, emit_dir
    )
    trace.kind = "overwrite"
    return trace


# --------------------------------------------------- cross-dataset transfer


def cross_dataset_finetune(
    store,
    spec,
    new_dataset,
    new_classes,
    wm,
    lr,
    epochs,
    eval_images,
    eval_labels,
    batch_size=64,
    added_dropout_rate=0.3,
    frozen_branches=None,
    seed=102,
):
    """Swap the classifier head, fine-tune on a different dataset, then
    restore the archived head for extraction (the head acts as part of the
    key). Returns (trace, spec_after) where spec_after has the new head
    installed again, leaving the adapted model usable."""
    swapped_spec, archive = swap_last_layer(spec, store, new_classes)
    fwd_b = build_forward(swapped_spec, store)
    opt = Adam(lr=lr)
    rng = np.random.default_rng([seed, 19])
    trace = AttackTrace(kind="cross_dataset_finetune")
    t0 = time.perf_counter()
    for epoch in range(1, epochs + 1):
        for images, labels in minibatches(new_dataset, batch_size, rng):
            train_step(store, fwd_b, images, labels, opt)
        acc_b = metrics.accuracy(fwd_b, new_dataset.images, new_dataset.labels)
        trace.record(epoch=epoch, accuracy_new_task=acc_b)

    # extraction with the adapted (swapped) head still in place
    twd_swapped = transpose_model(
        swapped_spec, store, added_dropout_rate=added_dropout_rate, frozen_branches=frozen_branches
    )
    adapted_keys = generate_keys(len(wm), new_classes, seed=seed)
    swapped_images = extract(twd_swapped, adapted_keys)
    with np.errstate(all="ignore"):
        swapped_ssim = float(
            np.mean(
                metrics.ssim_per_image(
                    np.clip(swapped_images, 0.0, 1.0), wm.secret_batch()
                ).data
            )
        )

    # restore the original head, then extract with the true keys
    new_head = {
        "w_id": archive["w_id"],
        "b_id": archive["b_id"],
        "w": store.get(archive["w_id"]).data.copy(),
        "b": store.get(archive["b_id"]).data.copy(),
        "out_dim": new_classes,
    }
    restored_spec = restore_last_layer(swapped_spec, store, archive)
    twd = transpose_model(
        restored_spec, store, added_dropout_rate=added_dropout_rate, frozen_branches=frozen_branches
    )
    restored_ssim = float(np.mean(extraction_ssim(twd, wm)))
    fwd_a = build_forward(restored_spec, store)
    acc_a = metrics.accuracy(fwd_a, eval_images, eval_labels)
    trace.record(
        epoch="extraction",
        accuracy=acc_a,
        mean_ssim=restored_ssim,
        swapped_head_ssim=swapped_ssim,
    )
    spec_after = restore_last_layer(restored_spec, store, new_head)
    trace.seconds = time.perf_counter() - t0
    return trace, spec_after
