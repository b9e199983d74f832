"""Watermark composition, hardening, constraint training, and extraction.

A watermark is a list of (key, secret) pairs: keys are random vectors the
width of the model's output layer, secrets are input-shaped images in
[0, 1]. Hardening trains only the transposed graph until the extracted
images match the secrets (dual SSIM + MSE loss); constraint training then
alternates one main-task step and one watermark step per minibatch so both
objectives hold in the shared weights.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import metrics, ops
from .autograd import backward, no_recording, recording
from .font import render_text
from .training import minibatches, train_step


class WatermarkError(Exception):
    pass


class HardeningDiverged(Exception):
    pass


@dataclass(frozen=True)
class WatermarkKey:
    vector: np.ndarray

    @property
    def width(self):
        return self.vector.shape[0]


@dataclass(frozen=True)
class WatermarkSecret:
    image: np.ndarray  # (C, H, W) float32 in [0, 1]
    name: str = ""


@dataclass
class Watermark:
    keys: list
    secrets: list
    ssim_stop: float = 0.95
    max_steps: int = 10000
    ssim_weight: float = 1.0
    mse_weight: float = 1.0

    def __post_init__(self):
        if not self.keys:
            raise WatermarkError("watermark needs at least one key/secret pair")
        if len(self.keys) != len(self.secrets):
            raise WatermarkError(
                f"{len(self.keys)} keys vs {len(self.secrets)} secrets"
            )
        widths = {k.width for k in self.keys}
        if len(widths) != 1:
            raise WatermarkError(f"inconsistent key widths: {sorted(widths)}")
        shapes = {s.image.shape for s in self.secrets}
        if len(shapes) != 1:
            raise WatermarkError(f"inconsistent secret shapes: {sorted(shapes)}")
        for i, s in enumerate(self.secrets):
            if s.image.min() < 0.0 or s.image.max() > 1.0:
                raise WatermarkError(f"secret {i} has values outside [0, 1]")

    def __len__(self):
        return len(self.keys)

    def key_matrix(self):
        return np.stack([k.vector for k in self.keys]).astype(np.float32)

    def secret_batch(self):
        return np.stack([s.image for s in self.secrets]).astype(np.float32)


def generate_keys(n, width, low=-10.0, high=10.0, seed=0):
    """Uniform random keys in [low, high], one per requested pair."""
    if n < 1:
        raise WatermarkError(f"need at least one key, got n={n}")
    if width < 1:
        raise WatermarkError(f"key width must be positive, got {width}")
    if not low < high:
        raise WatermarkError(f"bad key range [{low}, {high}]")
    rng = np.random.default_rng([seed, 23])
    return [
        WatermarkKey(rng.uniform(low, high, size=width).astype(np.float32))
        for _ in range(n)
    ]


def save_keys(keys, path):
    with open(path, "w") as f:
        json.dump({"keys": [[float(v) for v in k.vector] for k in keys]}, f, indent=1)


def load_keys(path):
    with open(path) as f:
        doc = json.load(f)
    if not isinstance(doc, dict) or "keys" not in doc:
        raise WatermarkError(f"{path}: expected a top-level 'keys' list")
    rows = doc["keys"]
    if not isinstance(rows, list) or not rows:
        raise WatermarkError(f"{path}: 'keys' must be a non-empty list")
    keys = []
    for i, row in enumerate(rows):
        if not isinstance(row, list) or not all(isinstance(v, (int, float)) for v in row):
            raise WatermarkError(f"{path}: key {i} is not a list of numbers")
        keys.append(WatermarkKey(np.asarray(row, dtype=np.float32)))
    widths = {k.width for k in keys}
    if len(widths) != 1:
        raise WatermarkError(f"{path}: inconsistent key widths {sorted(widths)}")
    return keys


def text_secret(text, shape, name=None):
    return WatermarkSecret(render_text(text, shape), name=name or text)


# ------------------------------------------------------------------ reports


@dataclass
class HardeningReport:
    steps: int
    reached_stop: bool
    final_train_ssim: float
    eval_mean_ssim: float
    per_key_ssim: list
    best_ssim_history: list  # best-so-far, sampled every log_every steps
    seconds: float

    def to_dict(self):
        return {
            "steps": self.steps,
            "reached_stop": self.reached_stop,
            "final_train_ssim": self.final_train_ssim,
            "eval_mean_ssim": self.eval_mean_ssim,
            "per_key_ssim": self.per_key_ssim,
            "best_ssim_history": self.best_ssim_history,
            "seconds": self.seconds,
        }


@dataclass
class TrainReport:
    epochs: int
    accuracy_per_epoch: list
    ssim_per_epoch: list
    seconds: float

    def to_dict(self):
        return {
            "epochs": self.epochs,
            "accuracy_per_epoch": self.accuracy_per_epoch,
            "ssim_per_epoch": self.ssim_per_epoch,
            "seconds": self.seconds,
        }


@dataclass
class ExtractionReport:
    per_key_ssim: list
    mean_ssim: float
    emitted: list = field(default_factory=list)

    def to_dict(self):
        return {
            "per_key_ssim": self.per_key_ssim,
            "mean_ssim": self.mean_ssim,
            "emitted": self.emitted,
        }


# -------------------------------------------------------------------- flows


def watermark_loss(out, secrets, wm):
    """Dual objective: ssim_weight * (1 - mean SSIM) + mse_weight * MSE.

    Returns (loss tensor, mean ssim float, per-image ssim array).
    """
    per = metrics.ssim_per_image(out, secrets)
    s_mean = ops.mean(per)
    m = metrics.mse(out, secrets)
    loss = ops.add(
        ops.mul(np.float32(wm.ssim_weight), ops.sub(np.float32(1.0), s_mean)),
        ops.mul(np.float32(wm.mse_weight), m),
    )
    return loss, float(s_mean.data), per.data.copy()


def harden(store, transposed, wm, opt, log_every=100):
    """Train the transposed graph until the watermark extracts at
    wm.ssim_stop mean SSIM or wm.max_steps is hit.

    The stop criterion is checked on eval-mode extractions every log_every
    steps: extraction quality is what hardening is after, and the added
    dropout depresses the per-step train-mode score well below it. Raises
    HardeningDiverged on a non-finite loss.
    """
    keys = wm.key_matrix()
    secrets = wm.secret_batch()
    best = -1.0
    best_train = -1.0
    history = []
    steps = 0
    reached = False
    t0 = time.perf_counter()
    for step in range(1, wm.max_steps + 1):
        out, tape = transposed.forward(keys, mode="train")
        with recording(tape):
            loss, s_mean, _ = watermark_loss(out, secrets, wm)
        if not np.isfinite(loss.data):
            raise HardeningDiverged(f"non-finite watermark loss at step {step}")
        backward(tape, loss)
        opt.step(store)
        steps = step
        best_train = max(best_train, s_mean)
        if step % log_every == 0 or step == wm.max_steps:
            per_key = extraction_ssim(transposed, wm)
            current = float(np.mean(per_key))
            best = max(best, current)
            history.append(best)
            if current >= wm.ssim_stop:
                reached = True
                break
    per_key = extraction_ssim(transposed, wm)
    return HardeningReport(
        steps=steps,
        reached_stop=reached,
        final_train_ssim=best_train,
        eval_mean_ssim=float(np.mean(per_key)),
        per_key_ssim=[float(v) for v in per_key],
        best_ssim_history=history,
        seconds=time.perf_counter() - t0,
    )


def constraint_train(
    store,
    fwd,
    transposed,
    dataset,
    wm,
    main_opt,
    wm_opt,
    epochs,
    batch_size=64,
    eval_data=None,
    seed=0,
):
    """Alternate one main-task step and one watermark step per minibatch."""
    keys = wm.key_matrix()
    secrets = wm.secret_batch()
    rng = np.random.default_rng([seed, 13])
    probe = eval_data if eval_data is not None else dataset
    acc_hist, ssim_hist = [], []
    t0 = time.perf_counter()
    for _ in range(epochs):
        for images, labels in minibatches(dataset, batch_size, rng):
            train_step(store, fwd, images, labels, main_opt)
            out, tape = transposed.forward(keys, mode="train")
            with recording(tape):
                loss, _, _ = watermark_loss(out, secrets, wm)
            if not np.isfinite(loss.data):
                raise HardeningDiverged("non-finite watermark loss in constraint training")
            backward(tape, loss)
            wm_opt.step(store)
        acc_hist.append(metrics.accuracy(fwd, probe.images, probe.labels))
        ssim_hist.append(float(np.mean(extraction_ssim(transposed, wm))))
    return TrainReport(
        epochs=epochs,
        accuracy_per_epoch=acc_hist,
        ssim_per_epoch=ssim_hist,
        seconds=time.perf_counter() - t0,
    )


def extract(transposed, keys):
    """Eval-mode pass of keys through the transposed graph; raw outputs
    (clamping to [0, 1] happens only at emission/decoding time)."""
    if isinstance(keys, Watermark):
        key_matrix = keys.key_matrix()
    elif isinstance(keys, list):
        key_matrix = np.stack([k.vector for k in keys]).astype(np.float32)
    else:
        key_matrix = np.asarray(keys, dtype=np.float32)
    out, _ = transposed.forward(key_matrix, mode="eval", record=False)
    return out.data


def extraction_ssim(transposed, wm):
    """Per-key eval-mode SSIM between extracted images and secrets."""
    images = extract(transposed, wm)
    with no_recording():
        per = metrics.ssim_per_image(images, wm.secret_batch())
    return per.data.copy()


def verify(extracted, secrets, emit_dir=None, prefix="key"):
    """Score extracted images against secrets; optionally emit side-by-side
    images (secret | extraction) per key plus a composite strip. Reports
    evidence only; no pass/fail decision is made here."""
    from .data import write_pgm, write_ppm

    secret_batch = np.stack([s.image for s in secrets]).astype(np.float32)
    if extracted.shape != secret_batch.shape:
        raise WatermarkError(
            f"extracted batch {extracted.shape} vs secrets {secret_batch.shape}"
        )
    with no_recording():
        per = metrics.ssim_per_image(extracted, secret_batch).data
    report = ExtractionReport(
        per_key_ssim=[float(v) for v in per], mean_ssim=float(per.mean())
    )
    if emit_dir is not None:
        import os

        os.makedirs(emit_dir, exist_ok=True)
        clipped = np.clip(extracted, 0.0, 1.0)
        writer = write_pgm if secret_batch.shape[1] == 1 else write_ppm
        gap = np.ones((secret_batch.shape[1], secret_batch.shape[2], 2), dtype=np.float32) * 0.5
        pairs = []
        for i in range(len(per)):
            pair = np.concatenate([secret_batch[i], gap, clipped[i]], axis=2)
            path = os.path.join(emit_dir, f"{prefix}{i:02d}.pgm" if secret_batch.shape[1] == 1 else f"{prefix}{i:02d}.ppm")
            writer(pair, path)
            report.emitted.append(path)
            pairs.append(pair)
        hgap = np.ones((secret_batch.shape[1], 2, pairs[0].shape[2]), dtype=np.float32) * 0.5
        strip = []
        for i, pair in enumerate(pairs):
            if i:
                strip.append(hgap)
            strip.append(pair)
        strip_img = np.concatenate(strip, axis=1)
        strip_path = os.path.join(
            emit_dir, "strip.pgm" if secret_batch.shape[1] == 1 else "strip.ppm"
        )
        writer(strip_img, strip_path)
        report.emitted.append(strip_path)
    return report
