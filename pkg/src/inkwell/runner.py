"""Experiment orchestration.

Builds datasets, model, and watermark from an ExperimentConfig, runs the
life-cycle phases (optional residual warm-up, hardening, constraint
training, attacks on cloned stores, extraction/verification), and writes:

  out/keys.json            watermark keys
  out/secrets/*.pgm        secret images
  out/checkpoints/*.inkw   hardened and final parameter snapshots
  out/extraction/*.pgm     per-key side-by-side images plus a strip
  out/metrics.json         all numbers, bit-exact reproducible per seed
  out/manifest.json        config hash, seeds, phase timings, artifact list

Wall-clock timings live only in the manifest so metrics.json is identical
across repeated runs of the same config and seed.
"""
from __future__ import annotations

import json
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import codec, metrics
from .attacks import (
    Probe,
    cross_dataset_finetune,
    erase_watermark,
    fine_prune,
    fine_tune,
    make_adversary_watermark,
    overwrite_watermark,
    prune,
)
from .config import ExperimentConfig
from .data import (
    Dataset,
    SyntheticSpec,
    load_cifar10,
    load_idx,
    make_synthetic_split,
    read_secret_image,
    write_pgm,
    write_ppm,
)
from .graph import PRESETS, build_forward, capture_frozen_branch, transpose_model, Residual
from .optim import Adam, SGD
from .params import ParameterStore, load_checkpoint, save_checkpoint
from .watermark import (
    Watermark,
    WatermarkSecret,
    constraint_train,
    extract,
    generate_keys,
    harden,
    load_keys,
    save_keys,
    text_secret,
    verify,
)


class RunnerError(Exception):
    pass


def clone_store(store):
    """Independent copy of all parameter values (fresh RNG, same seed)."""
    clone = ParameterStore(seed=store.seed)
    for p in store.parameters():
        clone.add(p.id, p.data.copy())
    return clone


def build_model_spec(mc):
    builder = PRESETS[mc.preset]
    kwargs = {"input_shape": tuple(mc.input_shape), "classes": mc.classes}
    if mc.preset in ("default_cnn", "default_cnn_bn"):
        kwargs["channels"] = tuple(mc.channels)
        kwargs["hidden"] = tuple(mc.hidden)
    elif mc.preset == "fc_net":
        kwargs["hidden"] = tuple(mc.hidden)
    elif mc.preset == "tiny_residual_net":
        kwargs["channels"] = mc.channels[0]
    return builder(**kwargs)


def build_datasets(dc, subset=None):
    if dc.source == "synthetic":
        spec = SyntheticSpec(
            classes=dc.classes,
            per_class=dc.per_class,
            side=dc.side,
            channels=dc.channels,
            seed=dc.seed,
        )
        train, test = make_synthetic_split(spec, dc.test_per_class)
    elif dc.source == "idx":
        train = load_idx(dc.train_images, dc.train_labels)
        if dc.test_images and dc.test_labels:
            test = load_idx(dc.test_images, dc.test_labels)
        else:
            train, test = train.split(0.9, seed=dc.seed)
    else:
        train = load_cifar10(dc.train_files)
        if dc.test_files:
            test = load_cifar10(dc.test_files)
        else:
            train, test = train.split(0.9, seed=dc.seed)
    if subset:
        train = train.subset(subset, seed=dc.seed)
    return train, test


def build_payload_bits(pc):
    """(data_bits, code_bits) for a payload watermark; code == data without ECC."""
    if pc.file:
        data = codec.bytes_to_bits(Path(pc.file).read_bytes())
        if pc.bits:
            data = data[: pc.bits]
    else:
        rng = np.random.default_rng([pc.seed, 41])
        data = rng.integers(0, 2, size=pc.bits).astype(np.uint8)
    code = codec.hamming74_encode(data) if pc.ecc == "hamming74" else data.copy()
    return data, code


def build_watermark(cfg, width, image_shape, seed):
    wc = cfg.watermark
    payload_info = None
    if wc.secret_source == "payload":
        data, code = build_payload_bits(wc.payload)
        chunks = codec.chunk_bits(code, wc.payload.bits_per_image)
        secrets = [
            WatermarkSecret(codec.encode_bits_image(c, image_shape), name=f"payload{i}")
            for i, c in enumerate(chunks)
        ]
        payload_info = {
            "data_bits": data.tolist(),
            "code_length": int(len(code)),
            "ecc": wc.payload.ecc,
            "bits_per_image": wc.payload.bits_per_image,
            "n_images": len(chunks),
        }
    elif wc.secret_source == "files":
        if not wc.secret_files:
            raise RunnerError("watermark.secret_source 'files' needs secret_files")
        secrets = [
            WatermarkSecret(read_secret_image(p), name=Path(p).stem) for p in wc.secret_files
        ]
    else:
        if len(wc.texts) < wc.n_keys:
            raise RunnerError(
                f"{wc.n_keys} keys but only {len(wc.texts)} texts; give one text per key"
            )
        secrets = [text_secret(t, image_shape) for t in wc.texts[: wc.n_keys]]
    for s in secrets:
        if s.image.shape != tuple(image_shape):
            raise RunnerError(
                f"secret {s.name!r} has shape {s.image.shape}, model input is {tuple(image_shape)}"
            )
    n = len(secrets)
    if wc.keys_file:
        keys = load_keys(wc.keys_file)
        if len(keys) < n:
            raise RunnerError(f"{n} secrets but keys file holds {len(keys)} keys")
        keys = keys[:n]
        if keys[0].width != width:
            raise RunnerError(f"keys have width {keys[0].width}, model output is {width}")
    else:
        key_seed = wc.key_seed if wc.key_seed is not None else seed * 1000 + 11
        keys = generate_keys(n, width, wc.key_low, wc.key_high, seed=key_seed)
    wm = Watermark(
        keys=keys,
        secrets=secrets,
        ssim_stop=wc.ssim_stop,
        max_steps=wc.max_steps,
        ssim_weight=wc.ssim_weight,
        mse_weight=wc.mse_weight,
    )
    return wm, payload_info


def _make_opt(kind, lr):
    return Adam(lr=lr) if kind == "adam" else SGD(lr=lr)


def decode_payload(images, payload_info):
    """BER of a payload watermark recovered from extracted images."""
    per = payload_info["bits_per_image"]
    chunks = [
        codec.decode_bits_image(np.clip(img, 0.0, 1.0), per) for img in images
    ]
    code = np.concatenate(chunks)[: payload_info["code_length"]]
    data = np.asarray(payload_info["data_bits"], dtype=np.uint8)
    corrections = 0
    if payload_info["ecc"] == "hamming74":
        decoded, corrections = codec.hamming74_decode(code)
        decoded = decoded[: data.size]
    else:
        decoded = code[: data.size]
    return {
        "ber": metrics.ber(decoded, data),
        "bit_errors": int((decoded != data).sum()),
        "bits": int(data.size),
        "corrections": corrections,
    }


def _strip_seconds(obj):
    if isinstance(obj, dict):
        return {k: _strip_seconds(v) for k, v in obj.items() if k != "seconds"}
    if isinstance(obj, list):
        return [_strip_seconds(v) for v in obj]
    return obj


def _relativize(obj, root):
    """Rewrite absolute paths under `root` as relative ones so the emitted
    JSON is identical no matter where the output directory lives."""
    if isinstance(obj, dict):
        return {k: _relativize(v, root) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_relativize(v, root) for v in obj]
    if isinstance(obj, str) and ("/" in obj or "\\" in obj):
        try:
            return Path(obj).resolve().relative_to(root).as_posix()
        except ValueError:
            return obj
    return obj


def run_experiment(cfg, out_dir=None, seed=None, subset=None):
    """Execute the configured experiment; returns (manifest, metrics) dicts."""
    seed = cfg.seed if seed is None else seed
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    phases = {}
    results = {"experiment": cfg.name, "seed": seed}

    @contextmanager
    def phase(name):
        t0 = time.perf_counter()
        yield
        phases[name] = round(time.perf_counter() - t0, 3)

    with phase("setup"):
        train, test = build_datasets(cfg.dataset, subset=subset)
        spec = build_model_spec(cfg.model)
        if spec.output_dim != cfg.model.classes:
            raise RunnerError("model classes and spec output width disagree")
        store = ParameterStore(seed=seed)
        from .graph import init_params

        init_params(spec, store)
        results["dataset"] = {
            "train_size": len(train),
            "test_size": len(test),
            "image_shape": list(train.image_shape),
        }

    frozen = None
    if any(isinstance(l, Residual) for l in spec.layers):
        with phase("warmup"):
            frozen = capture_frozen_branch(
                store,
                spec,
                train,
                warmup_epochs=cfg.model.warmup_epochs,
                lr=cfg.training.lr,
                batch_size=cfg.training.batch_size,
            )

    fwd = build_forward(spec, store)
    twd = transpose_model(
        spec, store, added_dropout_rate=cfg.model.added_dropout, frozen_branches=frozen
    )

    with phase("watermark_setup"):
        wm, payload_info = build_watermark(cfg, spec.output_dim, spec.input_shape, seed)
        save_keys(wm.keys, out / "keys.json")
        secrets_dir = out / "secrets"
        secrets_dir.mkdir(exist_ok=True)
        writer = write_pgm if spec.input_shape[0] == 1 else write_ppm
        ext = "pgm" if spec.input_shape[0] == 1 else "ppm"
        for i, s in enumerate(wm.secrets):
            writer(s.image, secrets_dir / f"secret{i:02d}.{ext}")

    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    if cfg.training.harden:
        with phase("harden"):
            opt = _make_opt(cfg.training.wm_optimizer, cfg.training.wm_lr)
            hreport = harden(store, twd, wm, opt)
        save_checkpoint(store, ckpt_dir / "hardened.inkw")
        results["hardening"] = hreport.to_dict()
        results["hardening"].pop("seconds")
        phases["harden_steps"] = hreport.steps

    if cfg.training.constraint:
        with phase("train"):
            main_opt = _make_opt(cfg.training.optimizer, cfg.training.lr)
            wm_opt = _make_opt(cfg.training.wm_optimizer, cfg.training.wm_lr)
            treport = constraint_train(
                store,
                fwd,
                twd,
                train,
                wm,
                main_opt,
                wm_opt,
                epochs=cfg.training.epochs,
                batch_size=cfg.training.batch_size,
                eval_data=test,
                seed=seed,
            )
        results["training"] = treport.to_dict()
        results["training"].pop("seconds")
    save_checkpoint(store, ckpt_dir / "final.inkw")

    with phase("extract"):
        images = extract(twd, wm)
        report = verify(images, wm.secrets, emit_dir=str(out / "extraction"))
        results["extraction"] = report.to_dict()
        results["final_accuracy"] = metrics.accuracy(fwd, test.images, test.labels)
        results["final_mean_ssim"] = report.mean_ssim
        if payload_info is not None:
            results["capacity"] = dict(payload_info)
            results["capacity"].pop("data_bits")
            results["capacity"]["after_training"] = decode_payload(images, payload_info)

    attack_results = []
    for i, atk in enumerate(cfg.attacks):
        with phase(f"attack{i}_{atk.kind}"):
            entry = _run_attack(
                i, atk, cfg, spec, store, frozen, wm, train, test, payload_info, out, seed
            )
        attack_results.append(entry)
    if attack_results:
        results["attacks"] = attack_results

    metrics_doc = _relativize(_strip_seconds(results), out.resolve())
    (out / "metrics.json").write_text(json.dumps(metrics_doc, indent=1, sort_keys=True))

    artifacts = sorted(
        str(p.relative_to(out)) for p in out.rglob("*") if p.is_file() and p.name != "manifest.json"
    )
    manifest = {
        "experiment": cfg.name,
        "config_path": cfg.source_path,
        "config_hash": cfg.config_hash,
        "seed": seed,
        "key_seed": cfg.watermark.key_seed if cfg.watermark.key_seed is not None else seed * 1000 + 11,
        "subset": subset,
        "phase_seconds": phases,
        "artifacts": artifacts,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest, metrics_doc


def _attack_graphs(spec, store, cfg, frozen):
    fwd = build_forward(spec, store)
    twd = transpose_model(
        spec, store, added_dropout_rate=cfg.model.added_dropout, frozen_branches=frozen
    )
    return fwd, twd


def _run_attack(i, atk, cfg, spec, store, frozen, wm, train, test, payload_info, out, seed):
    p = atk.params
    work = clone_store(store)
    fwd, twd = _attack_graphs(spec, work, cfg, frozen)
    probe = Probe(fwd, twd, wm, test.images, test.labels)
    entry = {"kind": atk.kind, "params": {k: v for k, v in p.items()}}

    if atk.kind == "fine_tune":
        data = train if p["split"] == "train" else test
        trace = fine_tune(
            work, fwd, data, cfg.training.lr, p["lr_factor"], p["epochs"], probe,
            batch_size=cfg.training.batch_size, seed=seed + 100 + i,
        )
        entry["trace"] = trace.to_dict()
        if payload_info is not None:
            entry["capacity_after"] = decode_payload(extract(twd, wm), payload_info)
    elif atk.kind == "prune":
        rows = []
        for level in p["levels"]:
            w2 = clone_store(store)
            f2, t2 = _attack_graphs(spec, w2, cfg, frozen)
            prune(w2, level)
            pr = Probe(f2, t2, wm, test.images, test.labels)
            acc, ssim = pr.measure()
            rows.append({"level": level, "accuracy": acc, "mean_ssim": ssim})
        entry["curve"] = rows
    elif atk.kind == "fine_prune":
        trace = fine_prune(
            work, fwd, train, cfg.training.lr, probe, epochs=p["epochs"], level=p["level"],
            batch_size=cfg.training.batch_size, seed=seed + 100 + i,
        )
        entry["trace"] = trace.to_dict()
    elif atk.kind == "erase":
        adv = make_adversary_watermark(
            spec, wm, key_source=p["key_source"], secret_source=p["secret_source"],
            seed=p["adversary_seed"], added_dropout_rate=cfg.model.added_dropout,
        )
        checkpoints = range(1, p["steps"] + 1, p["checkpoint_every"])
        emit = str(out / f"attack{i}_erase") if p["emit_images"] else None
        trace = erase_watermark(
            work, twd, adv, _make_opt(cfg.training.wm_optimizer, cfg.training.wm_lr),
            p["steps"], probe, checkpoints=checkpoints, emit_dir=emit,
        )
        entry["trace"] = trace.to_dict()
    elif atk.kind == "overwrite":
        new_wm = Watermark(
            keys=generate_keys(len(wm), spec.output_dim, seed=p["adversary_seed"]),
            secrets=[
                WatermarkSecret(text_secret(p["text"], spec.input_shape).image, name="overwrite")
                for _ in range(len(wm))
            ],
            ssim_stop=wm.ssim_stop,
            max_steps=wm.max_steps,
        )
        checkpoints = range(1, p["steps"] + 1, p["checkpoint_every"])
        trace = overwrite_watermark(
            work, twd, new_wm, _make_opt(cfg.training.wm_optimizer, cfg.training.wm_lr),
            p["steps"], probe, checkpoints=checkpoints,
        )
        entry["trace"] = trace.to_dict()
    elif atk.kind == "cross_dataset":
        side = cfg.dataset.side
        bshape = make_synthetic_split(
            SyntheticSpec(
                classes=p["classes"], per_class=cfg.dataset.per_class, side=side,
                channels=cfg.dataset.channels, seed=p["dataset_seed"],
            ),
            cfg.dataset.test_per_class,
        )[0]
        trace, _ = cross_dataset_finetune(
            work, spec, bshape, p["classes"], wm,
            lr=cfg.training.lr * p["lr_factor"], epochs=p["epochs"],
            eval_images=test.images, eval_labels=test.labels,
            batch_size=cfg.training.batch_size,
            added_dropout_rate=cfg.model.added_dropout, frozen_branches=frozen,
            seed=seed + 100 + i,
        )
        entry["trace"] = trace.to_dict()
    else:
        raise RunnerError(f"unknown attack kind {atk.kind!r}")
    return entry


# ----------------------------------------------------------- CLI back ends


def run_extract(cfg, checkpoint, keys_path, out_dir):
    """Extraction only: checkpoint + keys -> images on disk."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = build_model_spec(cfg.model)
    store = load_checkpoint(checkpoint, seed=cfg.seed)
    frozen = _frozen_for_checkpoint(cfg, spec, store)
    twd = transpose_model(
        spec, store, added_dropout_rate=cfg.model.added_dropout, frozen_branches=frozen
    )
    keys = load_keys(keys_path)
    images = np.clip(extract(twd, keys), 0.0, 1.0)
    writer = write_pgm if spec.input_shape[0] == 1 else write_ppm
    ext = "pgm" if spec.input_shape[0] == 1 else "ppm"
    paths = []
    for i, img in enumerate(images):
        path = out / f"extracted{i:02d}.{ext}"
        writer(img, path)
        paths.append(str(path))
    return paths


def _frozen_for_checkpoint(cfg, spec, store):
    """Residual models need frozen branches; for a trained checkpoint a
    plain eval pass (no warm-up training) suffices."""
    if not any(isinstance(l, Residual) for l in spec.layers):
        return None
    train, _ = build_datasets(cfg.dataset)
    return capture_frozen_branch(store, spec, train, warmup_epochs=0)


def run_verify(cfg, checkpoint, out_dir, seed=None):
    """Extraction + SSIM evidence against the configured secrets."""
    seed = cfg.seed if seed is None else seed
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = build_model_spec(cfg.model)
    store = load_checkpoint(checkpoint, seed=seed)
    frozen = _frozen_for_checkpoint(cfg, spec, store)
    twd = transpose_model(
        spec, store, added_dropout_rate=cfg.model.added_dropout, frozen_branches=frozen
    )
    wm, payload_info = build_watermark(cfg, spec.output_dim, spec.input_shape, seed)
    images = extract(twd, wm)
    report = verify(images, wm.secrets, emit_dir=str(out))
    doc = report.to_dict()
    if payload_info is not None:
        doc["capacity"] = decode_payload(images, payload_info)
    doc = _relativize(doc, out.resolve())
    (out / "verify.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    return doc


def run_attacks_on_checkpoint(cfg, checkpoint, out_dir, seed=None):
    """Apply the configured attacks to a trained checkpoint."""
    seed = cfg.seed if seed is None else seed
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = build_model_spec(cfg.model)
    store = load_checkpoint(checkpoint, seed=seed)
    frozen = _frozen_for_checkpoint(cfg, spec, store)
    train, test = build_datasets(cfg.dataset)
    wm, payload_info = build_watermark(cfg, spec.output_dim, spec.input_shape, seed)
    if not cfg.attacks:
        raise RunnerError("config has no attacks section")
    entries = []
    for i, atk in enumerate(cfg.attacks):
        entries.append(
            _run_attack(i, atk, cfg, spec, store, frozen, wm, train, test, payload_info, out, seed)
        )
    doc = _relativize(_strip_seconds({"attacks": entries}), out.resolve())
    (out / "attacks.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    return doc
