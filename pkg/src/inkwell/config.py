"""Experiment configuration: a human-readable YAML file with sections for
model, dataset, watermark, training, and attacks. Unknown keys are errors
so typos fail fast (exit code 2 at the CLI)."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .graph import PRESETS


class ConfigError(Exception):
    pass


def _take(section, raw, fields):
    """Strict extraction: every key in `raw` must be declared in `fields`
    (a name -> default mapping); returns the merged dict."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"section '{section}' must be a mapping, got {type(raw).__name__}")
    unknown = set(raw) - set(fields)
    if unknown:
        raise ConfigError(
            f"section '{section}': unknown keys {sorted(unknown)}; allowed: {sorted(fields)}"
        )
    merged = dict(fields)
    merged.update(raw)
    return merged


@dataclass
class ModelConfig:
    preset: str = "default_cnn"
    input_shape: tuple = (1, 28, 28)
    classes: int = 10
    channels: tuple = (8, 16)
    hidden: tuple = (512, 256)
    added_dropout: float = 0.3
    warmup_epochs: int = 3


@dataclass
class DatasetConfig:
    source: str = "synthetic"
    classes: int = 10
    per_class: int = 200
    test_per_class: int = 100
    side: int = 28
    channels: int = 1
    seed: int = 0
    subset: int | None = None
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    train_files: list = field(default_factory=list)
    test_files: list = field(default_factory=list)


@dataclass
class PayloadConfig:
    bits: int = 36
    file: str | None = None
    bits_per_image: int = 100
    ecc: str = "none"
    seed: int = 5


@dataclass
class WatermarkConfig:
    n_keys: int = 1
    key_seed: int | None = None
    key_low: float = -10.0
    key_high: float = 10.0
    keys_file: str | None = None
    secret_source: str = "text"
    texts: list = field(default_factory=lambda: ["ABCD"])
    secret_files: list = field(default_factory=list)
    payload: PayloadConfig = field(default_factory=PayloadConfig)
    ssim_stop: float = 0.95
    max_steps: int = 10000
    ssim_weight: float = 1.0
    mse_weight: float = 1.0


@dataclass
class TrainingConfig:
    optimizer: str = "adam"
    lr: float = 1e-4
    wm_optimizer: str = "adam"
    wm_lr: float = 1e-4
    epochs: int = 5
    batch_size: int = 64
    harden: bool = True
    constraint: bool = True


@dataclass
class AttackConfig:
    kind: str
    params: dict = field(default_factory=dict)


@dataclass
class ExperimentConfig:
    name: str
    seed: int
    output_dir: str
    model: ModelConfig
    dataset: DatasetConfig
    watermark: WatermarkConfig
    training: TrainingConfig
    attacks: list
    config_hash: str = ""
    source_path: str = ""

    def key_seed(self):
        if self.watermark.key_seed is not None:
            return self.watermark.key_seed
        return self.seed * 1000 + 11


_ATTACK_FIELDS = {
    "fine_tune": {"lr_factor": 1.0, "epochs": 4, "split": "train"},
    "prune": {"levels": [0.4]},
    "fine_prune": {"epochs": 2, "level": 0.4},
    "erase": {
        "key_source": "embedded",
        "secret_source": "noise",
        "steps": 100,
        "checkpoint_every": 1,
        "emit_images": False,
        "adversary_seed": 999,
    },
    "overwrite": {"steps": 100, "text": "WX9", "checkpoint_every": 1, "adversary_seed": 998},
    "cross_dataset": {"classes": 4, "epochs": 2, "lr_factor": 1.0, "dataset_seed": 77},
}


def parse_config(doc, source_path=""):
    top = _take(
        "top level",
        doc,
        {
            "experiment": "run",
            "seed": 7,
            "output_dir": "runs/out",
            "model": {},
            "dataset": {},
            "watermark": {},
            "training": {},
            "attacks": [],
        },
    )
    m = _take("model", top["model"], {f: getattr(ModelConfig(), f) for f in ModelConfig.__dataclass_fields__})
    model = ModelConfig(**{**m, "input_shape": tuple(m["input_shape"]), "channels": tuple(m["channels"]), "hidden": tuple(m["hidden"])})
    if model.preset not in PRESETS:
        raise ConfigError(f"model.preset {model.preset!r} not one of {sorted(PRESETS)}")

    d = _take("dataset", top["dataset"], {f: getattr(DatasetConfig(), f) for f in DatasetConfig.__dataclass_fields__})
    dataset = DatasetConfig(**d)
    if dataset.source not in ("synthetic", "idx", "cifar10"):
        raise ConfigError(f"dataset.source {dataset.source!r} not one of ['synthetic', 'idx', 'cifar10']")
    if dataset.source == "idx" and not (dataset.train_images and dataset.train_labels):
        raise ConfigError("dataset.source 'idx' needs train_images and train_labels paths")
    if dataset.source == "cifar10" and not dataset.train_files:
        raise ConfigError("dataset.source 'cifar10' needs train_files")

    wraw = _take("watermark", top["watermark"], {f: getattr(WatermarkConfig(), f) for f in WatermarkConfig.__dataclass_fields__})
    praw = wraw["payload"]
    if isinstance(praw, PayloadConfig):
        payload = praw
    else:
        payload = PayloadConfig(**_take("watermark.payload", praw, {f: getattr(PayloadConfig(), f) for f in PayloadConfig.__dataclass_fields__}))
    if payload.ecc not in ("none", "hamming74"):
        raise ConfigError(f"watermark.payload.ecc {payload.ecc!r} not one of ['none', 'hamming74']")
    watermark = WatermarkConfig(**{**wraw, "payload": payload})
    if watermark.secret_source not in ("text", "files", "payload"):
        raise ConfigError(
            f"watermark.secret_source {watermark.secret_source!r} not one of ['text', 'files', 'payload']"
        )
    if not watermark.key_low < watermark.key_high:
        raise ConfigError(f"watermark key range [{watermark.key_low}, {watermark.key_high}] is empty")

    t = _take("training", top["training"], {f: getattr(TrainingConfig(), f) for f in TrainingConfig.__dataclass_fields__})
    training = TrainingConfig(**t)
    for which in (training.optimizer, training.wm_optimizer):
        if which not in ("adam", "sgd"):
            raise ConfigError(f"optimizer {which!r} not one of ['adam', 'sgd']")

    attacks = []
    if not isinstance(top["attacks"], list):
        raise ConfigError("attacks must be a list")
    for i, entry in enumerate(top["attacks"]):
        if not isinstance(entry, dict) or "kind" not in entry:
            raise ConfigError(f"attacks[{i}] must be a mapping with a 'kind'")
        kind = entry["kind"]
        if kind not in _ATTACK_FIELDS:
            raise ConfigError(f"attacks[{i}].kind {kind!r} not one of {sorted(_ATTACK_FIELDS)}")
        params = _take(f"attacks[{i}] ({kind})", {k: v for k, v in entry.items() if k != "kind"}, _ATTACK_FIELDS[kind])
        attacks.append(AttackConfig(kind=kind, params=params))

    return ExperimentConfig(
        name=str(top["experiment"]),
        seed=int(top["seed"]),
        output_dir=str(top["output_dir"]),
        model=model,
        dataset=dataset,
        watermark=watermark,
        training=training,
        attacks=attacks,
        source_path=source_path,
    )


def load_config(path):
    raw = Path(path).read_bytes()
    try:
        doc = yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: not valid YAML: {e}") from e
    if doc is None:
        doc = {}
    cfg = parse_config(doc, source_path=str(path))
    cfg.config_hash = hashlib.sha256(raw).hexdigest()
    return cfg


def bundled_config_path(name):
    """Path of a config shipped with the package (name with or without .yaml)."""
    base = Path(__file__).parent / "configs"
    candidate = base / (name if name.endswith((".yaml", ".yml", ".json")) else f"{name}.yaml")
    if not candidate.exists():
        have = sorted(p.name for p in base.iterdir())
        raise ConfigError(f"no bundled config {name!r}; available: {have}")
    return candidate
