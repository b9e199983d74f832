"""Dataset loading and image file I/O.

Supported sources: IDX image/label pairs (big-endian, magics 0x00000803 /
0x00000801), CIFAR-10 binary batches (3073-byte records, channel-planar
RGB), and a deterministic synthetic set of thresholded Gaussian-blob
classes meant as a desk-scale stand-in for real digit data.

Grayscale images are written/read as binary PGM (P5, maxval 255), RGB as
binary PPM (P6).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD = 3073


class DataError(Exception):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    name: str = "dataset"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(
                f"{self.name}: {len(self.images)} images vs {len(self.labels)} labels"
            )

    def __len__(self):
        return len(self.images)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    @property
    def num_classes(self):
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def subset(self, n, seed=0):
        """First-n per shuffled order, deterministic in `seed`."""
        if n >= len(self):
            return self
        idx = np.random.default_rng(seed).permutation(len(self))[:n]
        return Dataset(self.images[idx], self.labels[idx], name=f"{self.name}[{n}]")

    def split(self, fraction, seed=0):
        """Deterministic (head, tail) split at `fraction`."""
        idx = np.random.default_rng(seed).permutation(len(self))
        cut = int(len(self) * fraction)
        head, tail = idx[:cut], idx[cut:]
        return (
            Dataset(self.images[head], self.labels[head], name=f"{self.name}/head"),
            Dataset(self.images[tail], self.labels[tail], name=f"{self.name}/tail"),
        )


# ----------------------------------------------------------------- IDX


def load_idx(images_path, labels_path):
    """Load an IDX image/label pair into a Dataset (pixels scaled to [0,1])."""
    with open(images_path, "rb") as f:
        blob = f.read()
    if len(blob) < 16:
        raise DataError(f"{images_path}: truncated IDX header ({len(blob)} bytes)")
    magic, n, rows, cols = struct.unpack_from(">iiii", blob, 0)
    if magic != IDX_IMAGE_MAGIC:
        raise DataError(
            f"{images_path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}"
        )
    need = 16 + n * rows * cols
    if len(blob) != need:
        raise DataError(f"{images_path}: expected {need} bytes, found {len(blob)}")
    images = np.frombuffer(blob, dtype=np.uint8, offset=16).reshape(n, 1, rows, cols)
    images = images.astype(np.float32) / 255.0

    with open(labels_path, "rb") as f:
        lblob = f.read()
    if len(lblob) < 8:
        raise DataError(f"{labels_path}: truncated IDX header ({len(lblob)} bytes)")
    lmagic, ln = struct.unpack_from(">ii", lblob, 0)
    if lmagic != IDX_LABEL_MAGIC:
        raise DataError(
            f"{labels_path}: bad magic 0x{lmagic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}"
        )
    if len(lblob) != 8 + ln:
        raise DataError(f"{labels_path}: expected {8 + ln} bytes, found {len(lblob)}")
    if ln != n:
        raise DataError(f"label count {ln} does not match image count {n}")
    labels = np.frombuffer(lblob, dtype=np.uint8, offset=8).astype(np.int64)
    return Dataset(images, labels, name="idx")


def write_idx(dataset, images_path, labels_path):
    """Inverse of load_idx, for fixtures and round trips."""
    n, c, rows, cols = dataset.images.shape
    if c != 1:
        raise DataError(f"IDX stores single-channel images, got {c} channels")
    pixels = np.clip(np.rint(dataset.images * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">iiii", IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">ii", IDX_LABEL_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


# ----------------------------------------------------------------- CIFAR-10


def load_cifar10(paths):
    """Load one or more CIFAR-10 binary batch files."""
    if isinstance(paths, (str, bytes)) or hasattr(paths, "__fspath__"):
        paths = [paths]
    images, labels = [], []
    for path in paths:
        with open(path, "rb") as f:
            blob = f.read()
        if len(blob) == 0 or len(blob) % CIFAR_RECORD:
            raise DataError(
                f"{path}: size {len(blob)} is not a multiple of {CIFAR_RECORD}-byte records"
            )
        records = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(records[:, 0].astype(np.int64))
        images.append(records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
    return Dataset(np.concatenate(images), np.concatenate(labels), name="cifar10")


# ---------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 10
    per_class: int = 200
    side: int = 28
    channels: int = 1
    blobs: int = 3
    noise: float = 0.35
    max_shift: int = 2
    seed: int = 0


def _class_prototype(rng, side, blobs):
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    acc = np.zeros((side, side))
    for _ in range(blobs):
        cy, cx = rng.uniform(side * 0.2, side * 0.8, size=2)
        sig = rng.uniform(side * 0.10, side * 0.22)
        acc += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig**2))
    return (acc > 0.5).astype(np.float32)


def _generate_synthetic(spec, per_class):
    """Class-grouped (images, labels) plus the rng for further use."""
    if spec.classes < 2:
        raise DataError(f"need at least 2 classes, got {spec.classes}")
    rng = np.random.default_rng([spec.seed, 47])
    protos = [_class_prototype(rng, spec.side, spec.blobs) for _ in range(spec.classes)]
    n = spec.classes * per_class
    images = np.empty((n, spec.channels, spec.side, spec.side), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    i = 0
    for cls, proto in enumerate(protos):
        for _ in range(per_class):
            dy, dx = rng.integers(-spec.max_shift, spec.max_shift + 1, size=2)
            img = np.roll(np.roll(proto, dy, axis=0), dx, axis=1)
            img = img + rng.normal(0.0, spec.noise, size=img.shape)
            images[i] = np.clip(img, 0.0, 1.0)[None].repeat(spec.channels, axis=0)
            labels[i] = cls
            i += 1
    return images, labels, rng


def make_synthetic(spec=SyntheticSpec()):
    """Deterministic blob-pattern classification set.

    Each class has a fixed thresholded-Gaussian-blob prototype; samples are
    the prototype under a small random shift plus pixel noise. Calibrated so
    a nearest-centroid rule clears 80% and a fresh CNN clears 90% train
    accuracy within two epochs.
    """
    images, labels, rng = _generate_synthetic(spec, spec.per_class)
    order = rng.permutation(len(labels))
    return Dataset(images[order], labels[order], name=f"synthetic{spec.classes}")


def make_synthetic_split(spec, test_per_class):
    """(train, test) datasets drawn from the same class prototypes."""
    total = spec.per_class + test_per_class
    images, labels, rng = _generate_synthetic(spec, total)
    idx = np.arange(len(labels)).reshape(spec.classes, total)
    tr = idx[:, : spec.per_class].reshape(-1)
    te = idx[:, spec.per_class :].reshape(-1)
    tr = tr[rng.permutation(tr.size)]
    te = te[rng.permutation(te.size)]
    return (
        Dataset(images[tr], labels[tr], name=f"synthetic{spec.classes}/train"),
        Dataset(images[te], labels[te], name=f"synthetic{spec.classes}/test"),
    )


# ----------------------------------------------------------------- PGM/PPM


def write_pgm(image, path):
    """Write a grayscale image ((H,W) or (1,H,W), values in [0,1]) as binary PGM."""
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 3:
        if arr.shape[0] != 1:
            raise DataError(f"PGM is grayscale, got {arr.shape[0]} channels")
        arr = arr[0]
    if arr.ndim != 2:
        raise DataError(f"PGM expects (H, W), got shape {arr.shape}")
    pixels = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (arr.shape[1], arr.shape[0]))
        f.write(pixels.tobytes())


def write_ppm(image, path):
    """Write an RGB image ((3,H,W), values in [0,1]) as binary PPM."""
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DataError(f"PPM expects (3, H, W), got shape {arr.shape}")
    pixels = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (arr.shape[2], arr.shape[1]))
        f.write(pixels.transpose(1, 2, 0).tobytes())


def _read_netpbm_header(blob, path):
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated header")
        fields.append(int(blob[start:pos]))
    return fields, pos + 1  # single whitespace after maxval


def read_pgm(path):
    """Read a binary PGM into a (1, H, W) float32 array in [0, 1]."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:2] != b"P5":
        raise DataError(f"{path}: not a binary PGM (magic {blob[:2]!r})")
    (w, h, maxval), off = _read_netpbm_header(blob, path)
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 supported, got {maxval}")
    if len(blob) - off < w * h:
        raise DataError(f"{path}: expected {w * h} pixel bytes, found {len(blob) - off}")
    pixels = np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=off)
    return (pixels.reshape(1, h, w).astype(np.float32)) / 255.0


def read_ppm(path):
    """Read a binary PPM into a (3, H, W) float32 array in [0, 1]."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:2] != b"P6":
        raise DataError(f"{path}: not a binary PPM (magic {blob[:2]!r})")
    (w, h, maxval), off = _read_netpbm_header(blob, path)
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 supported, got {maxval}")
    if len(blob) - off < 3 * w * h:
        raise DataError(f"{path}: expected {3 * w * h} pixel bytes, found {len(blob) - off}")
    pixels = np.frombuffer(blob, dtype=np.uint8, count=3 * w * h, offset=off)
    return pixels.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / 255.0


def read_secret_image(path):
    """Read a PGM or PPM secret by magic number."""
    with open(path, "rb") as f:
        magic = f.read(2)
    if magic == b"P5":
        return read_pgm(path)
    if magic == b"P6":
        return read_ppm(path)
    raise DataError(f"{path}: unsupported image magic {magic!r} (need P5 or P6)")
