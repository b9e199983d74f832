"""Machine-readable payload codec: blocky dot-code images and Hamming(7,4).

Bits are laid out row-major on the squarest grid with cols >= rows and
rows*cols >= n_bits; each cell is a patch_px = floor(side / cols) square
patch (black = 0, white = 1) and the residual right/bottom border stays
black. Decoding binarizes at 0.53 and takes a per-patch majority vote with
ties resolved to 1.

Hamming(7,4) places parity bits at codeword positions 1, 2, 4 (1-indexed)
and corrects any single-bit error per block.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DECODE_THRESHOLD = 0.53


class CodecError(Exception):
    pass


@dataclass(frozen=True)
class DotLayout:
    rows: int
    cols: int
    patch_px: int
    n_bits: int
    side: int


def dot_layout(n_bits, side):
    """Squarest grid (cols >= rows) that fits n_bits cells on a side x side
    image."""
    if n_bits < 1:
        raise CodecError(f"need at least one bit, got {n_bits}")
    rows = max(1, int(np.floor(np.sqrt(n_bits))))
    cols = -(-n_bits // rows)  # ceil
    patch = side // cols
    if patch < 1:
        raise CodecError(f"{n_bits} bits do not fit a {side}x{side} image (patch < 1 px)")
    return DotLayout(rows=rows, cols=cols, patch_px=patch, n_bits=n_bits, side=side)


def encode_bits_image(bits, dims):
    """Render bits as a dot-code image of shape dims ((C,H,W) or (H,W))."""
    bits = np.asarray(bits, dtype=np.uint8)
    if bits.ndim != 1:
        raise CodecError(f"bits must be a flat sequence, got shape {bits.shape}")
    if not np.isin(bits, (0, 1)).all():
        raise CodecError("bits must be 0 or 1")
    if len(dims) == 2:
        c, h, w = 1, dims[0], dims[1]
    elif len(dims) == 3:
        c, h, w = dims
    else:
        raise CodecError(f"bad image dims {dims}")
    if h != w:
        raise CodecError(f"dot code needs a square image, got {h}x{w}")
    layout = dot_layout(bits.size, h)
    img = np.zeros((h, w), dtype=np.float32)
    p = layout.patch_px
    for i in range(layout.n_bits):
        r, col = divmod(i, layout.cols)
        img[r * p : (r + 1) * p, col * p : (col + 1) * p] = float(bits[i])
    return np.repeat(img[None], c, axis=0).astype(np.float32)


def decode_bits_image(image, n_bits):
    """Recover n_bits from a dot-code image (any channel count)."""
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise CodecError(f"expected (C,H,W) or (H,W) image, got shape {arr.shape}")
    c, h, w = arr.shape
    if h != w:
        raise CodecError(f"dot code needs a square image, got {h}x{w}")
    layout = dot_layout(n_bits, h)
    hard = (arr >= DECODE_THRESHOLD).astype(np.int64)
    p = layout.patch_px
    bits = np.empty(n_bits, dtype=np.uint8)
    votes_per_patch = c * p * p
    for i in range(n_bits):
        r, col = divmod(i, layout.cols)
        ones = int(hard[:, r * p : (r + 1) * p, col * p : (col + 1) * p].sum())
        bits[i] = 1 if 2 * ones >= votes_per_patch else 0
    return bits


def chunk_bits(bits, per_image):
    """Split bits into per_image-sized chunks, zero-padding the last one."""
    bits = np.asarray(bits, dtype=np.uint8)
    if per_image < 1:
        raise CodecError(f"chunk size must be positive, got {per_image}")
    n_chunks = -(-bits.size // per_image)
    padded = np.zeros(n_chunks * per_image, dtype=np.uint8)
    padded[: bits.size] = bits
    return [padded[i * per_image : (i + 1) * per_image] for i in range(n_chunks)]


# -------------------------------------------------------------- Hamming(7,4)

_PARITY_POS = (1, 2, 4)  # 1-indexed parity positions
_DATA_POS = (3, 5, 6, 7)


def hamming74_encode(data_bits):
    """Encode data bits (zero-padded to a multiple of 4) into 7-bit blocks."""
    data = np.asarray(data_bits, dtype=np.uint8)
    if data.ndim != 1:
        raise CodecError(f"data bits must be flat, got shape {data.shape}")
    if not np.isin(data, (0, 1)).all():
        raise CodecError("bits must be 0 or 1")
    pad = (-data.size) % 4
    if pad:
        data = np.concatenate([data, np.zeros(pad, dtype=np.uint8)])
    out = np.zeros((data.size // 4, 7), dtype=np.uint8)
    blocks = data.reshape(-1, 4)
    for j, pos in enumerate(_DATA_POS):
        out[:, pos - 1] = blocks[:, j]
    for pos in _PARITY_POS:
        covered = [p - 1 for p in range(1, 8) if (p & pos) and p != pos]
        out[:, pos - 1] = out[:, covered].sum(axis=1) % 2
    return out.reshape(-1)


def hamming74_decode(code_bits):
    """Decode 7-bit blocks, correcting single-bit errors.

    Returns (data_bits, corrections) where corrections counts the blocks
    whose syndrome was non-zero.
    """
    code = np.asarray(code_bits, dtype=np.uint8)
    if code.ndim != 1 or code.size % 7:
        raise CodecError(f"code length {code.size} is not a multiple of 7")
    blocks = code.reshape(-1, 7).copy()
    syndrome = np.zeros(len(blocks), dtype=np.int64)
    for pos in _PARITY_POS:
        covered = [p - 1 for p in range(1, 8) if p & pos]
        check = (blocks[:, covered].sum(axis=1) % 2).astype(np.int64)
        syndrome += pos * check
    corrections = int((syndrome > 0).sum())
    bad = np.nonzero(syndrome)[0]
    blocks[bad, syndrome[bad] - 1] ^= 1
    data = blocks[:, [p - 1 for p in _DATA_POS]]
    return data.reshape(-1).astype(np.uint8), corrections


# ------------------------------------------------------------ byte payloads


def bytes_to_bits(payload):
    """MSB-first bit expansion of a byte string."""
    return np.unpackbits(np.frombuffer(payload, dtype=np.uint8))


def bits_to_bytes(bits):
    bits = np.asarray(bits, dtype=np.uint8)
    if bits.size % 8:
        raise CodecError(f"bit count {bits.size} is not a multiple of 8")
    return np.packbits(bits).tobytes()
