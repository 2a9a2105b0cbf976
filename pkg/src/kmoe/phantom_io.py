"""Synthetic phantoms, the binary tensor file format, PGM dumps and spectra grids.

Tensor file layout (all integers little-endian)::

    b"KMOE" | u16 version | u16 dtype code | u16 rank | rank x u64 extents | payload

The payload is row-major with ``product(extents) * itemsize`` bytes.  Complex
dtypes store interleaved (re, im) pairs, i.e. numpy's native complex layout.

A container bundles named tensors plus a JSON metadata document::

    b"KMOC" | u16 version | u32 meta length | meta (utf-8 JSON) | u32 count |
    count x (u16 name length | name | u64 blob length | tensor file bytes)
"""

from __future__ import annotations

import io
import json
import math
import os
import struct
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from .numerics import fft2c

MAGIC = b"KMOE"
CONTAINER_MAGIC = b"KMOC"
VERSION = 1

DTYPE_CODES = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("<c8"): 3,
    np.dtype("<c16"): 4,
}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


class TensorFileError(Exception):
    code = 1


class MagicMismatch(TensorFileError):
    code = 10


class VersionMismatch(TensorFileError):
    code = 11


class UnsupportedDtype(TensorFileError):
    code = 12


class Truncated(TensorFileError):
    code = 13


# --- phantoms -----------------------------------------------------------------------

# Modified Shepp-Logan head phantom: geometry from Shepp & Logan, "The Fourier
# reconstruction of a head section", IEEE TNS 21 (1974); contrast-enhanced
# intensities from P. Toft, "The Radon Transform" (1996).
# Columns: intensity, semi-axis a (x), semi-axis b (y), center x, center y, angle (deg).
SHEPP_LOGAN_ELLIPSES = np.array(
    [
        [1.0, 0.6900, 0.9200, 0.00, 0.0000, 0.0],
        [-0.8, 0.6624, 0.8740, 0.00, -0.0184, 0.0],
        [-0.2, 0.1100, 0.3100, 0.22, 0.0000, -18.0],
        [-0.2, 0.1600, 0.4100, -0.22, 0.0000, 18.0],
        [0.1, 0.2100, 0.2500, 0.00, 0.3500, 0.0],
        [0.1, 0.0460, 0.0460, 0.00, 0.1000, 0.0],
        [0.1, 0.0460, 0.0460, 0.00, -0.1000, 0.0],
        [0.1, 0.0460, 0.0230, -0.08, -0.6050, 0.0],
        [0.1, 0.0230, 0.0230, 0.00, -0.6060, 0.0],
        [0.1, 0.0230, 0.0460, 0.06, -0.6050, 0.0],
    ]
)


@dataclass
class Phantom:
    image: np.ndarray
    ellipses: np.ndarray


def _jitter(ell: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    ell = ell.copy()
    # skull and brain outline move together and only slightly
    outer_scale = rng.uniform(0.92, 1.05, size=2)
    ell[:2, 1] *= outer_scale[0]
    ell[:2, 2] *= outer_scale[1]
    ell[:2, 3:5] += rng.normal(scale=0.01, size=2)
    inner = slice(2, None)
    n = ell.shape[0] - 2
    ell[inner, 0] *= rng.uniform(0.5, 1.5, size=n)
    ell[inner, 1:3] *= rng.uniform(0.75, 1.3, size=(n, 2))
    ell[inner, 3:5] += rng.normal(scale=0.04, size=(n, 2))
    ell[inner, 5] += rng.normal(scale=15.0, size=n)
    return ell


def shepp_logan(h: int, w: int, jitter_seed: Optional[int] = None) -> Phantom:
    """Ten-ellipse head phantom with values clamped to [0, 1].

    ``jitter_seed`` perturbs the inner ellipses' positions, sizes, angles and
    contrasts reproducibly; ``None`` gives the classical phantom.
    """
    if h < 32 or w < 32:
        raise ValueError("phantom extents must be >= 32")
    ell = SHEPP_LOGAN_ELLIPSES
    if jitter_seed is not None:
        ell = _jitter(ell, np.random.default_rng(jitter_seed))
    ys = 1.0 - (np.arange(h) + 0.5) * 2.0 / h
    xs = (np.arange(w) + 0.5) * 2.0 / w - 1.0
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    img = np.zeros((h, w))
    for amp, a, b, x0, y0, deg in ell:
        t = math.radians(deg)
        c, s = math.cos(t), math.sin(t)
        u = (xx - x0) * c + (yy - y0) * s
        v = -(xx - x0) * s + (yy - y0) * c
        img[(u / a) ** 2 + (v / b) ** 2 <= 1.0] += amp
    img = np.clip(img, 0.0, 1.0)
    return Phantom(img.astype(np.complex128), ell)


# --- tensor files ----------------------------------------------------------------------


def encode_tensor(t: np.ndarray) -> bytes:
    t = np.asarray(t)
    if t.dtype == np.bool_:
        t = t.astype(np.float32)
    dt = t.dtype.newbyteorder("<")
    if dt not in DTYPE_CODES:
        raise UnsupportedDtype(f"cannot store dtype {t.dtype}")
    header = MAGIC + struct.pack("<HHH", VERSION, DTYPE_CODES[dt], t.ndim)
    header += struct.pack(f"<{t.ndim}Q", *t.shape)
    return header + np.ascontiguousarray(t, dtype=dt).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    t, _ = _decode_at(memoryview(buf), 0)
    return t


def _decode_at(buf: memoryview, pos: int) -> tuple[np.ndarray, int]:
    head = bytes(buf[pos : pos + 4])
    if head != MAGIC[: len(head)]:
        raise MagicMismatch(f"bad magic bytes {head!r}")
    if len(buf) - pos < 10:
        raise Truncated("header truncated")
    version, code, rank = struct.unpack_from("<HHH", buf, pos + 4)
    if version != VERSION:
        raise VersionMismatch(f"unsupported version {version}")
    if code not in CODE_DTYPES:
        raise UnsupportedDtype(f"unknown dtype code {code}")
    pos += 10
    if len(buf) - pos < 8 * rank:
        raise Truncated("extent table truncated")
    shape = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    dt = CODE_DTYPES[code]
    n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(buf) - pos < n:
        raise Truncated(f"payload truncated: need {n} bytes, have {len(buf) - pos}")
    arr = np.frombuffer(buf[pos : pos + n], dtype=dt).reshape(shape).copy()
    return arr, pos + n


def write_tensor(path, t: np.ndarray) -> None:
    data = encode_tensor(t)
    with open(path, "wb") as fh:
        fh.write(data)


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    arr, _ = _decode_at(memoryview(data), 0)
    return arr


def write_container(path, tensors: Mapping[str, np.ndarray], meta: Optional[dict] = None) -> None:
    out = io.BytesIO()
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    out.write(CONTAINER_MAGIC + struct.pack("<HI", VERSION, len(meta_bytes)) + meta_bytes)
    out.write(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        nb = name.encode()
        blob = encode_tensor(t)
        out.write(struct.pack("<H", len(nb)) + nb + struct.pack("<Q", len(blob)) + blob)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(out.getvalue())
    os.replace(tmp, path)


def read_container(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        data = memoryview(fh.read())
    if len(data) < 10:
        raise Truncated("container header truncated")
    if bytes(data[:4]) != CONTAINER_MAGIC:
        raise MagicMismatch("bad container magic bytes")
    version, meta_len = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise VersionMismatch(f"unsupported container version {version}")
    pos = 10
    if len(data) < pos + meta_len + 4:
        raise Truncated("container metadata truncated")
    meta = json.loads(bytes(data[pos : pos + meta_len]).decode())
    pos += meta_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        if len(data) < pos + 2:
            raise Truncated("container entry truncated")
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = bytes(data[pos : pos + nlen]).decode()
        pos += nlen
        if len(data) < pos + 8:
            raise Truncated("container entry truncated")
        (blen,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        if len(data) < pos + blen:
            raise Truncated(f"entry {name!r} truncated")
        tensors[name], _ = _decode_at(data[: pos + blen], pos)
        pos += blen
    return tensors, meta


# --- images -------------------------------------------------------------------------------


def to_uint8(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    lo, hi = img.min(), img.max()
    if hi <= lo:
        return np.zeros(img.shape, dtype=np.uint8)
    return np.floor((img - lo) / (hi - lo) * 255.0 + 0.5).astype(np.uint8)


def write_pgm(path, img: np.ndarray) -> None:
    """Binary (P5) grayscale image; float input is min-max scaled to 0..255."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        img = to_uint8(img)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM file")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError("only 8-bit PGM is supported")
    pixels = data[len(data) - w * h :]
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)


def spectrum_tile(channel: np.ndarray) -> np.ndarray:
    """``log(1 + |F|)`` of one channel, min-max scaled to 0..255."""
    return to_uint8(np.log1p(np.abs(fft2c(np.asarray(channel, dtype=np.complex128)))))


def spectra_grid(f: np.ndarray, cols: Optional[int] = None) -> np.ndarray:
    """Tile per-channel log-magnitude spectra of an ``(H, W, C)`` map (first batch item if 4-D)."""
    f = np.asarray(f)
    if f.ndim == 4:
        f = f[0]
    if f.ndim == 2:
        f = f[..., None]
    h, w, c = f.shape
    cols = cols or int(math.ceil(math.sqrt(c)))
    rows = int(math.ceil(c / cols))
    grid = np.zeros((rows * h, cols * w), dtype=np.uint8)
    for i in range(c):
        r, q = divmod(i, cols)
        grid[r * h : (r + 1) * h, q * w : (q + 1) * w] = spectrum_tile(f[..., i])
    return grid


def spectra_diagnostic(f: np.ndarray, out_path=None, cols: Optional[int] = None) -> np.ndarray:
    grid = spectra_grid(f, cols)
    if out_path is not None:
        write_pgm(out_path, grid)
    return grid
