"""Separable binomial Laplacian split into low- and high-frequency streams."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from . import autodiff as ad
from .numerics import (
    bilinear_resize,
    bilinear_resize_adjoint,
    hw_axes,
    reflect_pad,
    reflect_pad_adjoint,
    sep_conv1d,
    sep_conv1d_adjoint,
)

PAD = 2


def binomial_kernel() -> np.ndarray:
    return np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


@dataclass
class FreqSplit:
    low: Any
    high: Any
    low_upsampled: Any


def _hw(x: np.ndarray) -> tuple[int, int]:
    ah, aw = hw_axes(x.ndim)
    return x.shape[ah], x.shape[aw]


def sflap_reduce(x: np.ndarray) -> np.ndarray:
    """Reflect-pad, binomial-filter along W then H, and decimate both axes by 2."""
    x = np.asarray(x)
    h, w = _hw(x)
    if h % 2 or w % 2:
        raise ValueError(f"sflap_reduce needs even extents, got {h}x{w}")
    k = binomial_kernel()
    p = reflect_pad(x, PAD, PAD)
    # decimating W inside the horizontal pass equals filtering at stride 1 and
    # subsampling afterwards, at half the cost
    t = sep_conv1d(p, k, axis="W", stride=2)
    return sep_conv1d(t, k, axis="H", stride=2)


def sflap_reduce_adjoint(g: np.ndarray, h: int, w: int) -> np.ndarray:
    k = binomial_kernel()
    t = sep_conv1d_adjoint(g, k, h + 2 * PAD, axis="H", stride=2)
    p = sep_conv1d_adjoint(t, k, w + 2 * PAD, axis="W", stride=2)
    return reflect_pad_adjoint(p, PAD, PAD)


def _pad_even(x, h: int, w: int):
    """Duplicate the last row/column so both extents are even."""
    ph, pw = h % 2, w % 2
    if not (ph or pw):
        return x
    ah, aw = hw_axes(ad.value(x).ndim)
    widths = [(0, 0)] * ad.value(x).ndim
    widths[ah] = (0, ph)
    widths[aw] = (0, pw)

    def fwd(v):
        return np.pad(v, widths, mode="symmetric")

    def adj(g):
        g = g.copy()
        idx = [slice(None)] * g.ndim
        if ph:
            src, dst = list(idx), list(idx)
            src[ah], dst[ah] = h, h - 1
            g[tuple(dst)] += g[tuple(src)]
            idx[ah] = slice(0, h)
        if pw:
            src, dst = [slice(None)] * g.ndim, [slice(None)] * g.ndim
            src[aw], dst[aw] = w, w - 1
            g[tuple(dst)] += g[tuple(src)]
            idx[aw] = slice(0, w)
        return g[tuple(idx)]

    return ad.linear_op(x, fwd, adj, "pad_even")


def _crop(x, h: int, w: int):
    v = ad.value(x)
    ah, aw = hw_axes(v.ndim)
    if v.shape[ah] == h and v.shape[aw] == w:
        return x
    idx = [slice(None)] * v.ndim
    idx[ah] = slice(0, h)
    idx[aw] = slice(0, w)
    idx = tuple(idx)
    full = v.shape

    def adj(g):
        out = np.zeros(full, dtype=g.dtype)
        out[idx] = g
        return out

    return ad.linear_op(x, lambda a: a[idx], adj, "crop")


def reduce_op(x):
    """Differentiable :func:`sflap_reduce`."""
    h, w = _hw(ad.value(x))
    return ad.linear_op(x, sflap_reduce, lambda g: sflap_reduce_adjoint(g, h, w), "sflap_reduce")


def upsample2(x, h: int, w: int):
    """Differentiable bilinear resize of ``x`` to ``h x w``."""
    ih, iw = _hw(ad.value(x))
    return ad.linear_op(
        x, lambda a: bilinear_resize(a, h, w), lambda g: bilinear_resize_adjoint(g, ih, iw), "upsample"
    )


def sflap_split(x) -> FreqSplit:
    """Low stream, its bilinear x2 upsampling, and the residual high stream.

    Accepts arrays or autodiff nodes.  Odd extents are padded to even and the
    full-resolution outputs are cropped back.
    """
    h, w = _hw(ad.value(x))
    xe = _pad_even(x, h, w)
    he, we = _hw(ad.value(xe))
    low = reduce_op(xe)
    low_up = _crop(upsample2(low, he, we), h, w)
    high = ad.sub(x, low_up)
    return FreqSplit(low, high, low_up)


def _box_down(a: np.ndarray) -> np.ndarray:
    ah, aw = hw_axes(a.ndim)
    h, w = a.shape[ah], a.shape[aw]
    shape = list(a.shape)
    shape[ah : aw + 1] = [h // 2, 2, w // 2, 2]
    return a.reshape(shape).mean(axis=(ah + 1, ah + 3))


def _box_down_adjoint(g: np.ndarray) -> np.ndarray:
    ah, aw = hw_axes(g.ndim)
    return 0.25 * np.repeat(np.repeat(g, 2, axis=ah), 2, axis=aw)


def box_split(x) -> FreqSplit:
    """Plain 2x2 average-pool pyramid used when SF-Lap is ablated."""
    h, w = _hw(ad.value(x))
    if h % 2 or w % 2:
        raise ValueError("box_split needs even extents")
    low = ad.linear_op(x, _box_down, _box_down_adjoint, "box_down")
    low_up = upsample2(low, h, w)
    return FreqSplit(low, ad.sub(x, low_up), low_up)


def central_band_fraction(img: np.ndarray) -> float:
    """Share of spectral energy inside the central half-band ``|k| < N/4`` on both axes."""
    img = np.asarray(img)
    if img.ndim == 3:
        # HWC: average over channels
        img = np.moveaxis(img, -1, 0)
    power = np.abs(np.fft.fftshift(np.fft.fft2(img, axes=(-2, -1)), axes=(-2, -1))) ** 2
    h, w = power.shape[-2:]
    ky = np.abs(np.arange(h) - h // 2) < h / 4
    kx = np.abs(np.arange(w) - w // 2) < w / 4
    inside = power[..., ky, :][..., kx].sum()
    total = power.sum()
    return float(inside / total) if total > 0 else 0.0
