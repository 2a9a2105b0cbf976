"""Dense array primitives shared by every other module.

Tensors are plain ``numpy.ndarray`` objects.  Feature maps are channels-last
(``B x H x W x C``); complex images are complex arrays whose last two axes are
``H x W``.  Every linear primitive here ships with its exact adjoint so the
autodiff layer can wrap it without re-deriving anything.
"""

from __future__ import annotations

from collections import Counter
from contextlib import contextmanager
from typing import Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


# --- multiply-add accounting -------------------------------------------------


class MacCounter:
    """Accumulates analytic multiply-add counts reported by instrumented ops."""

    def __init__(self) -> None:
        self.by_op: Counter[str] = Counter()

    @property
    def total(self) -> int:
        return sum(self.by_op.values())

    def add(self, op: str, n: int) -> None:
        self.by_op[op] += int(n)


_counters: list[MacCounter] = []


@contextmanager
def count_macs() -> Iterator[MacCounter]:
    counter = MacCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


def tally(op: str, n: int) -> None:
    for c in _counters:
        c.add(op, n)


# --- helpers -------------------------------------------------------------------


def hw_axes(ndim: int) -> tuple[int, int]:
    """Return the (H, W) axes for a 2-D, HWC or BHWC array."""
    if ndim == 2:
        return 0, 1
    if ndim == 3:
        return 0, 1
    if ndim == 4:
        return 1, 2
    raise ValueError(f"expected a rank 2-4 array, got rank {ndim}")


def _axis_for(t: np.ndarray, axis: str | int) -> int:
    if isinstance(axis, str):
        ah, aw = hw_axes(t.ndim)
        try:
            return {"H": ah, "W": aw}[axis.upper()]
        except KeyError:
            raise ValueError(f"axis must be 'H' or 'W', got {axis!r}") from None
    return axis % t.ndim


def check_tensor(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t)
    if t.ndim == 0 or min(t.shape) < 1:
        raise ValueError(f"tensor extents must all be >= 1, got {t.shape}")
    return t


# --- centered unitary DFT -----------------------------------------------------


def dft2_centered(img: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Unitary 2-D DFT over the last two axes with DC at ``(H//2, W//2)``.

    Both directions are scaled by ``1/sqrt(H*W)`` so the adjoint equals the
    inverse.
    """
    img = np.asarray(img)
    if img.ndim < 2 or min(img.shape[-2:]) < 1:
        raise ValueError(f"need at least a 1x1 image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("dft2_centered: input contains non-finite values")
    axes = (-2, -1)
    x = np.fft.ifftshift(img, axes=axes)
    if inverse:
        k = np.fft.ifft2(x, axes=axes, norm="ortho")
    else:
        k = np.fft.fft2(x, axes=axes, norm="ortho")
    h, w = img.shape[-2:]
    tally("dft2", int(np.prod(img.shape[:-2], dtype=np.int64)) * h * w * max(1, int(np.log2(h * w))))
    out = np.fft.fftshift(k, axes=axes)
    if img.dtype in (np.complex64, np.float32):
        return out.astype(np.complex64)
    return out.astype(np.complex128, copy=False)


def fft2c(img: np.ndarray) -> np.ndarray:
    return dft2_centered(img, inverse=False)


def ifft2c(ksp: np.ndarray) -> np.ndarray:
    return dft2_centered(ksp, inverse=True)


# --- reflect padding ------------------------------------------------------------


def reflect_pad(t: np.ndarray, pad_h: int, pad_w: int) -> np.ndarray:
    """Edge-excluded mirror extension on the H and W axes."""
    t = check_tensor(t)
    ah, aw = hw_axes(t.ndim)
    for pad, ax in ((pad_h, ah), (pad_w, aw)):
        if pad < 0:
            raise ValueError("padding must be non-negative")
        if pad >= t.shape[ax]:
            raise ValueError(f"reflect pad {pad} must be smaller than extent {t.shape[ax]}")
    widths = [(0, 0)] * t.ndim
    widths[ah] = (pad_h, pad_h)
    widths[aw] = (pad_w, pad_w)
    if pad_h == 0 and pad_w == 0:
        return t.copy()
    return np.pad(t, widths, mode="reflect")


def _fold_reflect(g: np.ndarray, pad: int, axis: int) -> np.ndarray:
    if pad == 0:
        return g
    n = g.shape[axis] - 2 * pad
    g = np.moveaxis(g, axis, 0)
    out = g[pad : pad + n].copy()
    for i in range(pad):
        # left pad slot i mirrors source index pad - i
        out[pad - i] += g[i]
        # right pad slot j mirrors source index n - 2 - j
        out[n - 2 - i] += g[pad + n + i]
    return np.moveaxis(out, 0, axis)


def reflect_pad_adjoint(g: np.ndarray, pad_h: int, pad_w: int) -> np.ndarray:
    ah, aw = hw_axes(g.ndim)
    return _fold_reflect(_fold_reflect(g, pad_h, ah), pad_w, aw)


# --- separable 1-D correlation ------------------------------------------------


def _check_kernel(kernel: Sequence[float]) -> np.ndarray:
    k = np.asarray(kernel, dtype=np.float64)
    if k.ndim != 1 or k.size % 2 == 0:
        raise ValueError(f"kernel length must be odd, got {k.size}")
    return k


def sep_conv1d(t: np.ndarray, kernel: Sequence[float], axis: str | int = "W", stride: int = 1) -> np.ndarray:
    """Depthwise correlation along one spatial axis over a pre-padded input.

    With ``len(kernel) - 1`` samples of padding already applied, the output
    extent is ``ceil(extent / stride)`` of the unpadded signal.
    """
    t = check_tensor(t)
    k = _check_kernel(kernel)
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    ax = _axis_for(t, axis)
    n = t.shape[ax]
    if n < k.size:
        raise ValueError(f"extent {n} shorter than kernel {k.size}")
    n_out = (n - k.size) // stride + 1
    moved = np.moveaxis(t, ax, 0)
    out = np.zeros((n_out,) + moved.shape[1:], dtype=t.dtype)
    stop = stride * (n_out - 1) + 1
    for j, c in enumerate(k):
        if c != 0.0:
            out += t.dtype.type(c) * moved[j : j + stop : stride]
    tally("sep_conv1d", out.size * k.size)
    return np.moveaxis(out, 0, ax)


def sep_conv1d_adjoint(
    g: np.ndarray, kernel: Sequence[float], n_in: int, axis: str | int = "W", stride: int = 1
) -> np.ndarray:
    k = _check_kernel(kernel)
    ax = _axis_for(g, axis)
    moved = np.moveaxis(g, ax, 0)
    n_out = moved.shape[0]
    out = np.zeros((n_in,) + moved.shape[1:], dtype=g.dtype)
    stop = stride * (n_out - 1) + 1
    for j, c in enumerate(k):
        if c != 0.0:
            out[j : j + stop : stride] += g.dtype.type(c) * moved
    return np.moveaxis(out, 0, ax)


# --- bilinear resampling --------------------------------------------------------


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-D linear interpolation weights, half-pixel centers (align_corners=False)."""
    if n_in < 1 or n_out < 1:
        raise ValueError("extents must be >= 1")
    m = np.zeros((n_out, n_in))
    if n_in == n_out:
        np.fill_diagonal(m, 1.0)
        return m
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - w1)
    np.add.at(m, (rows, i1), w1)
    return m


def _apply_hw(t: np.ndarray, mh: np.ndarray, mw: np.ndarray) -> np.ndarray:
    ah, aw = hw_axes(t.ndim)
    mh = mh.astype(t.dtype, copy=False)
    mw = mw.astype(t.dtype, copy=False)
    out = np.moveaxis(np.tensordot(mh, t, axes=([1], [ah])), 0, ah)
    out = np.moveaxis(np.tensordot(mw, out, axes=([1], [aw])), 0, aw)
    return out


def bilinear_resize(t: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    t = check_tensor(t)
    ah, aw = hw_axes(t.ndim)
    h, w = t.shape[ah], t.shape[aw]
    if (h, w) == (out_h, out_w):
        return t.copy()
    # two taps per axis per output sample
    tally("bilinear", 4 * t.size // (h * w) * out_h * out_w)
    return _apply_hw(t, interp_matrix(h, out_h), interp_matrix(w, out_w))


def bilinear_resize_adjoint(g: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    ah, aw = hw_axes(g.ndim)
    oh, ow = g.shape[ah], g.shape[aw]
    if (oh, ow) == (in_h, in_w):
        return g.copy()
    return _apply_hw(g, interp_matrix(in_h, oh).T, interp_matrix(in_w, ow).T)


def center_crop(t: np.ndarray, h: int, w: int) -> np.ndarray:
    ah, aw = hw_axes(t.ndim)
    oh = (t.shape[ah] - h) // 2
    ow = (t.shape[aw] - w) // 2
    idx = [slice(None)] * t.ndim
    idx[ah] = slice(oh, oh + h)
    idx[aw] = slice(ow, ow + w)
    return t[tuple(idx)]


# --- complex <-> real channel lifting -----------------------------------------


def complex_to_channels(x: np.ndarray, dtype=None) -> np.ndarray:
    """``(..., H, W)`` complex -> ``(..., H, W, 2)`` real (re, im)."""
    dtype = dtype or (np.float32 if x.dtype == np.complex64 else np.float64)
    return np.stack([x.real, x.imag], axis=-1).astype(dtype)


def channels_to_complex(f: np.ndarray) -> np.ndarray:
    if f.shape[-1] != 2:
        raise ValueError(f"expected 2 trailing channels, got {f.shape[-1]}")
    return f[..., 0] + 1j * f[..., 1]
