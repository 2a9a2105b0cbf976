"""Squeeze-and-excitation style global context path with a residual gate."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .numerics import hw_axes


def init_lsgp(channels: int, reduction: int = 4, rng=None, scale: float = 0.01, bias: bool = True, dtype=np.float32):
    """Small random weights and zero biases, so the gate starts near 0.5."""
    if channels % reduction:
        raise ValueError(f"channels ({channels}) must be divisible by reduction ({reduction})")
    rng = rng or np.random.default_rng(0)
    hidden = channels // reduction
    p = {
        "w1": (scale * rng.standard_normal((channels, hidden))).astype(dtype),
        "w2": (scale * rng.standard_normal((hidden, channels))).astype(dtype),
    }
    if bias:
        p["b1"] = np.zeros(hidden, dtype=dtype)
        p["b2"] = np.zeros(channels, dtype=dtype)
    return p


def lsgp_gate(x, p):
    """Per-channel gate ``sigmoid(W2 relu(W1 mean_hw(x) + b1) + b2)``, shaped to broadcast over H, W."""
    xv = ad.value(x)
    c = xv.shape[-1]
    if ad.value(p["w1"]).shape[0] != c:
        raise ValueError(f"channel mismatch: input has {c}, params expect {ad.value(p['w1']).shape[0]}")
    ah, aw = hw_axes(xv.ndim)
    z = ad.mean(x, axis=(ah, aw), keepdims=True)
    hid = ad.relu(ad.linear(z, p["w1"], p.get("b1")))
    return ad.sigmoid(ad.linear(hid, p["w2"], p.get("b2")))


def lsgp_forward(x, p):
    s = lsgp_gate(x, p)
    return ad.add(ad.mul(x, s), x)
