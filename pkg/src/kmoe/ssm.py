"""Minimal selective state-space token mixer and the patch-scan block built on it.

Per channel ``d`` and state ``n`` the scan runs

    decay_t = exp(delta_t[d] * A[d, n])
    h_t     = decay_t * h_{t-1} + delta_t[d] * B_t[n] * x_t[d]
    y_t[d]  = sum_n C_t[n] * h_t[d, n]

left to right from ``h_{-1} = 0`` and gates the result with ``silu(x_t W_z)``.
``delta`` is ``softplus(x_t W_delta + b_delta)``; ``B_t`` and ``C_t`` are linear
in ``x_t``; ``A = -exp(a_log)`` keeps every mode decaying.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


def init_ssm(dim: int, state: int = 8, rng=None, dtype=np.float32, dt_min=1e-3, dt_max=1e-1):
    rng = rng or np.random.default_rng(0)
    s = 1.0 / np.sqrt(dim)
    dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=dim))
    return {
        "w_delta": (0.1 * s * rng.standard_normal((dim, dim))).astype(dtype),
        # inverse softplus so softplus(b_delta) == dt at zero input
        "b_delta": (dt + np.log(-np.expm1(-dt))).astype(dtype),
        "w_b": (s * rng.standard_normal((dim, state))).astype(dtype),
        "w_c": (s * rng.standard_normal((dim, state))).astype(dtype),
        "w_z": (s * rng.standard_normal((dim, dim))).astype(dtype),
        "a_log": np.log(np.tile(np.arange(1, state + 1, dtype=np.float64), (dim, 1))).astype(dtype),
    }


def selective_scan(seq, p, *, A=None, delta=None, B=None, C=None, gate=None):
    """Scan ``seq`` of shape ``(..., L, D)`` causally along ``L``.

    The keyword overrides replace the input-dependent quantities and exist for
    testing: ``A`` is ``(D, N)``, ``delta`` broadcasts to ``(..., L, D)``, ``B``
    and ``C`` to ``(..., L, N)`` and ``gate`` to ``(..., L, D)``.
    """
    if A is None:
        A = ad.mul(ad.exp(p["a_log"]), -1.0)
    if delta is None:
        delta = ad.softplus(ad.linear(seq, p["w_delta"], p["b_delta"]))
    if B is None:
        B = ad.matmul(seq, p["w_b"])
    if C is None:
        C = ad.matmul(seq, p["w_c"])
    if gate is None:
        gate = ad.silu(ad.matmul(seq, p["w_z"]))

    d3 = _expand(delta, -1)                        # (..., L, D, 1)
    decay = ad.exp(ad.mul(d3, A))                  # (..., L, D, N)
    drive = ad.mul(ad.mul(d3, _expand(B, -2)), _expand(seq, -1))
    h = ad.linear_recurrence(decay, drive, axis=-3)
    y = ad.sum(ad.mul(h, _expand(C, -2)), axis=-1)
    return ad.mul(y, gate)


def _expand(x, axis):
    if not isinstance(x, ad.Node):
        x = np.asarray(x)
    v = ad.value(x)
    new = list(v.shape)
    pos = axis if axis >= 0 else v.ndim + 1 + axis
    new.insert(pos, 1)
    return ad.reshape(x, tuple(new))


def patchify(x, patch: int):
    """``(B, H, W, C)`` -> ``(B, L, patch*patch*C)`` with tokens in raster order."""
    b, h, w, c = ad.value(x).shape
    if h % patch or w % patch:
        raise ValueError(f"{h}x{w} is not divisible by patch size {patch}")
    t = ad.reshape(x, (b, h // patch, patch, w // patch, patch, c))
    t = ad.transpose(t, (0, 1, 3, 2, 4, 5))
    return ad.reshape(t, (b, (h // patch) * (w // patch), patch * patch * c))


def unpatchify(t, patch: int, h: int, w: int):
    b, _, d = ad.value(t).shape
    c = d // (patch * patch)
    x = ad.reshape(t, (b, h // patch, w // patch, patch, patch, c))
    x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
    return ad.reshape(x, (b, h, w, c))


def patch_scan_block(x, p, patch: int = 1):
    """Patch-embed, layer-normalize, scan the single raster direction, add the residual, un-patch."""
    _, h, w, _ = ad.value(x).shape
    tokens = patchify(x, patch)
    mixed = selective_scan(ad.layer_norm(tokens), p)
    return unpatchify(ad.add(tokens, mixed), patch, h, w)


def state_bound(p, seq_max_abs: float, delta_min: float, delta_max: float) -> float:
    """Geometric-series bound on ``|h_t|`` for inputs bounded by ``seq_max_abs``
    and step sizes in ``[delta_min, delta_max]``."""
    a = -np.exp(ad.value(p["a_log"]))
    slowest = np.exp(delta_min * a.max())
    b_max = np.abs(ad.value(p["w_b"])).sum(axis=0).max() * seq_max_abs
    return float(delta_max * b_max * seq_max_abs / (1.0 - slowest))
