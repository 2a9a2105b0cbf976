"""Shared-plus-routed mixture of channel-MLP experts with per-pixel top-1 dispatch.

Routed experts only see the pixels assigned to them, so the routed cost per
pixel is one expert regardless of how many experts exist.  The one-hot mask is
a constant for differentiation; the router receives gradient only through the
load-balancing term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from . import autodiff as ad


@dataclass
class RouteStats:
    p: np.ndarray
    counts: np.ndarray
    l_bal: float
    # differentiable mean gate mass when routing ran on a tape
    p_node: Any = field(default=None, repr=False)

    @property
    def n_routed(self) -> int:
        return len(self.p)


def init_expert(d_in: int, hidden: int, d_out: int, rng=None, dtype=np.float32, scale: float = 1.0):
    rng = rng or np.random.default_rng(0)
    return {
        "w1": (scale * rng.standard_normal((d_in, hidden)) / np.sqrt(d_in)).astype(dtype),
        "b1": np.zeros(hidden, dtype=dtype),
        "w2": (scale * rng.standard_normal((hidden, d_out)) / np.sqrt(hidden)).astype(dtype),
        "b2": np.zeros(d_out, dtype=dtype),
    }


def init_moe(d_in: int, d_out: int, n_shared: int = 1, n_routed: int = 4, hidden: Optional[int] = None, rng=None, dtype=np.float32):
    rng = rng or np.random.default_rng(0)
    hidden = hidden or d_out
    p = {}
    for i in range(n_shared):
        for k, v in init_expert(d_in, hidden, d_out, rng, dtype).items():
            p[f"shared.{i}.{k}"] = v
    for e in range(n_routed):
        for k, v in init_expert(d_in, hidden, d_out, rng, dtype).items():
            p[f"routed.{e}.{k}"] = v
    if n_routed:
        p["router.w"] = (rng.standard_normal((d_in, n_routed)) / np.sqrt(d_in)).astype(dtype)
    return p


def expert_forward(x, p):
    return ad.linear(ad.relu(ad.linear(x, p["w1"], p.get("b1"))), p["w2"], p.get("b2"))


def route(x, wr):
    """Softmax gates, one-hot top-1 mask and routing statistics for ``x`` of shape ``(..., C)``."""
    xv = ad.value(x)
    if ad.value(wr).shape[0] != xv.shape[-1]:
        raise ValueError(f"router expects {ad.value(wr).shape[0]} channels, got {xv.shape[-1]}")
    gates = ad.softmax(ad.matmul(x, wr), axis=-1)
    gv = ad.value(gates)
    n_r = gv.shape[-1]
    sel = np.argmax(gv, axis=-1)  # first maximum wins ties
    mask = np.eye(n_r, dtype=gv.dtype)[sel]
    flat = gv.reshape(-1, n_r).astype(np.float64)
    p = np.array([math.fsum(flat[:, e]) for e in range(n_r)]) / flat.shape[0]
    counts = np.bincount(sel.ravel(), minlength=n_r)
    lead = tuple(range(gv.ndim - 1))
    p_node = ad.mean(gates, axis=lead) if isinstance(gates, ad.Node) else None
    stats = RouteStats(p, counts, float(load_balance_loss(p)), p_node)
    return gates, mask, stats


def load_balance_loss(p):
    """``N_r * sum_e p_e^2``; accepts an array or an autodiff node."""
    n_r = ad.value(p).shape[-1]
    return ad.mul(ad.sum(ad.mul(p, p)), float(n_r))


def moe_branches(x, params, n_shared: int, n_routed: int):
    """Return ``(y_shared, y_routed, stats)``; absent groups are ``None``."""
    xv = ad.value(x)
    lead = xv.shape[:-1]
    y_shared = None
    for i in range(n_shared):
        yi = expert_forward(x, ad.scope(params, f"shared.{i}"))
        y_shared = yi if y_shared is None else ad.add(y_shared, yi)
    if n_routed == 0:
        return y_shared, None, None

    _, mask, stats = route(x, params["router.w"])
    sel = np.argmax(mask, axis=-1).ravel()
    n_pix = sel.size
    xf = ad.reshape(x, (n_pix, xv.shape[-1]))
    y_routed = None
    for e in range(n_routed):
        idx = np.nonzero(sel == e)[0]
        if idx.size == 0:
            continue
        ye = expert_forward(ad.take_rows(xf, idx), ad.scope(params, f"routed.{e}"))
        ye = ad.scatter_rows(ye, idx, n_pix)
        y_routed = ye if y_routed is None else ad.add(y_routed, ye)
    d_out = ad.value(y_routed).shape[-1]
    y_routed = ad.reshape(y_routed, lead + (d_out,))
    return y_shared, y_routed, stats


def moe_forward(x, params, n_shared: int = 1, n_routed: int = 4):
    """``y = sum_i shared_i(x) + sum_e M_e * routed_e(x)`` with top-1 mask ``M``."""
    y_shared, y_routed, stats = moe_branches(x, params, n_shared, n_routed)
    if y_shared is None and y_routed is None:
        raise ValueError("MoE needs at least one expert")
    if y_shared is None:
        return y_routed, stats
    if y_routed is None:
        return y_shared, stats
    return ad.add(y_shared, y_routed), stats
