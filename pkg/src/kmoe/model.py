"""Units, groups and the unrolled cascade with data consistency.

A complex image travels between groups as a real ``(B, H, W, 2)`` array.  Each
group lifts it to ``C`` channels, refines it with its units, maps the refined
features back to a residual image update and finishes with a data-consistency
step.  The exit map is zero-initialized, so an untrained cascade reduces to
iterated data consistency.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import autodiff as ad
from .kspace import Acquisition, adjoint, project
from .lsgp import init_lsgp, lsgp_forward
from .moe import RouteStats, init_moe, load_balance_loss, moe_branches
from .numerics import channels_to_complex, complex_to_channels
from .sflap import box_split, sflap_split, upsample2
from .ssm import patch_scan_block, init_ssm


@dataclass
class UnitConfig:
    channels: int = 8
    patch: int = 2
    state_dim: int = 8
    reduction: int = 4
    n_shared: int = 1
    n_routed: int = 4
    expert_hidden: Optional[int] = None
    use_sflap: bool = True
    use_lsgp: bool = True
    use_moe: bool = True
    use_scan: bool = True

    def __post_init__(self):
        if self.channels % self.reduction:
            raise ValueError("channels must be divisible by the LSGP reduction ratio")
        if self.patch < 1:
            raise ValueError("patch must be >= 1")

    @property
    def routed(self) -> int:
        return self.n_routed if self.use_moe else 0

    @property
    def shared(self) -> int:
        # without routing a single dense expert stands in for the MoE
        return self.n_shared if self.use_moe else max(1, self.n_shared)


@dataclass
class CascadeConfig:
    groups: int = 8
    units_per_group: int = 2
    dc_lambda_init: float = 1.0
    dc_mode: str = "soft"
    learn_lambda: bool = True
    lambda_bal: float = 0.01
    share_weights: bool = False
    use_network: bool = True
    unit: UnitConfig = field(default_factory=UnitConfig)

    def __post_init__(self):
        if isinstance(self.unit, dict):
            self.unit = UnitConfig(**self.unit)
        if self.groups < 1:
            raise ValueError("groups must be >= 1")
        if self.dc_mode not in ("soft", "hard"):
            raise ValueError("dc_mode must be 'soft' or 'hard'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CascadeConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown cascade config keys: {sorted(unknown)}")
        return cls(**d)


# --- parameters ---------------------------------------------------------------


def init_unit(cfg: UnitConfig, rng, dtype=np.float32) -> dict:
    c = cfg.channels
    p = {}
    if cfg.use_lsgp:
        p["lsgp"] = init_lsgp(c, cfg.reduction, rng, dtype=dtype)
    if cfg.use_scan:
        d = cfg.patch * cfg.patch * c
        p["scan_high"] = init_ssm(d, cfg.state_dim, rng, dtype)
        p["scan_low"] = init_ssm(d, cfg.state_dim, rng, dtype)
    p["crm"] = {"w": np.eye(c, dtype=dtype), "b": np.zeros(c, dtype=dtype)}
    p["moe"] = init_moe(3 * c, c, cfg.shared, cfg.routed, cfg.expert_hidden or c, rng, dtype)
    k = n_streams(cfg)
    p["dfsa"] = {"w": (0.01 * rng.standard_normal((k * c, k))).astype(dtype), "b": np.zeros(k, dtype=dtype)}
    return p


def n_streams(cfg: UnitConfig) -> int:
    return int(cfg.shared > 0) + int(cfg.routed > 0)


def init_cascade(cfg: CascadeConfig, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    c = cfg.unit.channels
    tree = {}
    n_param_groups = 1 if cfg.share_weights else cfg.groups
    for g in range(n_param_groups):
        grp = {"dc_lambda": np.asarray(cfg.dc_lambda_init, dtype=dtype)}
        if cfg.use_network:
            grp["lift"] = {"w": (rng.standard_normal((2, c)) / np.sqrt(2)).astype(dtype), "b": np.zeros(c, dtype=dtype)}
            grp["reduce"] = {"w": np.zeros((c, 2), dtype=dtype), "b": np.zeros(2, dtype=dtype)}
            for u in range(cfg.units_per_group):
                grp[f"u{u}"] = init_unit(cfg.unit, rng, dtype)
        tree[f"g{g}"] = grp
    return ad.flatten(tree)


# --- blocks ---------------------------------------------------------------------


def crm(low, p):
    """Bilinear x2 upsampling followed by a per-pixel linear channel map."""
    v = ad.value(low)
    h, w = v.shape[-3], v.shape[-2]
    return ad.linear(upsample2(low, 2 * h, 2 * w), p["w"], p.get("b"))


def dfsa(streams, p):
    """Per-pixel softmax weighting of equally shaped streams."""
    shapes = {ad.value(s).shape for s in streams}
    if len(shapes) != 1:
        raise ValueError(f"dfsa streams must share a shape, got {sorted(shapes)}")
    if len(streams) == 1:
        return streams[0]
    logits = ad.linear(ad.concat(streams, axis=-1), p["w"], p.get("b"))
    wts = ad.softmax(logits, axis=-1)
    out = None
    for i, s in enumerate(streams):
        wi = ad.reshape(_channel(wts, i), ad.value(s).shape[:-1] + (1,))
        term = ad.mul(s, wi)
        out = term if out is None else ad.add(out, term)
    return out


def _channel(x, i):
    v = ad.value(x)
    n = v.shape[-1]
    sel = np.zeros((n, 1), dtype=v.dtype)
    sel[i, 0] = 1
    return ad.matmul(x, sel)


def unit_forward(x, p, cfg: UnitConfig, dump: Optional[dict] = None, prefix: str = "unit"):
    """One refinement unit; returns the updated feature map and its routing statistics."""
    g = lsgp_forward(x, ad.scope(p, "lsgp")) if cfg.use_lsgp else x
    split = sflap_split(g) if cfg.use_sflap else box_split(g)
    if cfg.use_scan:
        hi = patch_scan_block(split.high, ad.scope(p, "scan_high"), cfg.patch)
        lo = patch_scan_block(split.low, ad.scope(p, "scan_low"), cfg.patch)
    else:
        hi, lo = split.high, split.low
    lo_up = crm(lo, ad.scope(p, "crm"))
    feats = ad.concat([g, hi, lo_up], axis=-1)
    y_sh, y_rt, stats = moe_branches(feats, ad.scope(p, "moe"), cfg.shared, cfg.routed)
    fused = dfsa([s for s in (y_sh, y_rt) if s is not None], ad.scope(p, "dfsa"))
    out = ad.add(x, fused)
    if dump is not None:
        rec = {
            "lsgp.before": x,
            "lsgp.after": g,
            "sflap.low": split.low_upsampled,
            "sflap.high": split.high,
            "scan_high.before": split.high,
            "scan_high.after": hi,
            "scan_low.before": split.low,
            "scan_low.after": lo,
            "moe.after": fused,
        }
        for k, v in rec.items():
            dump[f"{prefix}.{k}"] = np.array(ad.value(v), copy=True)
    return out, stats


# --- data consistency --------------------------------------------------------------


def dc_op(xr, acq: Acquisition, lam, mode: str = "soft"):
    """Differentiable data-consistency step on a real ``(..., H, W, 2)`` image."""
    xv = ad.value(xr)
    x = channels_to_complex(xv.astype(np.float64))
    grad_term = adjoint(project(x, acq.mask, acq.coils) - acq.y, acq)
    lam_v = 1.0 if mode == "hard" else float(ad.value(lam))
    if mode == "hard":
        lam = 1.0
    out = complex_to_channels(x - lam_v * grad_term, dtype=xv.dtype)

    def bw(g):
        gc = channels_to_complex(g.astype(np.float64))
        if isinstance(xr, ad.Node):
            normal = adjoint(project(gc, acq.mask, acq.coils), acq)
            xr.accumulate(complex_to_channels(gc - lam_v * normal, dtype=xv.dtype))
        if isinstance(lam, ad.Node):
            lam.accumulate(np.asarray(-np.sum((np.conj(gc) * grad_term).real), dtype=ad.value(lam).dtype))

    return ad._emit(out, (xr, lam), bw, "dc_step")


# --- cascade ---------------------------------------------------------------------------


def group_params(params, cfg: CascadeConfig, g: int):
    return ad.scope(params, "g0" if cfg.share_weights else f"g{g}")


def cascade_apply(xr, acq: Acquisition, params, cfg: CascadeConfig, dump: Optional[dict] = None):
    """Run the cascade on a real ``(B, H, W, 2)`` image (array or node)."""
    stats: list[RouteStats] = []
    for g in range(cfg.groups):
        gp = group_params(params, cfg, g)
        if cfg.use_network:
            f = ad.linear(xr, gp["lift.w"], gp["lift.b"])
            for u in range(cfg.units_per_group):
                f, st = unit_forward(f, ad.scope(gp, f"u{u}"), cfg.unit, dump, prefix=f"g{g}.u{u}")
                if st is not None:
                    stats.append(st)
            xr = ad.add(xr, ad.linear(f, gp["reduce.w"], gp["reduce.b"]))
        lam = gp["dc_lambda"] if cfg.learn_lambda else ad.value(gp["dc_lambda"])
        xr = dc_op(xr, acq, lam, cfg.dc_mode)
    return xr, stats


def cascade_forward(x0: np.ndarray, acq: Acquisition, params, cfg: CascadeConfig, dump: Optional[dict] = None, dtype=None):
    """Reconstruct from the zero-filled image ``x0``; returns the complex image and pooled routing stats."""
    x0 = np.asarray(x0)
    squeeze = x0.ndim == 2
    if squeeze:
        x0 = x0[None]
    dtype = dtype or next(iter(params.values())).dtype
    out, stats = cascade_apply(complex_to_channels(x0, dtype=dtype), acq, params, cfg, dump)
    recon = channels_to_complex(out.astype(np.float64))
    return (recon[0] if squeeze else recon), aggregate_stats(stats)


def aggregate_stats(stats: list[RouteStats]) -> Optional[RouteStats]:
    if not stats:
        return None
    p = np.mean([s.p for s in stats], axis=0)
    counts = np.sum([s.counts for s in stats], axis=0)
    return RouteStats(p, counts, float(np.mean([s.l_bal for s in stats])))


# --- objective -----------------------------------------------------------------------------


def _as_channels(x, dtype=np.float64):
    if isinstance(x, ad.Node):
        return x
    x = np.asarray(x)
    return complex_to_channels(x, dtype=dtype) if np.iscomplexobj(x) else x


def recon_loss(recon, gt):
    """Mean complex-modulus L1 error over batch and pixels."""
    r = _as_channels(recon)
    g = gt
    if not isinstance(g, ad.Node) and np.ndim(g) == ad.value(r).ndim - 1:
        # real-valued image without an imaginary channel
        g = np.asarray(g).astype(np.complex128)
    g = _as_channels(g, dtype=ad.value(r).dtype)
    return ad.mean(ad.complex_abs(ad.sub(r, g)))


def balance_loss(stats: list[RouteStats]):
    """Load-balancing loss averaged over MoE layers (differentiable when available)."""
    if not stats:
        return 0.0
    terms = [load_balance_loss(s.p_node if s.p_node is not None else s.p) for s in stats]
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul(total, 1.0 / len(terms))


def total_loss(recon, gt, stats, lambda_bal: float):
    """Reconstruction L1 plus ``lambda_bal`` times the mean balance loss."""
    if isinstance(stats, RouteStats):
        stats = [stats]
    stats = stats or []
    rec = recon_loss(recon, gt)
    if lambda_bal == 0 or not stats:
        return rec
    return ad.add(rec, ad.mul(balance_loss(stats), float(lambda_bal)))
