"""Acquisition physics: sampling masks, coil maps, forward/adjoint, data consistency.

Images are complex arrays ``(..., H, W)``; coil maps are ``(C, H, W)`` or
batched ``(B, C, H, W)``; k-space measurements are ``(..., C, H, W)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .numerics import fft2c, ifft2c

GOLDEN_ANGLE_DEG = 180.0 / ((1.0 + math.sqrt(5.0)) / 2.0)  # ~111.246

MASK_KINDS = ("equispaced", "random", "radial")


@dataclass(frozen=True)
class SamplingMask:
    keep: np.ndarray
    kind: str
    af: float
    center_fraction: Optional[float] = None
    spokes: Optional[int] = None

    @property
    def height(self) -> int:
        return self.keep.shape[0]

    @property
    def width(self) -> int:
        return self.keep.shape[1]

    @property
    def fraction(self) -> float:
        return float(self.keep.mean())


@dataclass(frozen=True)
class CoilSet:
    maps: np.ndarray

    @property
    def count(self) -> int:
        return self.maps.shape[-3]


@dataclass
class Acquisition:
    mask: SamplingMask
    coils: CoilSet
    y: np.ndarray
    noise_sigma: float = 0.0


def default_center_fraction(af: float) -> float:
    # fastMRI convention: 8% at 4x, 4% at 8x
    return min(1.0, 0.32 / af)


def default_spokes(af: float) -> int:
    # 32 spokes at 4x and 16 at 8x on a 128 x 128 grid
    return max(1, int(round(128 / af)))


def _center_band(w: int, center_fraction: float) -> tuple[int, int]:
    n_low = int(math.floor(w * center_fraction + 0.5))
    start = (w - n_low + 1) // 2
    return start, n_low


def make_mask(
    kind: str,
    h: int,
    w: int,
    af: float,
    center_fraction: Optional[float] = None,
    spokes: Optional[int] = None,
    seed: int = 0,
) -> SamplingMask:
    """Build an undersampling pattern.

    ``equispaced`` keeps a centered band of ``round(w * center_fraction)``
    columns plus every ``af``-th column (starting at column 0).  ``random``
    keeps the same band plus Bernoulli columns whose probability brings the
    expected total to ``w / af``.  ``radial`` rasterizes golden-angle spokes
    through the k-space center with nearest-neighbour rounding.
    """
    if kind not in MASK_KINDS:
        raise ValueError(f"unknown mask kind {kind!r}; expected one of {MASK_KINDS}")
    if h < 1 or w < 1:
        raise ValueError("mask extents must be >= 1")
    if af < 1:
        raise ValueError("acceleration factor must be >= 1")

    if kind == "radial":
        n_spokes = default_spokes(af) if spokes is None else int(spokes)
        if n_spokes < 1:
            raise ValueError("radial masks need at least one spoke")
        keep = _radial(h, w, n_spokes)
        return SamplingMask(keep, kind, float(af), None, n_spokes)

    cf = default_center_fraction(af) if center_fraction is None else float(center_fraction)
    if not 0.0 <= cf <= 1.0:
        raise ValueError("center_fraction must lie in [0, 1]")
    start, n_low = _center_band(w, cf)
    budget = w / af
    if n_low > budget + 1e-9:
        raise ValueError(f"center band of {n_low} columns exceeds the {budget:.1f}-column budget at af={af}")

    cols = np.zeros(w, dtype=bool)
    if kind == "equispaced":
        cols[:: max(1, int(round(af)))] = True
    else:
        rng = np.random.default_rng(seed)
        prob = (budget - n_low) / (w - n_low) if w > n_low else 0.0
        cols = rng.random(w) < prob
    cols[start : start + n_low] = True
    keep = np.broadcast_to(cols, (h, w)).copy()
    return SamplingMask(keep, kind, float(af), cf, None)


def _radial(h: int, w: int, n_spokes: int) -> np.ndarray:
    keep = np.zeros((h, w), dtype=bool)
    cy, cx = h // 2, w // 2
    radius = max(h, w)
    t = np.arange(-radius, radius + 0.5, 0.5)
    for k in range(n_spokes):
        theta = math.radians((k * GOLDEN_ANGLE_DEG) % 360.0)
        ky = np.floor(cy + t * math.sin(theta) + 0.5).astype(int)
        kx = np.floor(cx + t * math.cos(theta) + 0.5).astype(int)
        ok = (ky >= 0) & (ky < h) & (kx >= 0) & (kx < w)
        keep[ky[ok], kx[ok]] = True
    return keep


def simulate_coils(h: int, w: int, count: int, seed: int = 0) -> CoilSet:
    """Smooth complex Gaussian-lobe receive profiles, normalized to unit root-sum-of-squares."""
    if count < 1:
        raise ValueError("coil count must be >= 1")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(h) - h / 2, np.arange(w) - w / 2, indexing="ij")
    radius = 0.5 * max(h, w)
    width = 0.5 * max(h, w)
    rotation = rng.uniform(0, 2 * np.pi)
    phases = rng.uniform(-np.pi, np.pi, size=count)
    ramps = rng.normal(scale=0.5 * np.pi, size=(count, 2))
    maps = np.empty((count, h, w), dtype=np.complex128)
    for c in range(count):
        ang = rotation + 2 * np.pi * c / count
        dy = yy - radius * math.sin(ang)
        dx = xx - radius * math.cos(ang)
        mag = np.exp(-(dy**2 + dx**2) / (2 * width**2))
        phase = phases[c] + ramps[c, 0] * yy / h + ramps[c, 1] * xx / w
        maps[c] = mag * np.exp(1j * phase)
    maps /= np.sqrt(np.sum(np.abs(maps) ** 2, axis=0, keepdims=True))
    return CoilSet(maps)


def _check_dims(x: np.ndarray, acq_mask: SamplingMask, coils: CoilSet) -> None:
    if x.shape[-2:] != acq_mask.keep.shape or coils.maps.shape[-2:] != acq_mask.keep.shape:
        raise ValueError(
            f"dimension mismatch: image {x.shape[-2:]}, mask {acq_mask.keep.shape}, coils {coils.maps.shape[-2:]}"
        )


def project(x: np.ndarray, mask: SamplingMask, coils: CoilSet) -> np.ndarray:
    """Noiseless ``mask * F(S_c x)`` for every coil."""
    x = np.asarray(x)
    _check_dims(x, mask, coils)
    return mask.keep * fft2c(coils.maps * x[..., None, :, :])


def forward_model(x: np.ndarray, acq: Acquisition, seed: Optional[int] = None) -> np.ndarray:
    """Masked multi-coil k-space of ``x`` plus seeded complex Gaussian noise on sampled entries."""
    y = project(x, acq.mask, acq.coils)
    if acq.noise_sigma > 0:
        rng = np.random.default_rng(seed)
        scale = acq.noise_sigma / math.sqrt(2.0)
        noise = rng.normal(scale=scale, size=y.shape) + 1j * rng.normal(scale=scale, size=y.shape)
        y = y + acq.mask.keep * noise
    return y


def acquire(
    x: np.ndarray, mask: SamplingMask, coils: CoilSet, noise_sigma: float = 0.0, seed: Optional[int] = None
) -> Acquisition:
    acq = Acquisition(mask, coils, np.zeros(0), noise_sigma)
    acq.y = forward_model(x, acq, seed=seed)
    return acq


def adjoint(ys: np.ndarray, acq: Acquisition) -> np.ndarray:
    """``sum_c conj(S_c) * F^-1(mask * y_c)``."""
    ys = np.asarray(ys)
    if ys.shape[-2:] != acq.mask.keep.shape or ys.shape[-3] != acq.coils.count:
        raise ValueError(f"k-space shape {ys.shape} does not match mask/coils")
    return np.sum(np.conj(acq.coils.maps) * ifft2c(acq.mask.keep * ys), axis=-3)


def zero_filled(acq: Acquisition) -> np.ndarray:
    return adjoint(acq.y, acq)


def dc_step(x: np.ndarray, acq: Acquisition, lam: float = 1.0, mode: str = "soft") -> np.ndarray:
    """Data-consistency update.

    ``soft``: one gradient step ``x - lam * A^H (A x - y)`` on the data-fidelity
    term.  ``hard``: overwrite sampled coil k-space with the measurements and
    coil-combine; this coincides with ``soft`` at ``lam = 1`` because the coil
    maps have unit root-sum-of-squares.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    x = np.asarray(x)
    if mode == "soft":
        if lam == 0:
            return x.copy()
        resid = project(x, acq.mask, acq.coils) - acq.y
        return x - lam * adjoint(resid, acq)
    if mode == "hard":
        _check_dims(x, acq.mask, acq.coils)
        k = fft2c(acq.coils.maps * x[..., None, :, :])
        k = np.where(acq.mask.keep, acq.y, k)
        return np.sum(np.conj(acq.coils.maps) * ifft2c(k), axis=-3)
    raise ValueError(f"unknown dc mode {mode!r}")


def data_residual(x: np.ndarray, acq: Acquisition) -> float:
    r = project(x, acq.mask, acq.coils) - acq.y
    return float(np.sum(np.abs(r) ** 2))
