"""Synthetic data pipeline, training loop and held-out evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from . import kspace, metrics
from .model import CascadeConfig, balance_loss, cascade_apply, cascade_forward, init_cascade, recon_loss
from .moe import RouteStats
from .numerics import complex_to_channels
from .phantom_io import shepp_logan

log = logging.getLogger(__name__)

# held-out phantoms draw jitter seeds from a range training never touches
EVAL_SEED_BASE = 2**31 - 10_000
TRAIN_SEED_SPAN = 2**30


@dataclass
class DataConfig:
    height: int = 64
    width: int = 64
    mask_kind: str = "equispaced"
    af: float = 4.0
    center_fraction: Optional[float] = None
    spokes: Optional[int] = None
    mask_seed: int = 0
    coils: int = 4
    noise_sigma: float = 0.0

    def mask(self) -> kspace.SamplingMask:
        return kspace.make_mask(
            self.mask_kind, self.height, self.width, self.af, self.center_fraction, self.spokes, self.mask_seed
        )


@dataclass
class TrainConfig:
    lr: float = 8e-4
    steps: int = 2000
    warmup_steps: int = 100
    lambda_bal: float = 0.01
    seed: int = 0
    batch_size: int = 4
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    checkpoint_every: int = 500
    eval_count: int = 16
    dtype: str = "float32"


def sample_seed(run_seed: int, step: int, b: int, batch: int) -> int:
    return (run_seed * 1_000_003 + step * batch + b) % TRAIN_SEED_SPAN


def make_batch(seeds, data: DataConfig, mask: kspace.SamplingMask):
    """Phantoms, per-sample coil sets and measurements for the given jitter seeds."""
    gts, maps = [], []
    for s in seeds:
        gts.append(shepp_logan(data.height, data.width, jitter_seed=int(s)).image)
        maps.append(kspace.simulate_coils(data.height, data.width, data.coils, seed=int(s)).maps)
    gt = np.stack(gts)
    coils = kspace.CoilSet(np.stack(maps))
    acq = kspace.acquire(gt, mask, coils, data.noise_sigma, seed=int(seeds[0]))
    return gt, acq


@dataclass
class StepLog:
    step: int
    lr: float
    loss: float
    l_rec: float
    l_bal: float
    stats: list = field(default_factory=list)


def loss_and_grads(params, cfg: CascadeConfig, gt, acq, lambda_bal: float, dtype):
    tape = ad.Tape()
    nodes = tape.params_from(params)
    x0 = tape.const(complex_to_channels(kspace.zero_filled(acq), dtype=dtype))
    out, stats = cascade_apply(x0, acq, nodes, cfg)
    l_rec = recon_loss(out, gt)
    l_bal = balance_loss(stats)
    loss = l_rec if (lambda_bal == 0 or not stats) else ad.add(l_rec, ad.mul(l_bal, float(lambda_bal)))
    if not isinstance(loss, ad.Node) or not loss.requires_grad:
        grads = {k: np.zeros_like(v) for k, v in params.items()}
    else:
        grads = ad.backward(tape, loss)
    plain = [RouteStats(s.p, s.counts, s.l_bal) for s in stats]
    return float(ad.value(loss)), float(ad.value(l_rec)), float(ad.value(l_bal)), grads, plain


def train(
    cfg: CascadeConfig,
    tc: TrainConfig,
    data: DataConfig,
    params: Optional[dict] = None,
    state: Optional[ad.AdamState] = None,
    on_step: Optional[Callable[[StepLog, dict, ad.AdamState], None]] = None,
):
    """AdamW with linear warm-up and cosine decay; resumes from ``state.step`` when given."""
    dtype = np.dtype(tc.dtype)
    params = params if params is not None else init_cascade(cfg, tc.seed, dtype)
    state = state if state is not None else ad.AdamState.zeros_like(params)
    mask = data.mask()
    history = []
    for step in range(state.step, tc.steps):
        seeds = [sample_seed(tc.seed, step, b, tc.batch_size) for b in range(tc.batch_size)]
        gt, acq = make_batch(seeds, data, mask)
        loss, l_rec, l_bal, grads, stats = loss_and_grads(params, cfg, gt, acq, tc.lambda_bal, dtype)
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {step}")
        lr = ad.cosine_lr(step, tc.steps, tc.lr, tc.warmup_steps)
        params, state = ad.adam_step(params, grads, state, lr, tuple(tc.betas), tc.weight_decay)
        entry = StepLog(step, lr, loss, l_rec, l_bal, stats)
        history.append(entry)
        if on_step is not None:
            on_step(entry, params, state)
        if step % 50 == 0:
            log.info("step %d loss %.5f rec %.5f bal %.4f lr %.2e", step, loss, l_rec, l_bal, lr)
    return params, state, history


def evaluate(params, cfg: CascadeConfig, data: DataConfig, count: int = 16, batch: int = 4):
    """Mean PSNR/SSIM/NMSE of the cascade and of zero filling over held-out phantoms."""
    mask = data.mask()
    seeds = [EVAL_SEED_BASE + i for i in range(count)]
    rec_rows, zf_rows = [], []
    for i in range(0, count, batch):
        gt, acq = make_batch(seeds[i : i + batch], data, mask)
        zf = kspace.zero_filled(acq)
        recon, _ = cascade_forward(zf, acq, params, cfg)
        for b in range(gt.shape[0]):
            rng_ = float(np.abs(gt[b]).max())
            rec_rows.append(metrics.report(recon[b], gt[b], rng_))
            zf_rows.append(metrics.report(zf[b], gt[b], rng_))

    def mean(rows):
        return metrics.MetricReport(*(float(np.mean([getattr(r, f) for r in rows])) for f in ("psnr", "ssim", "nmse")))

    return mean(rec_rows), mean(zf_rows)


def held_out_routing(params, cfg: CascadeConfig, data: DataConfig, count: int = 16, batch: int = 4) -> np.ndarray:
    """Mean gate mass per routed expert over the held-out phantoms (all MoE layers pooled)."""
    mask = data.mask()
    seeds = [EVAL_SEED_BASE + i for i in range(count)]
    ps = []
    for i in range(0, count, batch):
        gt, acq = make_batch(seeds[i : i + batch], data, mask)
        _, stats = cascade_forward(kspace.zero_filled(acq), acq, params, cfg)
        if stats is None:
            raise ValueError("model has no routed experts")
        ps.append(stats.p)
    return np.mean(ps, axis=0)
