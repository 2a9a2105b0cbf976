"""Command-line entry point: simulate, reconstruct, train, ablate, spectra.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import json
import logging
import math
import os
import sys
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import kspace, metrics, training
from .config import ConfigError, RunConfig, load
from .model import cascade_forward, init_cascade
from .phantom_io import (
    TensorFileError,
    read_container,
    read_tensor,
    shepp_logan,
    spectra_diagnostic,
    write_container,
    write_pgm,
    write_tensor,
)
from .sflap import central_band_fraction

log = logging.getLogger("kmoe")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class CheckpointMismatch(ConfigError):
    pass


# --- checkpoints -------------------------------------------------------------------


def save_checkpoint(path, params: dict, state: ad.AdamState, cfg: RunConfig) -> None:
    tensors = {f"param/{k}": v for k, v in params.items()}
    tensors.update({f"adam.m/{k}": v for k, v in state.m.items()})
    tensors.update({f"adam.v/{k}": v for k, v in state.v.items()})
    tensors["adam.step"] = np.asarray(state.step, dtype=np.float64)
    meta = {"kind": "checkpoint", "model": cfg.model_dict(), "step": int(state.step), "dtype": cfg.train.dtype}
    write_container(path, tensors, meta)


def _diverge(a, b, path=""):
    if isinstance(a, dict) and isinstance(b, dict):
        for k in sorted(set(a) | set(b)):
            if k not in a or k not in b:
                return f"{path}/{k}"
            hit = _diverge(a[k], b[k], f"{path}/{k}")
            if hit:
                return hit
        return None
    return None if a == b else path


def load_checkpoint(path, cfg: RunConfig) -> tuple[dict, ad.AdamState]:
    """Read a checkpoint, checking that its model section matches ``cfg``."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    tensors, meta = read_container(path)
    saved = meta.get("model", {})
    where = _diverge(saved, cfg.model_dict())
    if where is not None:
        keys = [k for k in where.strip("/").split("/") if k]
        a, b = saved, cfg.model_dict()
        for k in keys:
            a = a.get(k) if isinstance(a, dict) else None
            b = b.get(k) if isinstance(b, dict) else None
        raise CheckpointMismatch(f"/model{where}", f"checkpoint has {a!r}, config has {b!r}")
    params = {k[6:]: v for k, v in tensors.items() if k.startswith("param/")}
    expect = init_cascade(cfg.model, 0, np.dtype(cfg.train.dtype))
    for k, v in expect.items():
        if k not in params:
            raise CheckpointMismatch(f"/params/{k}", "missing from checkpoint")
        if params[k].shape != v.shape:
            raise CheckpointMismatch(f"/params/{k}", f"shape {params[k].shape} vs {v.shape}")
    extra = sorted(set(params) - set(expect))
    if extra:
        raise CheckpointMismatch(f"/params/{extra[0]}", "not part of the configured model")
    m = {k[7:]: v for k, v in tensors.items() if k.startswith("adam.m/")}
    v_ = {k[7:]: v for k, v in tensors.items() if k.startswith("adam.v/")}
    step = int(tensors["adam.step"]) if "adam.step" in tensors else 0
    state = ad.AdamState(step, m or {k: np.zeros_like(p) for k, p in params.items()}, v_ or {k: np.zeros_like(p) for k, p in params.items()})
    return params, state


# --- acquisition files ----------------------------------------------------------------


def save_acquisition(out: str, gt, acq: kspace.Acquisition) -> None:
    write_tensor(os.path.join(out, "phantom.kmt"), np.asarray(gt, dtype=np.complex128))
    write_tensor(os.path.join(out, "mask.kmt"), acq.mask.keep.astype(np.float32))
    write_tensor(os.path.join(out, "coils.kmt"), acq.coils.maps.astype(np.complex128))
    write_tensor(os.path.join(out, "kspace.kmt"), acq.y.astype(np.complex128))
    m = acq.mask
    meta = {
        "mask": {"kind": m.kind, "af": m.af, "center_fraction": m.center_fraction, "spokes": m.spokes},
        "height": m.height,
        "width": m.width,
        "coils": acq.coils.count,
        "noise_sigma": acq.noise_sigma,
    }
    with open(os.path.join(out, "acquisition.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_acquisition(src: str):
    with open(os.path.join(src, "acquisition.json")) as fh:
        meta = json.load(fh)
    keep = read_tensor(os.path.join(src, "mask.kmt")) > 0.5
    mm = meta["mask"]
    mask = kspace.SamplingMask(keep, mm["kind"], mm["af"], mm.get("center_fraction"), mm.get("spokes"))
    coils = kspace.CoilSet(read_tensor(os.path.join(src, "coils.kmt")))
    y = read_tensor(os.path.join(src, "kspace.kmt"))
    acq = kspace.Acquisition(mask, coils, y, meta.get("noise_sigma", 0.0))
    gt_path = os.path.join(src, "phantom.kmt")
    gt = read_tensor(gt_path) if os.path.exists(gt_path) else None
    return acq, gt


# --- commands ---------------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig, out: str) -> metrics.MetricReport:
    os.makedirs(out, exist_ok=True)
    m, c = cfg.mask, cfg.coils
    mask = cfg.data().mask()
    gt = shepp_logan(m.height, m.width).image
    coils = kspace.simulate_coils(m.height, m.width, c.count, seed=c.seed)
    acq = kspace.acquire(gt, mask, coils, c.noise_sigma, seed=c.seed)
    zf = kspace.zero_filled(acq)
    save_acquisition(out, gt, acq)
    write_tensor(os.path.join(out, "zero_filled.kmt"), zf.astype(np.complex128))
    write_pgm(os.path.join(out, "phantom.pgm"), np.abs(gt))
    write_pgm(os.path.join(out, "zero_filled.pgm"), np.abs(zf))
    rep = metrics.report(zf, gt)
    path = os.path.join(out, "metrics.csv")
    if os.path.exists(path):
        os.remove(path)
    metrics.append_report_row(path, "zero_filled", m.af, m.kind, rep)
    print(f"zero-filled  psnr={_show(rep.psnr)} ssim={rep.ssim:.4f} nmse={rep.nmse:.6f}")
    return rep


def cmd_reconstruct(cfg: RunConfig, out: str, checkpoint: Optional[str], dump_features: bool = False):
    src = cfg.io.acquisition_dir or out
    acq, gt = load_acquisition(src)
    if checkpoint:
        params, _ = load_checkpoint(checkpoint, cfg)
    else:
        log.info("no checkpoint given; using the seeded initialization")
        params = init_cascade(cfg.model, cfg.train.seed, np.dtype(cfg.train.dtype))
    dump = {} if dump_features else None
    zf = kspace.zero_filled(acq)
    recon, _ = cascade_forward(zf, acq, params, cfg.model, dump=dump)
    if not np.all(np.isfinite(recon)):
        raise FloatingPointError("reconstruction produced non-finite values")
    os.makedirs(out, exist_ok=True)
    write_tensor(os.path.join(out, "recon.kmt"), recon.astype(np.complex128))
    write_pgm(os.path.join(out, "recon.pgm"), np.abs(recon))
    if dump is not None:
        write_container(os.path.join(out, "features.kmc"), dump, {"kind": "features", "layers": sorted(dump)})
    rep = None
    if gt is not None:
        rep = metrics.report(recon, gt)
        metrics.append_report_row(os.path.join(out, "metrics.csv"), cfg.io.run_id, acq.mask.af, acq.mask.kind, rep)
        print(f"recon  psnr={_show(rep.psnr)} ssim={rep.ssim:.4f} nmse={rep.nmse:.6f}")
    return recon, rep


def _fmt(x: float) -> str:
    return repr(float(x))


def _show(x: float) -> str:
    return "inf" if math.isinf(x) else f"{x:.3f}"


def cmd_train(cfg: RunConfig, out: str, checkpoint: Optional[str] = None):
    """Train, checkpointing every ``checkpoint_every`` steps; resumes from ``checkpoint`` when given."""
    os.makedirs(out, exist_ok=True)
    ckpt_path = os.path.join(out, "checkpoint.kmc")
    dtype = np.dtype(cfg.train.dtype)
    if checkpoint:
        params, state = load_checkpoint(checkpoint, cfg)
    else:
        params = init_cascade(cfg.model, cfg.train.seed, dtype)
        state = ad.AdamState.zeros_like(params)
    resumed = state.step > 0
    mode = "a" if resumed else "w"
    log_path, route_path = os.path.join(out, "train_log.csv"), os.path.join(out, "route_stats.csv")
    last_good = {"params": params, "state": state}
    if not resumed:
        save_checkpoint(ckpt_path, params, state, cfg)

    with open(log_path, mode, newline="") as lf, open(route_path, mode, newline="") as rf:
        lw, rw = csv.writer(lf), csv.writer(rf)
        if not resumed:
            lw.writerow(["step", "lr", "loss", "l_rec", "l_bal"])
            rw.writerow(["step", "expert", "p_e", "count"])

        def on_step(entry: training.StepLog, p, s):
            lw.writerow([entry.step, _fmt(entry.lr), _fmt(entry.loss), _fmt(entry.l_rec), _fmt(entry.l_bal)])
            if entry.stats:
                pe = np.mean([st.p for st in entry.stats], axis=0)
                counts = np.sum([st.counts for st in entry.stats], axis=0)
                for e in range(pe.shape[0]):
                    rw.writerow([entry.step, e, _fmt(pe[e]), int(counts[e])])
            last_good["params"], last_good["state"] = p, s
            if s.step % cfg.train.checkpoint_every == 0:
                save_checkpoint(ckpt_path, p, s, cfg)

        try:
            params, state, _ = training.train(cfg.model, cfg.train, cfg.data(), params, state, on_step)
        except FloatingPointError:
            lf.flush()
            rf.flush()
            save_checkpoint(ckpt_path, last_good["params"], last_good["state"], cfg)
            raise
    save_checkpoint(ckpt_path, params, state, cfg)
    rec, zf = training.evaluate(params, cfg.model, cfg.data(), cfg.train.eval_count)
    path = os.path.join(out, "metrics.csv")
    if os.path.exists(path):
        os.remove(path)
    metrics.append_report_row(path, cfg.io.run_id, cfg.mask.af, cfg.mask.kind, rec)
    metrics.append_report_row(path, "zero_filled", cfg.mask.af, cfg.mask.kind, zf)
    print(f"held-out  recon psnr={_show(rec.psnr)}  zero-filled psnr={_show(zf.psnr)}  step={state.step}")
    return params, state, rec, zf


# component presence per variant: (net, sflap, lsgp, moe_b, moe)
ABLATION_ROWS = [
    ("dc_only", (False, False, False, False, False)),
    ("base", (True, False, False, False, False)),
    ("base+sflap", (True, True, False, False, False)),
    ("base+sflap+lsgp", (True, True, True, False, False)),
    ("base+sflap+lsgp+moe", (True, True, True, False, True)),
    ("base+sflap+lsgp+moe_b", (True, True, True, True, False)),
]

ABLATION_FIELDS = ("variant", "net", "sflap", "lsgp", "moe_b", "moe", "patch", "groups", "units", "psnr", "ssim", "nmse")


def ablation_variant(cfg: RunConfig, flags, patch=None, groups=None) -> RunConfig:
    net, sflap, lsgp, moe_b, moe = flags
    unit = dataclasses.replace(
        cfg.model.unit,
        use_sflap=sflap,
        use_lsgp=lsgp,
        use_moe=moe or moe_b,
        patch=patch or cfg.model.unit.patch,
    )
    model = dataclasses.replace(cfg.model, unit=unit, use_network=net, groups=groups or cfg.model.groups)
    lam_bal = (cfg.train.lambda_bal or 0.01) if moe_b else 0.0
    train = dataclasses.replace(cfg.train, lambda_bal=lam_bal)
    return dataclasses.replace(cfg, model=model, train=train)


def _run_variant(v: RunConfig, net: bool):
    dtype = np.dtype(v.train.dtype)
    if net:
        params, _, _ = training.train(v.model, v.train, v.data())
    else:
        # all-off row: plain iterated data consistency, nothing to learn
        params = init_cascade(v.model, v.train.seed, dtype)
    rec, _ = training.evaluate(params, v.model, v.data(), v.train.eval_count)
    return rec


def cmd_ablate(cfg: RunConfig, out: str) -> list[dict]:
    os.makedirs(out, exist_ok=True)
    rows = []
    full = ABLATION_ROWS[-1][1]
    jobs = [(name, flags, None, None) for name, flags in ABLATION_ROWS]
    jobs += [(f"patch{p}_depth{g}", full, p, g) for p, g in cfg.ablate.patch_depth]
    for name, flags, patch, groups in jobs:
        v = ablation_variant(cfg, flags, patch, groups)
        rec = _run_variant(v, flags[0])
        row = dict(zip(ABLATION_FIELDS[1:6], (int(f) for f in flags)))
        row.update(
            variant=name,
            patch=v.model.unit.patch,
            groups=v.model.groups,
            units=v.model.units_per_group,
            psnr=_fmt(rec.psnr),
            ssim=_fmt(rec.ssim),
            nmse=_fmt(rec.nmse),
        )
        rows.append(row)
        print(f"{name:<24} psnr={_show(rec.psnr)} ssim={rec.ssim:.4f} nmse={rec.nmse:.6f}")
    with open(os.path.join(out, "ablation.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS)
        w.writeheader()
        w.writerows(rows)
    return rows


def cmd_spectra(features: str, out: str) -> list[str]:
    """One log-magnitude spectra grid per dumped tensor plus a central-band summary."""
    if not os.path.exists(features):
        raise FileNotFoundError(f"feature dump not found: {features}")
    tensors, _ = read_container(features)
    os.makedirs(out, exist_ok=True)
    written = []
    with open(os.path.join(out, "spectra.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tensor", "central_band_fraction"])
        for name in sorted(tensors):
            t = tensors[name]
            path = os.path.join(out, f"{name}.pgm")
            spectra_diagnostic(t, path)
            written.append(path)
            w.writerow([name, _fmt(central_band_fraction(t[0] if t.ndim == 4 else t))])
    print(f"wrote {len(written)} spectra grids to {out}")
    return written


# --- entry point ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kmoe", description="Desk-scale MRI reconstruction toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("simulate", "reconstruct", "train", "ablate", "spectra"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="run configuration JSON")
        sp.add_argument("--checkpoint", default=None)
        sp.add_argument("--dump-features", action="store_true", help="write intermediate feature maps")
        sp.add_argument("--seed", type=int, default=None, help="overrides every seed in the config")
        sp.add_argument("--out", default=None, help="output directory (defaults to io.out_dir)")
        if name in ("train", "ablate"):
            sp.add_argument("--steps", type=int, default=None)
        if name == "spectra":
            sp.add_argument("--features", default=None, help="feature dump (defaults to <out>/features.kmc)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        cfg.train.seed = cfg.mask.seed = cfg.coils.seed = args.seed
    if args.out is not None:
        cfg.io.out_dir = args.out
    if getattr(args, "steps", None) is not None:
        if args.steps < 0:
            raise ConfigError("/train/steps", "must be >= 0")
        cfg.train.steps = args.steps
    if args.checkpoint is None:
        args.checkpoint = cfg.io.checkpoint
    return cfg


@contextlib.contextmanager
def thread_limit():
    raw = os.environ.get("KMOE_THREADS")
    if not raw:
        yield
        return
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError("$KMOE_THREADS", f"expected a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def run(args) -> None:
    cfg = apply_overrides(load(args.config), args)
    out = cfg.io.out_dir
    with thread_limit():
        if args.command == "simulate":
            cmd_simulate(cfg, out)
        elif args.command == "reconstruct":
            cmd_reconstruct(cfg, out, args.checkpoint, args.dump_features)
        elif args.command == "train":
            cmd_train(cfg, out, args.checkpoint)
        elif args.command == "ablate":
            cmd_ablate(cfg, out)
        elif args.command == "spectra":
            features = args.features or cfg.io.features or os.path.join(out, "features.kmc")
            cmd_spectra(features, os.path.join(out, "spectra"))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        run(args)
    except ConfigError as exc:
        print(f"config error at {exc.path}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, TensorFileError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
