"""Train the desk-scale cascade and compare against zero filling on held-out phantoms.

    python scripts/train_desk.py --steps 400 --lambda-bal 0.01
"""

import argparse
import logging
import time

from kmoe.model import CascadeConfig, UnitConfig
from kmoe.training import DataConfig, TrainConfig, evaluate, held_out_routing, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=400)
    ap.add_argument("--lr", type=float, default=8e-4)
    ap.add_argument("--lambda-bal", type=float, default=0.01)
    ap.add_argument("--groups", type=int, default=1)
    ap.add_argument("--channels", type=int, default=8)
    ap.add_argument("--patch", type=int, default=2)
    ap.add_argument("--mask", default="equispaced", choices=["equispaced", "random", "radial"])
    ap.add_argument("--af", type=float, default=4.0)
    ap.add_argument("--coils", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = CascadeConfig(groups=args.groups, units_per_group=2, unit=UnitConfig(channels=args.channels, patch=args.patch))
    data = DataConfig(64, 64, args.mask, args.af, coils=args.coils)
    tc = TrainConfig(lr=args.lr, steps=args.steps, warmup_steps=min(30, args.steps), lambda_bal=args.lambda_bal, seed=args.seed)
    t0 = time.perf_counter()
    params, _, history = train(cfg, tc, data)
    elapsed = time.perf_counter() - t0
    rec, zf = evaluate(params, cfg, data, 16)
    p = held_out_routing(params, cfg, data, 16)
    print(f"trained {args.steps} steps in {elapsed:.0f}s, final loss {history[-1].loss:.5f}")
    print(f"held-out PSNR {rec.psnr:.2f} dB (zero-filled {zf.psnr:.2f}, gain {rec.psnr - zf.psnr:+.2f})")
    print(f"held-out SSIM {rec.ssim:.4f} (zero-filled {zf.ssim:.4f}), NMSE {rec.nmse:.5f}")
    print("expert gate mass", " ".join(f"{v:.4f}" for v in p))


if __name__ == "__main__":
    main()
