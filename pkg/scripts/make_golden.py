"""Regenerate the frozen unit_forward reference in tests/data.

Run only after an intentional change to the unit's numerics:

    python scripts/make_golden.py
"""

import os
from dataclasses import asdict

import numpy as np

from kmoe import autodiff as ad
from kmoe.model import UnitConfig, init_unit, unit_forward
from kmoe.phantom_io import write_container

OUT = os.path.join(os.path.dirname(__file__), "..", "tests", "data", "unit_golden.kmc")
SEED = 20240607


def build():
    cfg = UnitConfig(channels=8, patch=2, state_dim=4, n_shared=1, n_routed=4)
    rng = np.random.default_rng(SEED)
    params = ad.flatten(init_unit(cfg, rng, np.float64))
    # move away from the near-identity initialization so every path contributes
    params = {k: v + 0.2 * rng.standard_normal(v.shape) for k, v in params.items()}
    x = rng.standard_normal((1, 16, 16, 8))
    out, stats = unit_forward(x, params, cfg)
    return cfg, params, x, out, stats


def main():
    cfg, params, x, out, stats = build()
    tensors = {"input": x, "output": out, "route.p": stats.p, "route.counts": stats.counts.astype(np.float64)}
    tensors.update({f"param/{k}": v for k, v in params.items()})
    write_container(OUT, tensors, {"unit": asdict(cfg), "seed": SEED})
    print(f"wrote {os.path.normpath(OUT)}: output norm {np.linalg.norm(out):.6f}")


if __name__ == "__main__":
    main()
