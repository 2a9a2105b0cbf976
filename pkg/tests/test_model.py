import os

import numpy as np
import pytest

from kmoe import autodiff as ad
from kmoe import kspace
from kmoe.model import (
    CascadeConfig,
    UnitConfig,
    cascade_apply,
    cascade_forward,
    crm,
    dc_op,
    dfsa,
    init_cascade,
    init_unit,
    recon_loss,
    total_loss,
    unit_forward,
)
from kmoe.moe import RouteStats
from kmoe.numerics import bilinear_resize, complex_to_channels
from kmoe.phantom_io import read_container, shepp_logan

from gradcheck import check

GOLDEN = os.path.join(os.path.dirname(__file__), "data", "unit_golden.kmc")


def _acq(h=32, w=32, af=4, coils=3, seed=0, kind="equispaced", sigma=0.0):
    gt = shepp_logan(max(h, 32), max(w, 32), jitter_seed=seed).image[:h, :w]
    mask = kspace.make_mask(kind, h, w, af, seed=seed)
    return gt, kspace.acquire(gt, mask, kspace.simulate_coils(h, w, coils, seed=seed), sigma, seed)


def test_zero_experts_leave_unit_input_unchanged(rng):
    cfg = UnitConfig(channels=8)
    p = ad.flatten(init_unit(cfg, rng))
    p = {k: (np.zeros_like(v) if k.startswith("moe.") and "router" not in k else v) for k, v in p.items()}
    x = rng.standard_normal((1, 8, 8, 8)).astype(np.float32)
    out, _ = unit_forward(x, p, cfg)
    np.testing.assert_array_equal(out, x)


@pytest.mark.parametrize(
    "cfg",
    [
        UnitConfig(channels=8, patch=2),
        UnitConfig(channels=4, patch=1, use_moe=False),
        UnitConfig(channels=8, patch=4, use_sflap=False, use_lsgp=False),
        UnitConfig(channels=4, patch=2, use_scan=False, n_shared=0, n_routed=2),
    ],
)
def test_unit_keeps_shape(cfg, rng):
    p = ad.flatten(init_unit(cfg, rng))
    x = rng.standard_normal((2, 16, 16, cfg.channels)).astype(np.float32)
    out, _ = unit_forward(x, p, cfg)
    assert out.shape == x.shape and out.dtype == np.float32


def test_unit_golden_file():
    tensors, meta = read_container(GOLDEN)
    cfg = UnitConfig(**meta["unit"])
    params = {k[6:]: v for k, v in tensors.items() if k.startswith("param/")}
    out, stats = unit_forward(tensors["input"], params, cfg)
    np.testing.assert_allclose(out, tensors["output"], rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(stats.p, tensors["route.p"], atol=1e-12)
    np.testing.assert_array_equal(stats.counts, tensors["route.counts"])


def test_unit_dump_keys(rng):
    cfg = UnitConfig(channels=4)
    dump = {}
    unit_forward(rng.standard_normal((1, 8, 8, 4)), ad.flatten(init_unit(cfg, rng)), cfg, dump, prefix="u")
    assert {"u.lsgp.before", "u.sflap.low", "u.sflap.high", "u.scan_low.after", "u.moe.after"} <= set(dump)


def test_crm_cases(rng):
    c = 3
    x = np.full((1, 4, 4, c), 2.0)
    np.testing.assert_allclose(crm(x, {"w": np.eye(c), "b": np.zeros(c)}), 2.0)
    assert np.all(crm(x, {"w": np.zeros((c, c)), "b": np.zeros(c)}) == 0)
    x = rng.standard_normal((2, 3, 5, c))
    w, b = rng.standard_normal((c, c)), rng.standard_normal(c)
    np.testing.assert_allclose(crm(x, {"w": w, "b": b}), bilinear_resize(x, 6, 10) @ w + b, atol=1e-12)


def test_dfsa_cases(rng):
    a = rng.standard_normal((1, 4, 4, 3))
    b = rng.standard_normal((1, 4, 4, 3))
    p = {"w": rng.standard_normal((6, 2)), "b": rng.standard_normal(2)}
    assert dfsa([a], p) is a
    np.testing.assert_allclose(dfsa([a, a], p), a, atol=1e-12)
    zero = {"w": np.zeros((6, 2)), "b": np.zeros(2)}
    np.testing.assert_allclose(dfsa([a, b], zero), (a + b) / 2, atol=1e-12)
    with pytest.raises(ValueError):
        dfsa([a, b[..., :2]], p)


def test_zero_network_is_iterated_dc():
    gt, acq = _acq(kind="random", af=4)
    cfg = CascadeConfig(groups=3, units_per_group=1, unit=UnitConfig(channels=4))
    params = init_cascade(cfg, seed=0, dtype=np.float64)
    x0 = kspace.zero_filled(acq)
    recon, _ = cascade_forward(x0, acq, params, cfg)
    ref = x0
    for _ in range(3):
        ref = kspace.dc_step(ref, acq)
    np.testing.assert_allclose(recon, ref, atol=1e-10)


def test_full_mask_recovers_truth():
    gt = shepp_logan(32, 32).image
    mask = kspace.make_mask("equispaced", 32, 32, 1, center_fraction=1.0)
    acq = kspace.acquire(gt, mask, kspace.simulate_coils(32, 32, 4))
    cfg = CascadeConfig(groups=2, units_per_group=1, unit=UnitConfig(channels=4))
    recon, _ = cascade_forward(np.zeros_like(gt), acq, init_cascade(cfg), cfg)
    assert np.max(np.abs(recon - gt)) <= 1e-4


def test_random_init_output_is_finite(rng):
    _, acq = _acq(kind="radial", af=8, sigma=0.01)
    cfg = CascadeConfig(groups=2, units_per_group=2, unit=UnitConfig(channels=8))
    params = {k: v + 0.3 * rng.standard_normal(v.shape).astype(v.dtype) for k, v in init_cascade(cfg, 3).items()}
    recon, stats = cascade_forward(kspace.zero_filled(acq), acq, params, cfg)
    assert np.all(np.isfinite(recon))
    assert stats.counts.sum() == 4 * 32 * 32


def test_shared_weights_have_one_group():
    cfg = CascadeConfig(groups=4, units_per_group=1, share_weights=True, unit=UnitConfig(channels=4))
    assert {k.split(".")[0] for k in init_cascade(cfg)} == {"g0"}


def test_config_dict_round_trip():
    cfg = CascadeConfig(groups=2, unit=UnitConfig(channels=4, patch=1))
    assert CascadeConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        CascadeConfig.from_dict({"groups": 1, "nope": 2})
    with pytest.raises(ValueError):
        UnitConfig(channels=6, reduction=4)


def test_recon_loss_values(rng):
    gt = rng.standard_normal((2, 8, 8)) + 1j * rng.standard_normal((2, 8, 8))
    assert float(recon_loss(gt, gt)) == 0
    assert float(recon_loss(gt + 0.1, gt)) == pytest.approx(0.1)


def test_total_loss_scalar_reference(rng):
    gt = rng.standard_normal((2, 4, 4)) + 1j * rng.standard_normal((2, 4, 4))
    rec = rng.standard_normal((2, 4, 4)) + 1j * rng.standard_normal((2, 4, 4))
    stats = [RouteStats(np.array([0.4, 0.3, 0.2, 0.1]), np.zeros(4), 0.0), RouteStats(np.full(4, 0.25), np.zeros(4), 0.0)]
    l1 = sum(abs(rec[b, i, j] - gt[b, i, j]) for b in range(2) for i in range(4) for j in range(4)) / 32
    lbal = (4 * (0.16 + 0.09 + 0.04 + 0.01) + 1.0) / 2
    assert float(total_loss(rec, gt, stats, 0.01)) == pytest.approx(l1 + 0.01 * lbal, rel=1e-12)
    assert float(total_loss(rec, gt, stats, 0.0)) == pytest.approx(l1, rel=1e-12)


def test_dc_op_gradients(rng):
    _, acq = _acq(h=8, w=8, kind="random", coils=2)
    x = rng.standard_normal((1, 8, 8, 2))
    w = rng.standard_normal((1, 8, 8, 2))
    check(lambda n: ad.sum(ad.mul(dc_op(n["x"], acq, n["lam"]), w)), {"x": x, "lam": np.asarray(0.7)})


def test_total_loss_gradients(rng):
    gt = rng.standard_normal((1, 4, 4)) + 1j * rng.standard_normal((1, 4, 4))
    rec = rng.standard_normal((1, 4, 4, 2))
    logits = rng.standard_normal((16, 3))

    def f(n):
        p = ad.mean(ad.softmax(n["z"], axis=-1), axis=0)
        return total_loss(n["r"], gt, [RouteStats(ad.value(p), np.zeros(3), 0.0, p)], 0.05)

    check(f, {"r": rec, "z": logits})


def test_cascade_apply_accepts_channels(rng):
    _, acq = _acq(h=16, w=16, kind="equispaced")
    cfg = CascadeConfig(groups=1, units_per_group=1, unit=UnitConfig(channels=4))
    x0 = complex_to_channels(kspace.zero_filled(acq)[None], np.float32)
    out, stats = cascade_apply(x0, acq, init_cascade(cfg), cfg)
    assert out.shape == (1, 16, 16, 2) and len(stats) == 1
