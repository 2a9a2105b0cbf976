import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kmoe import autodiff as ad
from kmoe.moe import init_moe, load_balance_loss, moe_branches, moe_forward, route

from gradcheck import check


def test_single_expert_routing(rng):
    x = rng.standard_normal((2, 3, 3, 4))
    gates, mask, stats = route(x, rng.standard_normal((4, 1)))
    assert np.all(mask == 1) and np.allclose(gates, 1)
    np.testing.assert_allclose(stats.p, [1.0])


def test_stats_match_pixel_loop(rng):
    x = rng.standard_normal((2, 5, 4, 6))
    wr = rng.standard_normal((6, 4))
    gates, mask, stats = route(x, wr)
    p = np.zeros(4)
    counts = np.zeros(4, int)
    for b in range(2):
        for i in range(5):
            for j in range(4):
                logits = [sum(x[b, i, j, c] * wr[c, e] for c in range(6)) for e in range(4)]
                m = max(logits)
                ex = [np.exp(v - m) for v in logits]
                g = [v / sum(ex) for v in ex]
                p += g
                counts[int(np.argmax(g))] += 1
    np.testing.assert_allclose(stats.p, p / 40, atol=1e-12)
    np.testing.assert_array_equal(stats.counts, counts)
    assert stats.l_bal == pytest.approx(4 * np.sum((p / 40) ** 2))


def test_ties_go_to_lowest_index():
    _, mask, _ = route(np.zeros((1, 3)), np.zeros((3, 4)))
    np.testing.assert_array_equal(mask, [[1, 0, 0, 0]])


def _identity_expert(c):
    eye = np.eye(c)
    return {"w1": np.hstack([eye, -eye]), "b1": np.zeros(2 * c), "w2": np.vstack([eye, -eye]), "b2": np.zeros(c)}


def test_identity_routed_expert(rng):
    c = 3
    p = {f"routed.0.{k}": v for k, v in _identity_expert(c).items()}
    p["router.w"] = rng.standard_normal((c, 1))
    x = rng.standard_normal((2, 4, 4, c))
    y, _ = moe_forward(x, p, n_shared=0, n_routed=1)
    np.testing.assert_allclose(y, x, atol=1e-14)


def test_zero_experts_give_zero(rng):
    p = init_moe(5, 3, 1, 3, 4, rng)
    p = {k: (v if k == "router.w" else np.zeros_like(v)) for k, v in p.items()}
    y, _ = moe_forward(rng.standard_normal((1, 4, 4, 5)).astype(np.float32), p, 1, 3)
    assert np.all(y == 0)


def test_matches_dense_masked_sum(rng):
    p = init_moe(4, 3, 1, 2, 5, rng, dtype=np.float64)
    p = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in p.items()}
    x = rng.standard_normal((2, 3, 5, 4))
    y, _ = moe_forward(x, p, 1, 2)

    def mlp(v, pre):
        return np.maximum(v @ p[f"{pre}.w1"] + p[f"{pre}.b1"], 0) @ p[f"{pre}.w2"] + p[f"{pre}.b2"]

    logits = x @ p["router.w"]
    m = np.eye(2)[np.argmax(logits, axis=-1)]
    dense = mlp(x, "shared.0") + m[..., :1] * mlp(x, "routed.0") + m[..., 1:] * mlp(x, "routed.1")
    np.testing.assert_allclose(y, dense, atol=1e-12)


def test_branches_split_streams(rng):
    p = init_moe(4, 4, 2, 3, rng=rng)
    x = rng.standard_normal((1, 2, 2, 4)).astype(np.float32)
    ys, yr, st_ = moe_branches(x, p, 2, 3)
    y, _ = moe_forward(x, p, 2, 3)
    np.testing.assert_allclose(ys + yr, y, atol=1e-6)
    assert st_.counts.sum() == 4


def test_balance_loss_values():
    assert float(load_balance_loss(np.full(4, 0.25))) == pytest.approx(1.0, abs=1e-12)
    assert float(load_balance_loss(np.array([1.0, 0, 0, 0]))) == pytest.approx(4.0)
    assert float(load_balance_loss(np.array([0.5, 0.3, 0.1, 0.1]))) == pytest.approx(1.44)


@given(n=st.integers(1, 8), seed=st.integers(0, 2**16))
def test_balance_loss_bounds(n, seed):
    p = np.random.default_rng(seed).dirichlet(np.ones(n))
    lb = float(load_balance_loss(p))
    assert 1 - 1e-9 <= lb <= n + 1e-9


def test_expert_gradients(rng):
    p = init_moe(4, 3, 1, 3, 4, rng, dtype=np.float64)
    x = rng.standard_normal((1, 3, 3, 4))
    w = rng.standard_normal((1, 3, 3, 3))
    params = {"x": x, **ad.flatten({"m": p})}
    check(lambda n: ad.sum(ad.mul(moe_forward(n["x"], ad.scope(n, "m"), 1, 3)[0], w)), params)


def test_router_gradient_through_balance_loss(rng):
    x = rng.standard_normal((2, 3, 3, 4))
    wr = rng.standard_normal((4, 3))

    def f(n):
        _, _, s = route(x, n["wr"])
        return load_balance_loss(s.p_node if s.p_node is not None else s.p)

    check(f, {"wr": wr})
