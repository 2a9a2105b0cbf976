import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kmoe import autodiff as ad
from kmoe.lsgp import init_lsgp, lsgp_forward

from gradcheck import check, tape_grads


def test_sum_gives_ones(rng):
    p = rng.standard_normal((3, 4))
    g = tape_grads(lambda n: ad.sum(n["p"]), {"p": p})
    np.testing.assert_array_equal(g["p"], np.ones_like(p))


def test_half_square_gives_identity(rng):
    p = rng.standard_normal((5,))
    g = tape_grads(lambda n: ad.mul(ad.sum(ad.mul(n["p"], n["p"])), 0.5), {"p": p})
    np.testing.assert_allclose(g["p"], p, atol=1e-15)


def test_non_scalar_loss_rejected():
    tape = ad.Tape()
    x = tape.param("x", np.ones(3))
    with pytest.raises(ValueError):
        ad.backward(tape, ad.mul(x, 2.0))


def test_unreached_param_gets_zero_grad():
    g = tape_grads(lambda n: ad.sum(n["a"]), {"a": np.ones(2), "b": np.ones(3)})
    np.testing.assert_array_equal(g["b"], np.zeros(3))


def test_plain_arrays_stay_plain():
    out = ad.add(np.ones(2), np.ones(2))
    assert isinstance(out, np.ndarray)


def test_float32_is_preserved():
    tape = ad.Tape()
    x = tape.param("x", np.ones(3, dtype=np.float32))
    y = ad.sum(ad.mul(ad.sigmoid(x), 0.5))
    assert ad.value(y).dtype == np.float32
    assert ad.backward(tape, y)["x"].dtype == np.float32


@pytest.mark.parametrize(
    "op",
    [ad.exp, ad.relu, ad.sigmoid, ad.softplus, ad.silu, ad.square, lambda a: ad.softmax(a, axis=-1), ad.layer_norm],
)
def test_elementwise_op_gradients(op, rng):
    x = rng.standard_normal((3, 6)) + 0.05
    w = rng.standard_normal((3, 6))
    check(lambda n: ad.sum(ad.mul(op(n["x"]), w)), {"x": x})


def test_matmul_reshape_transpose_concat(rng):
    a = rng.standard_normal((2, 3, 4))
    w = rng.standard_normal((4, 5))
    b = rng.standard_normal((2, 3, 2))

    def f(n):
        y = ad.matmul(n["a"], n["w"])
        y = ad.concat([y, n["b"]], axis=-1)
        y = ad.transpose(ad.reshape(y, (2, 21)), (1, 0))
        return ad.sum(ad.mul(y, y))

    check(f, {"a": a, "w": w, "b": b})


def test_gather_scatter(rng):
    a = rng.standard_normal((6, 3))
    idx = np.array([4, 0, 2])
    w = rng.standard_normal((6, 3))
    check(lambda n: ad.sum(ad.mul(ad.scatter_rows(ad.take_rows(n["a"], idx), idx, 6), w)), {"a": a})


def test_complex_abs(rng):
    a = rng.standard_normal((4, 5, 2))
    check(lambda n: ad.mean(ad.complex_abs(n["a"])), {"a": a})


def test_complex_abs_zero_has_zero_grad():
    g = tape_grads(lambda n: ad.sum(ad.complex_abs(n["a"])), {"a": np.zeros((2, 2))})
    np.testing.assert_array_equal(g["a"], 0)


@pytest.mark.parametrize("axis", [0, 1])
def test_linear_recurrence(axis, rng):
    shape = (5, 3) if axis == 0 else (2, 5, 3)
    decay = rng.uniform(0.2, 0.9, shape)
    drive = rng.standard_normal(shape)
    w = rng.standard_normal(shape)
    check(lambda n: ad.sum(ad.mul(ad.linear_recurrence(n["d"], n["u"], axis=axis), w)), {"d": decay, "u": drive})


def test_linear_recurrence_matches_loop(rng):
    decay = rng.uniform(0, 1, (7, 2))
    drive = rng.standard_normal((7, 2))
    h = ad.linear_recurrence(decay, drive, axis=0)
    ref = np.zeros(2)
    for t in range(7):
        ref = decay[t] * ref + drive[t]
        np.testing.assert_allclose(h[t], ref, atol=1e-14)


def test_lsgp_block_gradients(rng):
    x = rng.standard_normal((2, 5, 6, 8))
    p = init_lsgp(8, 4, rng, scale=0.5, dtype=np.float64)
    p = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in p.items()}
    w = rng.standard_normal(x.shape)
    check(lambda n: ad.sum(ad.mul(lsgp_forward(n["x"], ad.scope(n, "p")), w)), {"x": x, **ad.flatten({"p": p})})


# --- optimizer --------------------------------------------------------------------


def test_zero_grads_keep_params(rng):
    p = {"w": rng.standard_normal((3, 3))}
    st_ = ad.AdamState.zeros_like(p)
    new, _ = ad.adam_step(p, {"w": np.zeros((3, 3))}, st_, lr=1e-2)
    np.testing.assert_array_equal(new["w"], p["w"])


def test_first_step_moves_by_lr():
    p = {"w": np.zeros(4)}
    g = {"w": np.array([3.0, -0.2, 1e3, 7.0])}
    new, state = ad.adam_step(p, g, ad.AdamState.zeros_like(p), lr=1e-3)
    # bias-corrected m/sqrt(v) is sign(g) after one step
    np.testing.assert_allclose(np.abs(new["w"]), 1e-3, rtol=1e-6)
    np.testing.assert_array_equal(np.sign(new["w"]), -np.sign(g["w"]))
    assert state.step == 1


def test_decoupled_weight_decay():
    p = {"w": np.full(2, 2.0)}
    new, _ = ad.adam_step(p, {"w": np.zeros(2)}, ad.AdamState.zeros_like(p), lr=0.1, weight_decay=0.5)
    np.testing.assert_allclose(new["w"], 2.0 * (1 - 0.1 * 0.5))


def test_bad_lr_rejected():
    p = {"w": np.zeros(2)}
    with pytest.raises(ValueError):
        ad.adam_step(p, p, ad.AdamState.zeros_like(p), lr=0.0)


def test_quadratic_bowl_monotone_after_warmup(rng):
    p = {"w": rng.standard_normal(16) * 3}
    state = ad.AdamState.zeros_like(p)
    norms = []
    for step in range(500):
        lr = ad.cosine_lr(step, 500, 1e-2, warmup=50)
        p, state = ad.adam_step(p, {"w": p["w"].copy()}, state, lr)
        norms.append(np.linalg.norm(p["w"]))
    tail = np.array(norms[50:])
    assert np.all(np.diff(tail) < 0)
    assert norms[-1] < norms[0]


@given(total=st.integers(10, 500), warm=st.integers(0, 9), step=st.integers(0, 600))
def test_cosine_schedule_bounds(total, warm, step):
    lr = ad.cosine_lr(step, total, 1e-3, warmup=warm)
    assert 0.0 <= lr <= 1e-3 + 1e-18
