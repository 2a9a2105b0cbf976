import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kmoe import autodiff as ad
from kmoe.sflap import (
    binomial_kernel,
    box_split,
    central_band_fraction,
    sflap_reduce,
    sflap_reduce_adjoint,
    sflap_split,
)

from gradcheck import check


def dense_reduce(x):
    """Brute-force 5x5 binomial filter with reflected borders, then keep even rows/cols."""
    k = np.array([1, 4, 6, 4, 1], dtype=np.float64)
    k2 = np.outer(k, k) / 256.0
    h, w = x.shape[:2]

    def refl(i, n):
        return -i if i < 0 else (2 * (n - 1) - i if i >= n else i)

    out = np.zeros((h // 2, w // 2) + x.shape[2:])
    for i in range(0, h, 2):
        for j in range(0, w, 2):
            acc = 0.0
            for a in range(5):
                for b in range(5):
                    acc = acc + k2[a, b] * x[refl(i + a - 2, h), refl(j + b - 2, w)]
            out[i // 2, j // 2] = acc
    return out


def test_kernel_properties():
    k = binomial_kernel()
    assert k.sum() == pytest.approx(1.0)
    np.testing.assert_array_equal(k, k[::-1])
    # second moment about the center tap
    assert float(np.sum(k * (np.arange(5) - 2) ** 2)) == pytest.approx(1.0)


def test_impulse_matches_dense_oracle():
    x = np.zeros((8, 8))
    x[3, 4] = 1.0
    np.testing.assert_allclose(sflap_reduce(x), dense_reduce(x), atol=1e-15)


def test_random_matches_dense_oracle(rng):
    x = rng.standard_normal((12, 10, 3))
    np.testing.assert_allclose(sflap_reduce(x), dense_reduce(x), atol=1e-12)


def test_constant_and_linearity(rng):
    np.testing.assert_allclose(sflap_reduce(np.full((16, 16), 3.0)), 3.0, atol=1e-14)
    x = rng.standard_normal((8, 8, 2))
    np.testing.assert_allclose(sflap_reduce(2.5 * x), 2.5 * sflap_reduce(x), atol=1e-14)


def test_odd_extent_rejected():
    with pytest.raises(ValueError):
        sflap_reduce(np.ones((7, 8)))


@given(h=st.integers(3, 8), w=st.integers(3, 8), seed=st.integers(0, 2**16))
def test_reduce_adjoint(h, w, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((1, 2 * h, 2 * w, 2))
    g = r.standard_normal((1, h, w, 2))
    lhs = np.vdot(sflap_reduce(x), g)
    rhs = np.vdot(x, sflap_reduce_adjoint(g, 2 * h, 2 * w))
    assert abs(lhs - rhs) < 1e-10


@given(h=st.integers(4, 20), w=st.integers(4, 20), seed=st.integers(0, 2**16))
def test_perfect_reconstruction(h, w, seed):
    x = np.random.default_rng(seed).standard_normal((2, h, w, 3)).astype(np.float32)
    s = sflap_split(x)
    assert s.high.shape == x.shape
    np.testing.assert_allclose(s.high + s.low_upsampled, x, atol=1e-6)


def test_constant_has_no_high_band():
    s = sflap_split(np.full((1, 16, 16, 2), 0.7))
    np.testing.assert_allclose(s.high, 0.0, atol=1e-14)


def test_checkerboard_energy_goes_to_high_band():
    x = (-1.0) ** np.add.outer(np.arange(16), np.arange(16))
    s = sflap_split(x[None, :, :, None])
    # loop oracle: the binomial taps sum to zero at the Nyquist frequency, so the
    # low band carries exactly no energy
    ratio = np.sum(s.low_upsampled**2) / np.sum(x**2)
    assert ratio <= 1e-24
    np.testing.assert_allclose(s.high[0, :, :, 0], x, atol=1e-12)


def test_box_split_reconstructs(rng):
    x = rng.standard_normal((1, 8, 8, 2))
    s = box_split(x)
    np.testing.assert_allclose(s.high + s.low_upsampled, x, atol=1e-14)
    np.testing.assert_allclose(s.low[0, 0, 0], x[0, :2, :2].mean(axis=(0, 1)))


@pytest.mark.parametrize("split", [sflap_split, box_split])
def test_split_gradients(split, rng):
    x = rng.standard_normal((1, 6, 8, 2))
    w_low = rng.standard_normal((1, 3, 4, 2))
    w_high = rng.standard_normal(x.shape)

    def f(n):
        s = split(n["x"])
        return ad.add(ad.sum(ad.mul(s.low, w_low)), ad.sum(ad.mul(s.high, w_high)))

    check(f, {"x": x})


def test_central_band_fraction_extremes():
    assert central_band_fraction(np.ones((16, 16))) == pytest.approx(1.0)
    cb = (-1.0) ** np.add.outer(np.arange(16), np.arange(16))
    assert central_band_fraction(cb) == pytest.approx(0.0)
