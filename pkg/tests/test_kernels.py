"""The numba and numpy kernel backends must compute the same quantities."""

import numpy as np
import pytest

from eegshield import kernels


@pytest.fixture(scope="module")
def impls():
    tables = {"numpy": kernels.get_impl("numpy")}
    if "numba" in kernels.available_backends():
        tables["numba"] = kernels.get_impl("numba")
    return tables


CASES = [
    (1, 1, 8, 1, 3, 1),
    (2, 3, 17, 4, 5, 1),
    (3, 2, 16, 2, 4, 2),
    (4, 8, 128, 8, 13, 1),
]


@pytest.mark.parametrize("b,c,t,f,k,stride", CASES)
def test_conv_backends_agree(impls, b, c, t, f, k, stride):
    if "numba" not in impls:
        pytest.skip("numba unavailable")
    rng = np.random.default_rng(b * 100 + k)
    x = rng.standard_normal((b, c, t))
    w = rng.standard_normal((f, k))
    ref = impls["numpy"]["conv_fwd"](x, w, stride)
    got = impls["numba"]["conv_fwd"](x, w, stride)
    assert ref.shape == got.shape
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)

    dout = rng.standard_normal(ref.shape)
    np.testing.assert_allclose(
        impls["numba"]["conv_bwd_x"](dout, w, stride, t),
        impls["numpy"]["conv_bwd_x"](dout, w, stride, t),
        rtol=1e-12,
        atol=1e-12,
    )
    np.testing.assert_allclose(
        impls["numba"]["conv_bwd_w"](dout, x, stride, k),
        impls["numpy"]["conv_bwd_w"](dout, x, stride, k),
        rtol=1e-12,
        atol=1e-12,
    )


@pytest.mark.parametrize("window,stride", [(1, 1), (4, 4), (8, 4), (5, 2)])
def test_pool_backends_agree(impls, window, stride):
    if "numba" not in impls:
        pytest.skip("numba unavailable")
    rng = np.random.default_rng(window * 10 + stride)
    x = rng.standard_normal((3, 4, 32))
    ref = impls["numpy"]["pool_fwd"](x, window, stride)
    got = impls["numba"]["pool_fwd"](x, window, stride)
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)

    dout = rng.standard_normal(ref.shape)
    np.testing.assert_allclose(
        impls["numba"]["pool_bwd"](dout, window, stride, 32),
        impls["numpy"]["pool_bwd"](dout, window, stride, 32),
        rtol=1e-12,
        atol=1e-12,
    )


def test_active_backend_is_valid():
    assert kernels.active_backend() in kernels.available_backends()


def test_set_backend_roundtrip():
    before = kernels.active_backend()
    try:
        assert kernels.set_backend("numpy") == "numpy"
        x = np.arange(8.0).reshape(1, 1, 8)
        out = kernels.mean_pool_fwd(x, 4, 4)
        assert np.allclose(out, [[[1.5, 5.5]]])
    finally:
        kernels.set_backend(before)


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        kernels.set_backend("cuda")
