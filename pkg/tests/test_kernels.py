import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsdm import _kernels_py as ref
from tsdm import kernels

BACKENDS = [kernels.load_backend(n) for n in kernels.available_backends()]

geometry = st.tuples(
    st.integers(1, 3),  # batch
    st.integers(1, 5),  # channels
    st.integers(1, 19),  # length
    st.integers(1, 5),  # kernel
    st.integers(1, 3),  # stride
    st.integers(0, 4),  # pad
).filter(lambda g: g[2] + 2 * g[5] >= g[3])


def naive_conv(x, w, b, stride, pad):
    B, C, L = x.shape
    co, _, K = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    L_out = (L + 2 * pad - K) // stride + 1
    y = np.zeros((B, co, L_out))
    for o in range(L_out):
        patch = xp[:, :, o * stride : o * stride + K]
        y[:, :, o] = np.einsum("bck,dck->bd", patch, w) + b
    return y


@pytest.mark.parametrize("impl", BACKENDS, ids=lambda m: m.__name__)
@settings(max_examples=60, deadline=None)
@given(g=geometry, seed=st.integers(0, 2**16))
def test_conv_matches_naive_and_adjoint(impl, g, seed):
    B, C, L, K, s, p = g
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((B, C, L))
    w = rng.standard_normal((2, C, K))
    b = rng.standard_normal(2)
    y, cols = impl.conv1d_forward(x, w, b, s, p)
    np.testing.assert_allclose(y, naive_conv(x, w, b, s, p), atol=1e-12)
    c = rng.standard_normal(cols.shape)
    lhs = np.sum(impl.im2col(x, K, s, p) * c)
    rhs = np.sum(x * impl.col2im(c, x.shape, K, s, p))
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)
    np.testing.assert_array_equal(impl.im2col(x, K, s, p), ref.im2col(x, K, s, p))
    np.testing.assert_allclose(impl.col2im(c, x.shape, K, s, p), ref.col2im(c, x.shape, K, s, p), atol=1e-12)


@pytest.mark.parametrize("impl", BACKENDS, ids=lambda m: m.__name__)
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_group_norm_matches_reference(impl, dtype):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 8, 17)).astype(dtype) * 3 + 1
    g = rng.standard_normal(8).astype(dtype)
    b = rng.standard_normal(8).astype(dtype)
    y, xhat, rstd = impl.group_norm_forward(x, g, b, 4, 1e-5)
    y0, xhat0, rstd0 = ref.group_norm_forward(x, g, b, 4, 1e-5)
    tol = 1e-5 if dtype == np.float32 else 1e-12
    assert y.dtype == dtype
    np.testing.assert_allclose(y, y0, atol=tol)
    grouped = xhat.reshape(3, 4, -1)
    np.testing.assert_allclose(grouped.mean(-1), 0, atol=tol * 10)
    dy = rng.standard_normal(x.shape).astype(dtype)
    for a, a0 in zip(impl.group_norm_backward(dy, xhat, rstd, g, 4), ref.group_norm_backward(dy, xhat0, rstd0, g, 4)):
        np.testing.assert_allclose(a, a0, atol=tol * 10)


def test_use_backend_switches_and_restores():
    before = kernels.BACKEND
    try:
        kernels.use_backend("python")
        assert kernels.BACKEND == "python" and kernels.im2col is ref.im2col
    finally:
        kernels.use_backend(before)
    with pytest.raises(ValueError):
        kernels.load_backend("fortran")
