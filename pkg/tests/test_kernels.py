import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uniclam import _kernels_py as P
from uniclam import kernels

C = pytest.importorskip("uniclam._kernels_c")


def test_backend_selected_at_import():
    assert kernels.BACKEND in ("cython", "python")


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 9), st.sampled_from([1, 3]), st.integers(1, 3),
       st.integers(0, 2), st.sampled_from([np.float32, np.float64]), st.integers(0, 2**31))
def test_im2col_col2im_match(B, Cn, H, k, stride, pad, dtype, seed):
    if H + 2 * pad < k:
        return
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(B, Cn, H, H + 1)).astype(dtype)
    cols = P.im2col(x, k, stride, pad)
    np.testing.assert_array_equal(C.im2col(x, k, stride, pad), cols)
    g = rng.normal(size=cols.shape).astype(dtype)
    tol = 1e-5 if dtype == np.float32 else 1e-12
    np.testing.assert_allclose(C.col2im(g, x.shape, k, stride, pad), P.col2im(g, x.shape, k, stride, pad),
                               atol=tol)


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 2e-5)])
def test_layernorm_match(dtype, tol, rng):
    x = rng.normal(size=(17, 12)).astype(dtype)
    g, b = rng.normal(size=12).astype(dtype), rng.normal(size=12).astype(dtype)
    outs_c, outs_p = C.layernorm_forward(x, g, b, 1e-5), P.layernorm_forward(x, g, b, 1e-5)
    for a, e in zip(outs_c, outs_p):
        np.testing.assert_allclose(a, e, atol=tol)
    dy = rng.normal(size=x.shape).astype(dtype)
    for a, e in zip(C.layernorm_backward(dy, outs_p[1], outs_p[2], g), P.layernorm_backward(dy, outs_p[1], outs_p[2], g)):
        np.testing.assert_allclose(a, e, atol=tol * 10)


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-13), (np.float32, 1e-6)])
@pytest.mark.parametrize("scale", [1.0, 0.125])
def test_softmax_match(dtype, tol, scale, rng):
    x = (rng.normal(size=(40, 9)) * 30).astype(dtype)
    x[3, :4] = -1e9  # masked keys
    y = P.softmax_forward(x.copy(), scale)
    np.testing.assert_allclose(C.softmax_forward(x.copy(), scale), y, atol=tol)
    g = rng.normal(size=x.shape).astype(dtype)
    np.testing.assert_allclose(C.softmax_backward(g, y, scale), P.softmax_backward(g, y, scale), atol=tol * 10)


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-14), (np.float32, 1e-6)])
def test_adam_match(dtype, tol, rng):
    n = 257
    base = [rng.normal(size=n).astype(dtype) for _ in range(2)] + [rng.uniform(0, 1, n).astype(dtype)] * 2
    pc, mc, vc = base[0].copy(), base[2].copy(), base[3].copy()
    pp, mp, vp = base[0].copy(), base[2].copy(), base[3].copy()
    args = (1e-2, 0.9, 0.999, 1e-8, 5e-4, 0.19, 0.002)
    C.adam_update(pc, base[1], mc, vc, *args)
    P.adam_update(pp, base[1], mp, vp, *args)
    for a, e in ((pc, pp), (mc, mp), (vc, vp)):
        np.testing.assert_allclose(a, e, rtol=tol, atol=tol)
