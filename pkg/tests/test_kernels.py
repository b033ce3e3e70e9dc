import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfquant import _kernels as K

pytestmark = pytest.mark.skipif(not K.HAVE_NUMBA, reason="numba path unavailable")


def _pair(name):
    return K.NUMPY_KERNELS[name], K.NUMBA_KERNELS[name]


def _close(a, b):
    if isinstance(a, tuple):
        return all(_close(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("shape", [(1, 1), (7, 5), (64, 33)])
def test_elementwise_and_rowwise_kernels_agree(shape):
    rng = np.random.default_rng(0)
    x = rng.standard_normal(shape) * 3
    dy = rng.standard_normal(shape)
    gamma, beta = rng.standard_normal(shape[1]), rng.standard_normal(shape[1])
    f_np, f_nb = _pair("silu_forward")
    assert _close(f_np(x), f_nb(x))
    _, s = f_np(x)
    b_np, b_nb = _pair("silu_backward")
    assert _close(b_np(dy, x, s), b_nb(dy, x, s))
    ln_np, ln_nb = _pair("layernorm_forward")
    fwd = ln_np(x, gamma, beta, 1e-5)
    assert _close(fwd, ln_nb(x, gamma, beta, 1e-5))
    lb_np, lb_nb = _pair("layernorm_backward")
    assert _close(lb_np(dy, fwd[1], fwd[2], gamma), lb_nb(dy, fwd[1], fwd[2], gamma))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(-1e3, 1e3)), min_size=1, max_size=40))
def test_pinball_kernels_agree(rows):
    tau = np.array([r[0] for r in rows])
    resid = np.array([r[1] for r in rows])
    p_np, p_nb = _pair("pinball")
    assert _close(p_np(tau, resid), p_nb(tau, resid))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 0.3), st.integers(1, 3))
def test_window_stats_kernels_agree(seed, window, dz):
    rng = np.random.default_rng(seed)
    xs, zs, ys = rng.random(300), rng.random((300, dz)), rng.standard_normal(300)
    z0 = rng.random(dz)
    w_np, w_nb = _pair("window_stats")
    assert w_np(xs, zs, ys, 0.5, z0, 0.1, window) == tuple(w_nb(xs, zs, ys, 0.5, z0, 0.1, window))


def test_pinball_wrapper_broadcasts_scalar_tau():
    loss, slope = K.pinball(0.3, np.array([[1.0, -1.0]]))
    assert np.allclose(loss, [0.3, 0.7]) and np.allclose(slope, [0.3, -0.7])
