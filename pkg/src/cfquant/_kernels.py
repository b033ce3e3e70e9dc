"""Hot elementwise/row-wise kernels with a numba path and a pure-numpy path.

The numba versions are used when numba imports cleanly and the environment
variable ``CFQUANT_DISABLE_NUMBA`` is unset (or ``0``). Both paths compute the
same quantities; results agree to rounding, and each path is deterministic on
its own (all reductions are sequential).

Matrix products stay in numpy in both paths, BLAS is already the fast route.
"""
import os

import numpy as np

_DISABLED = os.environ.get("CFQUANT_DISABLE_NUMBA", "0").lower() not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError("disabled by CFQUANT_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


# --------------------------------------------------------------------------
# pure numpy
# --------------------------------------------------------------------------

def silu_forward_np(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s, s


def silu_backward_np(dy, x, s):
    return dy * (s * (1.0 + x * (1.0 - s)))


def layernorm_forward_np(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layernorm_backward_np(dy, xhat, rstd, gamma):
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * rstd[:, None]
    return dx, dgamma, dbeta


def pinball_np(tau, resid):
    """Elementwise pin-ball loss and its derivative w.r.t. the residual."""
    pos = resid >= 0.0
    slope = np.where(pos, tau, tau - 1.0)
    return slope * resid, slope


def window_stats_np(xs, zs, ys, x0, z0, y0, window):
    mask = np.abs(xs - x0) <= window
    for k in range(zs.shape[1]):
        mask &= np.abs(zs[:, k] - z0[k]) <= window
    n = int(mask.sum())
    return n, int((ys[mask] <= y0).sum())


# --------------------------------------------------------------------------
# numba
# --------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def silu_forward_nb(x):
        n, d = x.shape
        y = np.empty_like(x)
        s = np.empty_like(x)
        for i in range(n):
            for j in range(d):
                v = x[i, j]
                sg = 1.0 / (1.0 + np.exp(-v))
                s[i, j] = sg
                y[i, j] = v * sg
        return y, s

    @njit(cache=True)
    def silu_backward_nb(dy, x, s):
        n, d = x.shape
        dx = np.empty_like(x)
        for i in range(n):
            for j in range(d):
                sg = s[i, j]
                dx[i, j] = dy[i, j] * (sg * (1.0 + x[i, j] * (1.0 - sg)))
        return dx

    @njit(cache=True)
    def layernorm_forward_nb(x, gamma, beta, eps):
        n, d = x.shape
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(n)
        for i in range(n):
            mu = 0.0
            for j in range(d):
                mu += x[i, j]
            mu /= d
            var = 0.0
            for j in range(d):
                c = x[i, j] - mu
                var += c * c
            var /= d
            r = 1.0 / np.sqrt(var + eps)
            rstd[i] = r
            for j in range(d):
                h = (x[i, j] - mu) * r
                xhat[i, j] = h
                y[i, j] = h * gamma[j] + beta[j]
        return y, xhat, rstd

    @njit(cache=True)
    def layernorm_backward_nb(dy, xhat, rstd, gamma):
        n, d = dy.shape
        dx = np.empty_like(dy)
        dgamma = np.zeros(d)
        dbeta = np.zeros(d)
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                g = dy[i, j] * gamma[j]
                m1 += g
                m2 += g * xhat[i, j]
                dgamma[j] += dy[i, j] * xhat[i, j]
                dbeta[j] += dy[i, j]
            m1 /= d
            m2 /= d
            r = rstd[i]
            for j in range(d):
                dx[i, j] = (dy[i, j] * gamma[j] - m1 - xhat[i, j] * m2) * r
        return dx, dgamma, dbeta

    @njit(cache=True)
    def pinball_nb(tau, resid):
        n = resid.shape[0]
        loss = np.empty(n)
        slope = np.empty(n)
        for i in range(n):
            r = resid[i]
            t = tau[i] if r >= 0.0 else tau[i] - 1.0
            slope[i] = t
            loss[i] = t * r
        return loss, slope

    @njit(cache=True)
    def window_stats_nb(xs, zs, ys, x0, z0, y0, window):
        n_match = 0
        n_le = 0
        dz = zs.shape[1]
        for i in range(xs.shape[0]):
            if abs(xs[i] - x0) > window:
                continue
            ok = True
            for k in range(dz):
                if abs(zs[i, k] - z0[k]) > window:
                    ok = False
                    break
            if not ok:
                continue
            n_match += 1
            if ys[i] <= y0:
                n_le += 1
        return n_match, n_le


NUMPY_KERNELS = {
    "silu_forward": silu_forward_np,
    "silu_backward": silu_backward_np,
    "layernorm_forward": layernorm_forward_np,
    "layernorm_backward": layernorm_backward_np,
    "pinball": pinball_np,
    "window_stats": window_stats_np,
}

if HAVE_NUMBA:
    NUMBA_KERNELS = {
        "silu_forward": silu_forward_nb,
        "silu_backward": silu_backward_nb,
        "layernorm_forward": layernorm_forward_nb,
        "layernorm_backward": layernorm_backward_nb,
        "pinball": pinball_nb,
        "window_stats": window_stats_nb,
    }
    BACKEND = "numba"
    _active = NUMBA_KERNELS
else:
    NUMBA_KERNELS = {}
    BACKEND = "numpy"
    _active = NUMPY_KERNELS

silu_forward = _active["silu_forward"]
silu_backward = _active["silu_backward"]
layernorm_forward = _active["layernorm_forward"]
layernorm_backward = _active["layernorm_backward"]
_pinball = _active["pinball"]
_window_stats = _active["window_stats"]


def pinball(tau, resid):
    """Vectorised pin-ball loss: returns (loss per element, d loss / d resid)."""
    tau = np.ascontiguousarray(np.broadcast_to(np.asarray(tau, dtype=np.float64), np.shape(resid)))
    resid = np.ascontiguousarray(resid, dtype=np.float64)
    return _pinball(tau.ravel(), resid.ravel())


def window_stats(xs, zs, ys, x0, z0, y0, window):
    """Count rows inside the (x, z) box of half-width ``window`` and how many have y <= y0."""
    n, k = _window_stats(
        np.ascontiguousarray(xs, dtype=np.float64),
        np.ascontiguousarray(zs, dtype=np.float64),
        np.ascontiguousarray(ys, dtype=np.float64),
        float(x0),
        np.ascontiguousarray(np.atleast_1d(z0), dtype=np.float64),
        float(y0),
        float(window),
    )
    return int(n), int(k)
