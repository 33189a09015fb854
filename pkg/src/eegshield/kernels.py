"""Hot numeric kernels: temporal convolution and temporal mean pooling.

Two interchangeable backends compute identical quantities:

* ``numba`` -- explicit loops compiled with ``@njit`` (default when numba
  is importable).  Kernels are single-threaded so results are bit-stable.
* ``numpy`` -- pure-numpy strided slicing, used as a fallback and for
  cross-checking the compiled code.

Select with the environment variable ``EEGSHIELD_BACKEND=numpy|numba``
(read once at import) or programmatically via :func:`set_backend`.
``benchmarks/bench_kernels.py`` compares the two.

Shapes follow the conventions of the model code: signals are
``(batch, channels, time)``, temporal kernels are ``(filters, width)``;
the convolution output is ``(batch, channels * filters, out_time)`` laid
out channel-major (filter index varies fastest).  All kernels assume
validated inputs; argument checking lives in :mod:`eegshield.autodiff`.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = [
    "active_backend",
    "available_backends",
    "set_backend",
    "conv_temporal_fwd",
    "conv_temporal_bwd_x",
    "conv_temporal_bwd_w",
    "mean_pool_fwd",
    "mean_pool_bwd",
]


# ---------------------------------------------------------------------------
# pure-numpy backend: loop over kernel taps, vectorized over (batch, time)
# ---------------------------------------------------------------------------

def _np_conv_fwd(x, w, stride):
    b, c, t = x.shape
    f, k = w.shape
    t1 = (t - k) // stride + 1
    out = np.zeros((b, c, f, t1), dtype=x.dtype)
    for p in range(k):
        xs = x[:, :, p : p + (t1 - 1) * stride + 1 : stride]
        out += xs[:, :, None, :] * w[None, None, :, p, None]
    return out.reshape(b, c * f, t1)


def _np_conv_bwd_x(dout, w, stride, t):
    f, k = w.shape
    b = dout.shape[0]
    t1 = dout.shape[2]
    c = dout.shape[1] // f
    d4 = dout.reshape(b, c, f, t1)
    dx = np.zeros((b, c, t), dtype=dout.dtype)
    for p in range(k):
        dx[:, :, p : p + (t1 - 1) * stride + 1 : stride] += np.tensordot(
            d4, w[:, p], axes=([2], [0])
        )
    return dx


def _np_conv_bwd_w(dout, x, stride, k):
    b, c, t = x.shape
    t1 = dout.shape[2]
    f = dout.shape[1] // c
    d4 = dout.reshape(b, c, f, t1)
    dw = np.zeros((f, k), dtype=dout.dtype)
    for p in range(k):
        xs = x[:, :, p : p + (t1 - 1) * stride + 1 : stride]
        dw[:, p] = np.tensordot(d4, xs, axes=([0, 1, 3], [0, 1, 2]))
    return dw


def _np_pool_fwd(x, window, stride):
    b, c, t = x.shape
    t2 = (t - window) // stride + 1
    out = np.zeros((b, c, t2), dtype=x.dtype)
    for p in range(window):
        out += x[:, :, p : p + (t2 - 1) * stride + 1 : stride]
    out /= window
    return out


def _np_pool_bwd(dout, window, stride, t):
    b, c, t2 = dout.shape
    dx = np.zeros((b, c, t), dtype=dout.dtype)
    g = dout / window
    for p in range(window):
        dx[:, :, p : p + (t2 - 1) * stride + 1 : stride] += g
    return dx


_NUMPY_IMPL = {
    "conv_fwd": _np_conv_fwd,
    "conv_bwd_x": _np_conv_bwd_x,
    "conv_bwd_w": _np_conv_bwd_w,
    "pool_fwd": _np_pool_fwd,
    "pool_bwd": _np_pool_bwd,
}


# ---------------------------------------------------------------------------
# numba backend: same arithmetic as explicit single-threaded loops
# ---------------------------------------------------------------------------

def _build_numba_impl():
    from numba import njit

    # Innermost loops run over the output time axis with no reduction
    # dependency, so LLVM can vectorize them.  For stride 1 the slice
    # arithmetic degenerates to a unit-stride sweep.

    @njit(cache=True, nogil=True, fastmath=True)
    def nb_conv_fwd(x, w, stride):
        b, c, t = x.shape
        f, k = w.shape
        t1 = (t - k) // stride + 1
        out = np.zeros((b, c * f, t1), dtype=x.dtype)
        for i in range(b):
            for ci in range(c):
                for fi in range(f):
                    row = ci * f + fi
                    for p in range(k):
                        wv = w[fi, p]
                        if stride == 1:
                            for j in range(t1):
                                out[i, row, j] += x[i, ci, j + p] * wv
                        else:
                            for j in range(t1):
                                out[i, row, j] += x[i, ci, j * stride + p] * wv
        return out

    @njit(cache=True, nogil=True, fastmath=True)
    def nb_conv_bwd_x(dout, w, stride, t):
        f, k = w.shape
        b = dout.shape[0]
        t1 = dout.shape[2]
        c = dout.shape[1] // f
        dx = np.zeros((b, c, t), dtype=dout.dtype)
        for i in range(b):
            for ci in range(c):
                for fi in range(f):
                    row = ci * f + fi
                    for p in range(k):
                        wv = w[fi, p]
                        if stride == 1:
                            for j in range(t1):
                                dx[i, ci, j + p] += dout[i, row, j] * wv
                        else:
                            for j in range(t1):
                                dx[i, ci, j * stride + p] += dout[i, row, j] * wv
        return dx

    @njit(cache=True, nogil=True, fastmath=True)
    def nb_conv_bwd_w(dout, x, stride, k):
        b, c, t = x.shape
        t1 = dout.shape[2]
        f = dout.shape[1] // c
        dw = np.zeros((f, k), dtype=dout.dtype)
        for i in range(b):
            for ci in range(c):
                for fi in range(f):
                    row = ci * f + fi
                    for p in range(k):
                        acc = 0.0
                        if stride == 1:
                            for j in range(t1):
                                acc += dout[i, row, j] * x[i, ci, j + p]
                        else:
                            for j in range(t1):
                                acc += dout[i, row, j] * x[i, ci, j * stride + p]
                        dw[fi, p] += acc
        return dw

    @njit(cache=True, nogil=True, fastmath=True)
    def nb_pool_fwd(x, window, stride):
        b, c, t = x.shape
        t2 = (t - window) // stride + 1
        out = np.zeros((b, c, t2), dtype=x.dtype)
        inv = 1.0 / window
        for i in range(b):
            for ci in range(c):
                for p in range(window):
                    for j in range(t2):
                        out[i, ci, j] += x[i, ci, j * stride + p]
                for j in range(t2):
                    out[i, ci, j] *= inv
        return out

    @njit(cache=True, nogil=True, fastmath=True)
    def nb_pool_bwd(dout, window, stride, t):
        b, c, t2 = dout.shape
        dx = np.zeros((b, c, t), dtype=dout.dtype)
        inv = 1.0 / window
        for i in range(b):
            for ci in range(c):
                for p in range(window):
                    for j in range(t2):
                        dx[i, ci, j * stride + p] += dout[i, ci, j] * inv
        return dx

    return {
        "conv_fwd": nb_conv_fwd,
        "conv_bwd_x": nb_conv_bwd_x,
        "conv_bwd_w": nb_conv_bwd_w,
        "pool_fwd": nb_pool_fwd,
        "pool_bwd": nb_pool_bwd,
    }


_IMPLS = {"numpy": _NUMPY_IMPL}
_ACTIVE = "numpy"


def available_backends():
    """Backends that can currently be selected."""
    names = ["numpy"]
    try:
        import numba  # noqa: F401

        names.append("numba")
    except ImportError:
        pass
    return names


def set_backend(name):
    """Switch the active kernel backend ("numpy" or "numba")."""
    global _ACTIVE
    if name not in ("numpy", "numba"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and "numba" not in _IMPLS:
        _IMPLS["numba"] = _build_numba_impl()
    _ACTIVE = name
    return _ACTIVE


def active_backend():
    return _ACTIVE


def get_impl(name):
    """Implementation table for an explicit backend (used by benchmarks)."""
    if name == "numba" and "numba" not in _IMPLS:
        _IMPLS["numba"] = _build_numba_impl()
    return _IMPLS[name]


def conv_temporal_fwd(x, w, stride):
    return _IMPLS[_ACTIVE]["conv_fwd"](x, w, stride)


def conv_temporal_bwd_x(dout, w, stride, t):
    return _IMPLS[_ACTIVE]["conv_bwd_x"](dout, w, stride, t)


def conv_temporal_bwd_w(dout, x, stride, k):
    return _IMPLS[_ACTIVE]["conv_bwd_w"](dout, x, stride, k)


def mean_pool_fwd(x, window, stride):
    return _IMPLS[_ACTIVE]["pool_fwd"](x, window, stride)


def mean_pool_bwd(dout, window, stride, t):
    return _IMPLS[_ACTIVE]["pool_bwd"](dout, window, stride, t)


def _init_backend():
    forced = os.environ.get("EEGSHIELD_BACKEND", "").strip().lower()
    if forced == "numpy":
        return set_backend("numpy")
    if forced == "numba":
        return set_backend("numba")
    if forced:
        raise ValueError(
            f"EEGSHIELD_BACKEND={forced!r} not recognized (use 'numpy' or 'numba')"
        )
    try:
        return set_backend("numba")
    except ImportError:
        return set_backend("numpy")


_init_backend()
