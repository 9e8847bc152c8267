"""Hot numeric kernels: 2-D convolution, max pooling, and ROI max pooling.

Each kernel has two interchangeable implementations: a numba ``@njit`` loop
version and a pure-numpy one (im2col + BLAS for convolution). The active
backend defaults to numba and can be forced with the ``URIDET_BACKEND``
environment variable (``numba`` or ``numpy``) or :func:`set_backend` at
runtime. ``benchmarks/bench_kernels.py`` times both.

All arrays are float64, image tensors are ``(channels, height, width)``.
The two backends agree to float64 rounding, not bitwise (different
summation orders); each backend on its own is fully deterministic.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        return wrap(args[0]) if args and callable(args[0]) else wrap


_VALID_BACKENDS = ("numba", "numpy")
_backend = os.environ.get("URIDET_BACKEND", "numba" if _HAVE_NUMBA else "numpy")
if _backend not in _VALID_BACKENDS:
    raise ValueError(f"URIDET_BACKEND must be one of {_VALID_BACKENDS}, got {_backend!r}")
if _backend == "numba" and not _HAVE_NUMBA:
    _backend = "numpy"


def set_backend(name: str):
    global _backend
    if name not in _VALID_BACKENDS:
        raise ValueError(f"backend must be one of {_VALID_BACKENDS}, got {name!r}")
    if name == "numba" and not _HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    _backend = name


def get_backend() -> str:
    return _backend


def _pad_chw(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad)))


def conv_out_hw(h, w, kh, kw, stride, pad):
    return (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1


# ---------------------------------------------------------------------------
# numba backend


@njit(cache=True)
def _conv2d_fwd_nb(xp, w, b, stride, ho, wo):
    cout, cin, kh, kw = w.shape
    y = np.empty((cout, ho, wo))
    for co in range(cout):
        for i in range(ho):
            i0 = i * stride
            row = np.full(wo, b[co])
            for ci in range(cin):
                for u in range(kh):
                    for v in range(kw):
                        wcv = w[co, ci, u, v]
                        for j in range(wo):
                            row[j] += xp[ci, i0 + u, j * stride + v] * wcv
            y[co, i] = row
    return y


@njit(cache=True)
def _conv2d_bwd_nb(xp, w, dy, stride):
    cout, cin, kh, kw = w.shape
    _, ho, wo = dy.shape
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    db = np.zeros(cout)
    for co in range(cout):
        for i in range(ho):
            i0 = i * stride
            for j in range(wo):
                db[co] += dy[co, i, j]
            for ci in range(cin):
                for u in range(kh):
                    for v in range(kw):
                        acc = 0.0
                        wcv = w[co, ci, u, v]
                        for j in range(wo):
                            g = dy[co, i, j]
                            acc += g * xp[ci, i0 + u, j * stride + v]
                            dxp[ci, i0 + u, j * stride + v] += wcv * g
                        dw[co, ci, u, v] += acc
    return dxp, dw, db


@njit(cache=True)
def _maxpool2d_fwd_nb(x, size, stride, ho, wo):
    c, h, w = x.shape
    y = np.empty((c, ho, wo))
    arg = np.empty((c, ho, wo), dtype=np.int64)
    for ci in range(c):
        for i in range(ho):
            for j in range(wo):
                best = -np.inf
                besta = 0
                for u in range(size):
                    ii = i * stride + u
                    if ii >= h:
                        continue
                    for v in range(size):
                        jj = j * stride + v
                        if jj >= w:
                            continue
                        val = x[ci, ii, jj]
                        if val > best:
                            best = val
                            besta = ii * w + jj
                y[ci, i, j] = best
                arg[ci, i, j] = besta
    return y, arg


@njit(cache=True)
def _maxpool2d_bwd_nb(arg, dy, h, w):
    c, ho, wo = dy.shape
    dx = np.zeros((c, h, w))
    for ci in range(c):
        for i in range(ho):
            for j in range(wo):
                a = arg[ci, i, j]
                dx[ci, a // w, a % w] += dy[ci, i, j]
    return dx


@njit(cache=True)
def _roi_pool_fwd_nb(feat, x0, y0, x1, y1, pool_h, pool_w):
    c, h, w = feat.shape
    y = np.empty((c, pool_h, pool_w))
    arg = np.empty((c, pool_h, pool_w), dtype=np.int64)
    for pi in range(pool_h):
        ys = y0 + (y1 - y0) * pi / pool_h
        ye = y0 + (y1 - y0) * (pi + 1) / pool_h
        r0 = min(max(int(np.floor(ys)), 0), h - 1)
        r1 = min(max(int(np.ceil(ye)), r0 + 1), h)
        for pj in range(pool_w):
            xs = x0 + (x1 - x0) * pj / pool_w
            xe = x0 + (x1 - x0) * (pj + 1) / pool_w
            c0 = min(max(int(np.floor(xs)), 0), w - 1)
            c1 = min(max(int(np.ceil(xe)), c0 + 1), w)
            for ci in range(c):
                best = -np.inf
                besta = 0
                for ii in range(r0, r1):
                    for jj in range(c0, c1):
                        val = feat[ci, ii, jj]
                        if val > best:
                            best = val
                            besta = ii * w + jj
                y[ci, pi, pj] = best
                arg[ci, pi, pj] = besta
    return y, arg


# ---------------------------------------------------------------------------
# numpy backend


def _im2col(xp, kh, kw, stride, ho, wo):
    cin = xp.shape[0]
    cols = np.empty((cin * kh * kw, ho * wo))
    idx = 0
    for ci in range(cin):
        for u in range(kh):
            for v in range(kw):
                cols[idx] = xp[ci, u : u + ho * stride : stride, v : v + wo * stride : stride].ravel()
                idx += 1
    return cols


def _conv2d_fwd_np(xp, w, b, stride, ho, wo):
    cout, cin, kh, kw = w.shape
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    y = w.reshape(cout, -1) @ cols + b[:, None]
    return y.reshape(cout, ho, wo)


def _conv2d_bwd_np(xp, w, dy, stride):
    cout, cin, kh, kw = w.shape
    _, ho, wo = dy.shape
    dy_mat = dy.reshape(cout, -1)
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    dw = (dy_mat @ cols.T).reshape(w.shape)
    db = dy_mat.sum(axis=1)
    dcols = w.reshape(cout, -1).T @ dy_mat
    dxp = np.zeros_like(xp)
    idx = 0
    for ci in range(cin):
        for u in range(kh):
            for v in range(kw):
                dxp[ci, u : u + ho * stride : stride, v : v + wo * stride : stride] += dcols[
                    idx
                ].reshape(ho, wo)
                idx += 1
    return dxp, dw, db


def _maxpool2d_fwd_np(x, size, stride, ho, wo):
    c, h, w = x.shape
    y = np.full((c, ho, wo), -np.inf)
    arg = np.zeros((c, ho, wo), dtype=np.int64)
    for u in range(size):
        for v in range(size):
            sl = x[:, u : u + ho * stride : stride, v : v + wo * stride : stride]
            hv, wv = sl.shape[1], sl.shape[2]
            rows = (np.arange(hv) * stride + u)[None, :, None]
            colsi = (np.arange(wv) * stride + v)[None, None, :]
            flat = rows * w + colsi
            better = sl > y[:, :hv, :wv]
            y[:, :hv, :wv] = np.where(better, sl, y[:, :hv, :wv])
            arg[:, :hv, :wv] = np.where(better, flat, arg[:, :hv, :wv])
    return y, arg


def _maxpool2d_bwd_np(arg, dy, h, w):
    c = dy.shape[0]
    dx = np.zeros((c, h * w))
    for ci in range(c):
        np.add.at(dx[ci], arg[ci].ravel(), dy[ci].ravel())
    return dx.reshape(c, h, w)


def _roi_pool_fwd_np(feat, x0, y0, x1, y1, pool_h, pool_w):
    c, h, w = feat.shape
    y = np.empty((c, pool_h, pool_w))
    arg = np.empty((c, pool_h, pool_w), dtype=np.int64)
    for pi in range(pool_h):
        ys = y0 + (y1 - y0) * pi / pool_h
        ye = y0 + (y1 - y0) * (pi + 1) / pool_h
        r0 = min(max(int(np.floor(ys)), 0), h - 1)
        r1 = min(max(int(np.ceil(ye)), r0 + 1), h)
        for pj in range(pool_w):
            xs = x0 + (x1 - x0) * pj / pool_w
            xe = x0 + (x1 - x0) * (pj + 1) / pool_w
            c0 = min(max(int(np.floor(xs)), 0), w - 1)
            c1 = min(max(int(np.ceil(xe)), c0 + 1), w)
            block = feat[:, r0:r1, c0:c1].reshape(c, -1)
            flat_idx = np.argmax(block, axis=1)
            rows = r0 + flat_idx // (c1 - c0)
            cols = c0 + flat_idx % (c1 - c0)
            y[:, pi, pj] = block[np.arange(c), flat_idx]
            arg[:, pi, pj] = rows * w + cols
    return y, arg


# ---------------------------------------------------------------------------
# dispatch


def conv2d_forward(x, w, b, stride=1, pad=0):
    """``(C_in, H, W) -> (C_out, H', W')`` cross-correlation plus bias."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    ho, wo = conv_out_hw(x.shape[1], x.shape[2], w.shape[2], w.shape[3], stride, pad)
    xp = _pad_chw(x, pad)
    if _backend == "numba":
        return _conv2d_fwd_nb(xp, w, b, stride, ho, wo)
    return _conv2d_fwd_np(xp, w, b, stride, ho, wo)


def conv2d_backward(x, w, dy, stride=1, pad=0):
    """Gradients of a conv layer: returns ``(dx, dw, db)``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    dy = np.ascontiguousarray(dy, dtype=np.float64)
    xp = _pad_chw(x, pad)
    if _backend == "numba":
        dxp, dw, db = _conv2d_bwd_nb(xp, w, dy, stride)
    else:
        dxp, dw, db = _conv2d_bwd_np(xp, w, dy, stride)
    if pad:
        dxp = dxp[:, pad:-pad, pad:-pad]
    return np.ascontiguousarray(dxp), dw, db


def maxpool2d_forward(x, size=2, stride=2):
    """Max pooling; also returns flat argmax indices for the backward pass."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    c, h, w = x.shape
    ho = (h - size) // stride + 1
    wo = (w - size) // stride + 1
    if _backend == "numba":
        return _maxpool2d_fwd_nb(x, size, stride, ho, wo)
    return _maxpool2d_fwd_np(x, size, stride, ho, wo)


def maxpool2d_backward(arg, dy, h, w):
    arg = np.ascontiguousarray(arg)
    dy = np.ascontiguousarray(dy, dtype=np.float64)
    if _backend == "numba":
        return _maxpool2d_bwd_nb(arg, dy, h, w)
    return _maxpool2d_bwd_np(arg, dy, h, w)


def roi_max_pool_forward(feat, roi_in_feature_coords, pool_h, pool_w):
    """Max over a ``pool_h`` x ``pool_w`` bin grid covering the projected ROI.

    Bin cell ranges use floor(start)/ceil(end) with a 1-cell minimum, clipped
    to the feature extent. Returns pooled values and flat argmax indices.
    """
    feat = np.ascontiguousarray(feat, dtype=np.float64)
    x0, y0, x1, y1 = (float(v) for v in roi_in_feature_coords)
    c, h, w = feat.shape
    if x1 <= 0 or y1 <= 0 or x0 >= w or y0 >= h:
        raise ValueError("ROI lies fully outside the feature extent")
    if x1 <= x0 or y1 <= y0:
        raise ValueError("ROI has non-positive area in feature coordinates")
    if _backend == "numba":
        return _roi_pool_fwd_nb(feat, x0, y0, x1, y1, pool_h, pool_w)
    return _roi_pool_fwd_np(feat, x0, y0, x1, y1, pool_h, pool_w)


def roi_max_pool_backward(arg, dy, h, w):
    """Scatter pooled-cell gradients back onto the feature map."""
    arg = np.ascontiguousarray(arg)
    dy = np.ascontiguousarray(dy, dtype=np.float64)
    c = dy.shape[0]
    dx = np.zeros((c, h * w))
    for ci in range(c):
        np.add.at(dx[ci], arg[ci].ravel(), dy[ci].ravel())
    return dx.reshape(c, h, w)
