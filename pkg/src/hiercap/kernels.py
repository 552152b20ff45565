"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and ``HIERCAP_NO_NUMBA`` is
unset (or "0"). Both paths produce identical results; the test suite checks
them against each other.
"""
from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("HIERCAP_NO_NUMBA", "0") not in ("", "0", "false", "False")

try:
    if _DISABLED:
        raise ImportError("disabled by HIERCAP_NO_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised via env flag in a subprocess test
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda f: f


def backend() -> str:
    return "numba" if HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------- im2col ----

def im2col_numpy(x, kh, kw, stride, pad):
    """Unfold (B, C, H, W) into (B, C*kh*kw, Ho*Wo) patch columns."""
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]  # B, C, Ho, Wo, kh, kw
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(b, c * kh * kw, ho * wo)


def col2im_numpy(cols, shape, kh, kw, stride, pad):
    """Adjoint of :func:`im2col_numpy`: scatter-add columns back to an image."""
    b, c, h, w = shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    cols = cols.reshape(b, c, kh, kw, ho, wo)
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return xp[:, :, pad:pad + h, pad:pad + w]


@njit(cache=True)
def _im2col_nb(x, kh, kw, stride, pad, ho, wo):
    b, c, h, w = x.shape
    out = np.zeros((b, c * kh * kw, ho * wo))
    for n in range(b):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    for oy in range(ho):
                        y = oy * stride + i - pad
                        if y < 0 or y >= h:
                            continue
                        for ox in range(wo):
                            xx = ox * stride + j - pad
                            if xx < 0 or xx >= w:
                                continue
                            out[n, row, oy * wo + ox] = x[n, ch, y, xx]
    return out


@njit(cache=True)
def _col2im_nb(cols, b, c, h, w, kh, kw, stride, pad, ho, wo):
    out = np.zeros((b, c, h, w))
    for n in range(b):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    for oy in range(ho):
                        y = oy * stride + i - pad
                        if y < 0 or y >= h:
                            continue
                        for ox in range(wo):
                            xx = ox * stride + j - pad
                            if xx < 0 or xx >= w:
                                continue
                            out[n, ch, y, xx] += cols[n, row, oy * wo + ox]
    return out


def im2col(x, kh, kw, stride, pad):
    if not HAVE_NUMBA:
        return im2col_numpy(x, kh, kw, stride, pad)
    h, w = x.shape[2:]
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    return _im2col_nb(np.ascontiguousarray(x, dtype=np.float64), kh, kw, stride, pad, ho, wo)


def col2im(cols, shape, kh, kw, stride, pad):
    if not HAVE_NUMBA:
        return col2im_numpy(cols, shape, kh, kw, stride, pad)
    b, c, h, w = shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    return _col2im_nb(np.ascontiguousarray(cols, dtype=np.float64), b, c, h, w, kh, kw, stride, pad, ho, wo)


# ------------------------------------------------------- bilinear resize ----

def _bilinear_coords(n_in, n_out):
    # align-corners sampling: endpoints map onto endpoints
    if n_out == 1:
        pos = np.zeros(1)
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.minimum(np.floor(pos).astype(np.int64), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def bilinear_resize_numpy(img, out_h, out_w):
    """Resize a (C, H, W) image with align-corners bilinear interpolation."""
    _, h, w = img.shape
    y0, y1, fy = _bilinear_coords(h, out_h)
    x0, x1, fx = _bilinear_coords(w, out_w)
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


@njit(cache=True)
def _bilinear_nb(img, y0, y1, fy, x0, x1, fx):
    c = img.shape[0]
    oh = y0.shape[0]
    ow = x0.shape[0]
    out = np.empty((c, oh, ow))
    for ch in range(c):
        for i in range(oh):
            for j in range(ow):
                top = img[ch, y0[i], x0[j]] * (1 - fx[j]) + img[ch, y0[i], x1[j]] * fx[j]
                bot = img[ch, y1[i], x0[j]] * (1 - fx[j]) + img[ch, y1[i], x1[j]] * fx[j]
                out[ch, i, j] = top * (1 - fy[i]) + bot * fy[i]
    return out


def bilinear_resize(img, out_h, out_w):
    if not HAVE_NUMBA:
        return bilinear_resize_numpy(img, out_h, out_w)
    _, h, w = img.shape
    y0, y1, fy = _bilinear_coords(h, out_h)
    x0, x1, fx = _bilinear_coords(w, out_w)
    return _bilinear_nb(np.ascontiguousarray(img, dtype=np.float64), y0, y1, fy, x0, x1, fx)


# ------------------------------------------------------------------- LCS ----

def lcs_length_numpy(a, b):
    """Longest common subsequence length of two int sequences (row-vectorised DP)."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if a.size == 0 or b.size == 0:
        return 0
    prev = np.zeros(b.size + 1, dtype=np.int64)
    for x in a:
        match = np.where(b == x, prev[:-1] + 1, 0)
        cur = np.zeros_like(prev)
        # cur[j+1] = max(match[j], prev[j+1], cur[j]); the running max handles cur[j]
        cur[1:] = np.maximum(match, prev[1:])
        cur = np.maximum.accumulate(cur)
        prev = cur
    return int(prev[-1])


@njit(cache=True)
def _lcs_nb(a, b):
    n = a.shape[0]
    m = b.shape[0]
    prev = np.zeros(m + 1, dtype=np.int64)
    cur = np.zeros(m + 1, dtype=np.int64)
    for i in range(n):
        cur[0] = 0
        for j in range(m):
            if a[i] == b[j]:
                cur[j + 1] = prev[j] + 1
            elif prev[j + 1] >= cur[j]:
                cur[j + 1] = prev[j + 1]
            else:
                cur[j + 1] = cur[j]
        prev, cur = cur, prev
    return prev[m]


def lcs_length(a, b):
    if not HAVE_NUMBA:
        return lcs_length_numpy(a, b)
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if a.size == 0 or b.size == 0:
        return 0
    return int(_lcs_nb(a, b))
