"""Inner loops for 2-D cross-correlation and pooling.

Every kernel has a numba implementation and a pure-numpy twin with the same
signature. The numba path is used when numba imports cleanly and the
environment variable ``BSSDISTILL_PURE_NUMPY`` is unset or ``0``; set it to
``1`` to force the numpy path (handy for debugging and for the benchmark).

Layouts are NCHW for activations and (F, C, kh, kw) for filters. All kernels
are stride-1 "valid" correlations; padding is applied by the caller.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:  # pragma: no cover - import guard
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    _HAVE_NUMBA = False


def numba_requested() -> bool:
    return os.environ.get("BSSDISTILL_PURE_NUMPY", "0") in ("", "0", "false", "False")


USE_NUMBA = _HAVE_NUMBA and numba_requested()


# --------------------------------------------------------------------------
# pure numpy
# --------------------------------------------------------------------------


def conv2d_forward_np(x, w):
    kh, kw = w.shape[2], w.shape[3]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # N, C, Ho, Wo, kh, kw
    return np.einsum("nchwij,fcij->nfhw", win, w, optimize=True)


def conv2d_backward_input_np(grad_out, w, in_h, in_w):
    kh, kw = w.shape[2], w.shape[3]
    n, c = grad_out.shape[0], w.shape[1]
    gx = np.zeros((n, c, in_h, in_w))
    ho, wo = grad_out.shape[2], grad_out.shape[3]
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i : i + ho, j : j + wo] += np.einsum("nfhw,fc->nchw", grad_out, w[:, :, i, j])
    return gx


def conv2d_backward_weight_np(x, grad_out, kh, kw):
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return np.einsum("nchwij,nfhw->fcij", win, grad_out, optimize=True)


def maxpool2d_forward_np(x, k):
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    blocks = x[:, :, : ho * k, : wo * k].reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, ho, wo, k * k)
    # argmax returns the first maximum, matching the loop kernel
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx.astype(np.int64)


def maxpool2d_backward_np(grad_out, idx, k, in_h, in_w):
    n, c, ho, wo = grad_out.shape
    g = np.zeros((n, c, ho, wo, k * k))
    np.put_along_axis(g, idx[..., None], grad_out[..., None], axis=-1)
    g = g.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)
    gx = np.zeros((n, c, in_h, in_w))
    gx[:, :, : ho * k, : wo * k] = g
    return gx


# --------------------------------------------------------------------------
# numba
# --------------------------------------------------------------------------

if _HAVE_NUMBA:

    @numba.njit(cache=True)
    def conv2d_forward_nb(x, w):
        n, c, h, wd = x.shape
        f, _, kh, kw = w.shape
        ho, wo = h - kh + 1, wd - kw + 1
        out = np.zeros((n, f, ho, wo))
        for b in range(n):
            for o in range(f):
                for ch in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            wij = w[o, ch, i, j]
                            for r in range(ho):
                                for s in range(wo):
                                    out[b, o, r, s] += wij * x[b, ch, r + i, s + j]
        return out

    @numba.njit(cache=True)
    def conv2d_backward_input_nb(grad_out, w, in_h, in_w):
        n, f, ho, wo = grad_out.shape
        c, kh, kw = w.shape[1], w.shape[2], w.shape[3]
        gx = np.zeros((n, c, in_h, in_w))
        for b in range(n):
            for o in range(f):
                for ch in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            wij = w[o, ch, i, j]
                            for r in range(ho):
                                for s in range(wo):
                                    gx[b, ch, r + i, s + j] += wij * grad_out[b, o, r, s]
        return gx

    @numba.njit(cache=True)
    def conv2d_backward_weight_nb(x, grad_out, kh, kw):
        n, c = x.shape[0], x.shape[1]
        f, ho, wo = grad_out.shape[1], grad_out.shape[2], grad_out.shape[3]
        gw = np.zeros((f, c, kh, kw))
        for b in range(n):
            for o in range(f):
                for ch in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            acc = 0.0
                            for r in range(ho):
                                for s in range(wo):
                                    acc += grad_out[b, o, r, s] * x[b, ch, r + i, s + j]
                            gw[o, ch, i, j] += acc
        return gw

    @numba.njit(cache=True)
    def maxpool2d_forward_nb(x, k):
        n, c, h, w = x.shape
        ho, wo = h // k, w // k
        out = np.empty((n, c, ho, wo))
        idx = np.empty((n, c, ho, wo), dtype=np.int64)
        for b in range(n):
            for ch in range(c):
                for r in range(ho):
                    for s in range(wo):
                        best = x[b, ch, r * k, s * k]
                        arg = 0
                        for i in range(k):
                            for j in range(k):
                                v = x[b, ch, r * k + i, s * k + j]
                                if v > best:
                                    best = v
                                    arg = i * k + j
                        out[b, ch, r, s] = best
                        idx[b, ch, r, s] = arg
        return out, idx

    @numba.njit(cache=True)
    def maxpool2d_backward_nb(grad_out, idx, k, in_h, in_w):
        n, c, ho, wo = grad_out.shape
        gx = np.zeros((n, c, in_h, in_w))
        for b in range(n):
            for ch in range(c):
                for r in range(ho):
                    for s in range(wo):
                        a = idx[b, ch, r, s]
                        gx[b, ch, r * k + a // k, s * k + a % k] += grad_out[b, ch, r, s]
        return gx


def _pick(name):
    if USE_NUMBA:
        return globals()[name + "_nb"]
    return globals()[name + "_np"]


def conv2d_forward(x, w):
    return _pick("conv2d_forward")(np.ascontiguousarray(x), np.ascontiguousarray(w))


def conv2d_backward_input(grad_out, w, in_h, in_w):
    return _pick("conv2d_backward_input")(np.ascontiguousarray(grad_out), np.ascontiguousarray(w), in_h, in_w)


def conv2d_backward_weight(x, grad_out, kh, kw):
    return _pick("conv2d_backward_weight")(np.ascontiguousarray(x), np.ascontiguousarray(grad_out), kh, kw)


def maxpool2d_forward(x, k):
    return _pick("maxpool2d_forward")(np.ascontiguousarray(x), k)


def maxpool2d_backward(grad_out, idx, k, in_h, in_w):
    return _pick("maxpool2d_backward")(np.ascontiguousarray(grad_out), np.ascontiguousarray(idx), k, in_h, in_w)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
