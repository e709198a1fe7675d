"""Hot inner loops of the convolution/pooling layers.

Every kernel exists twice: a pure-numpy implementation and a numba ``@njit``
implementation with identical accumulation order, so both paths give
bit-identical float results.  The numba path is used when numba imports
cleanly and ``TEMPERED_DP_BACKEND`` is not set to ``numpy``.
"""

import os

import numpy as np

_REQUESTED = os.environ.get("TEMPERED_DP_BACKEND", "numba").strip().lower()
if _REQUESTED not in ("numba", "numpy"):
    raise ValueError(
        f"TEMPERED_DP_BACKEND must be 'numba' or 'numpy', got {_REQUESTED!r}"
    )

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is installed in CI
    numba = None
    HAVE_NUMBA = False

BACKEND = "numba" if (HAVE_NUMBA and _REQUESTED == "numba") else "numpy"


# ---------------------------------------------------------------------------
# numpy implementations


def im2col_numpy(xp, k, stride, ho, wo):
    """(B, Hp, Wp, C) padded input -> (B, ho*wo, k*k*C) patch matrix."""
    b, _, _, c = xp.shape
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    # win: (B, Hp-k+1, Wp-k+1, C, k, k)
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    cols = win.transpose(0, 1, 2, 4, 5, 3)
    return np.ascontiguousarray(cols).reshape(b, ho * wo, k * k * c)


def col2im_numpy(dcols, hp, wp, c, k, stride, ho, wo):
    """Adjoint of :func:`im2col_numpy`: scatter-add patches back to (B, hp, wp, C)."""
    b = dcols.shape[0]
    d = dcols.reshape(b, ho, wo, k, k, c)
    out = np.zeros((b, hp, wp, c), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += d[
                :, :, :, i, j, :
            ]
    return out


def maxpool_numpy(xp, k, stride, ho, wo):
    """Max over k x k windows; returns (out, argmax) with argmax in 0..k*k-1."""
    b, _, _, c = xp.shape
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    win = win.reshape(b, ho, wo, c, k * k)
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg.astype(np.int64)


def maxpool_backward_numpy(dout, arg, hp, wp, k, stride):
    b, ho, wo, c = dout.shape
    dxp = np.zeros((b, hp, wp, c), dtype=dout.dtype)
    di, dj = np.divmod(arg, k)
    bb, oh, ow, cc = np.indices((b, ho, wo, c), sparse=False)
    rows = oh * stride + di
    cols = ow * stride + dj
    # windows may overlap when stride < k; add.at keeps this correct
    np.add.at(dxp, (bb, rows, cols, cc), dout)
    return dxp


def avgpool_numpy(xp, count, k, stride, ho, wo):
    """Sum over k x k windows divided by the per-window count of real pixels."""
    b, _, _, c = xp.shape
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    acc = np.zeros((b, ho, wo, c), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            acc += win[:, :, :, :, i, j]
    return acc / count[None, :, :, None]


def avgpool_backward_numpy(dout, count, hp, wp, k, stride):
    b, ho, wo, c = dout.shape
    g = dout / count[None, :, :, None]
    dxp = np.zeros((b, hp, wp, c), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += g
    return dxp


# ---------------------------------------------------------------------------
# numba implementations (same loop nest order as the numpy versions)

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def im2col_numba(xp, k, stride, ho, wo):
        b, _, _, c = xp.shape
        out = np.empty((b, ho * wo, k * k * c), dtype=xp.dtype)
        for n in range(b):
            for oh in range(ho):
                for ow in range(wo):
                    p = oh * wo + ow
                    q = 0
                    for i in range(k):
                        for j in range(k):
                            for ch in range(c):
                                out[n, p, q] = xp[n, oh * stride + i, ow * stride + j, ch]
                                q += 1
        return out

    @numba.njit(cache=True)
    def col2im_numba(dcols, hp, wp, c, k, stride, ho, wo):
        b = dcols.shape[0]
        out = np.zeros((b, hp, wp, c), dtype=dcols.dtype)
        for n in range(b):
            for i in range(k):
                for j in range(k):
                    base = (i * k + j) * c
                    for oh in range(ho):
                        for ow in range(wo):
                            p = oh * wo + ow
                            y = oh * stride + i
                            x = ow * stride + j
                            for ch in range(c):
                                out[n, y, x, ch] += dcols[n, p, base + ch]
        return out

    @numba.njit(cache=True)
    def maxpool_numba(xp, k, stride, ho, wo):
        b, _, _, c = xp.shape
        out = np.empty((b, ho, wo, c), dtype=xp.dtype)
        arg = np.empty((b, ho, wo, c), dtype=np.int64)
        for n in range(b):
            for oh in range(ho):
                for ow in range(wo):
                    for ch in range(c):
                        best = xp[n, oh * stride, ow * stride, ch]
                        bi = 0
                        for i in range(k):
                            for j in range(k):
                                v = xp[n, oh * stride + i, ow * stride + j, ch]
                                # strict '>' keeps the first maximum, like np.argmax
                                if v > best:
                                    best = v
                                    bi = i * k + j
                        out[n, oh, ow, ch] = best
                        arg[n, oh, ow, ch] = bi
        return out, arg

    @numba.njit(cache=True)
    def maxpool_backward_numba(dout, arg, hp, wp, k, stride):
        b, ho, wo, c = dout.shape
        dxp = np.zeros((b, hp, wp, c), dtype=dout.dtype)
        for n in range(b):
            for oh in range(ho):
                for ow in range(wo):
                    for ch in range(c):
                        a = arg[n, oh, ow, ch]
                        dxp[n, oh * stride + a // k, ow * stride + a % k, ch] += dout[
                            n, oh, ow, ch
                        ]
        return dxp

    @numba.njit(cache=True)
    def avgpool_numba(xp, count, k, stride, ho, wo):
        b, _, _, c = xp.shape
        out = np.zeros((b, ho, wo, c), dtype=xp.dtype)
        for n in range(b):
            for i in range(k):
                for j in range(k):
                    for oh in range(ho):
                        for ow in range(wo):
                            for ch in range(c):
                                out[n, oh, ow, ch] += xp[n, oh * stride + i, ow * stride + j, ch]
        for n in range(b):
            for oh in range(ho):
                for ow in range(wo):
                    for ch in range(c):
                        out[n, oh, ow, ch] = out[n, oh, ow, ch] / count[oh, ow]
        return out

    @numba.njit(cache=True)
    def avgpool_backward_numba(dout, count, hp, wp, k, stride):
        b, ho, wo, c = dout.shape
        dxp = np.zeros((b, hp, wp, c), dtype=dout.dtype)
        for n in range(b):
            for i in range(k):
                for j in range(k):
                    for oh in range(ho):
                        for ow in range(wo):
                            for ch in range(c):
                                dxp[n, oh * stride + i, ow * stride + j, ch] += (
                                    dout[n, oh, ow, ch] / count[oh, ow]
                                )
        return dxp


_NUMPY = {
    "im2col": im2col_numpy,
    "col2im": col2im_numpy,
    "maxpool": maxpool_numpy,
    "maxpool_backward": maxpool_backward_numpy,
    "avgpool": avgpool_numpy,
    "avgpool_backward": avgpool_backward_numpy,
}

if HAVE_NUMBA:
    _NUMBA = {
        "im2col": im2col_numba,
        "col2im": col2im_numba,
        "maxpool": maxpool_numba,
        "maxpool_backward": maxpool_backward_numba,
        "avgpool": avgpool_numba,
        "avgpool_backward": avgpool_backward_numba,
    }
else:  # pragma: no cover
    _NUMBA = {}


def kernels(backend=None):
    """Return the kernel table for ``backend`` (defaults to the active one)."""
    backend = backend or BACKEND
    if backend == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba backend requested but numba is not importable")
        return _NUMBA
    return _NUMPY


_active = kernels()
im2col = _active["im2col"]
col2im = _active["col2im"]
maxpool = _active["maxpool"]
maxpool_backward = _active["maxpool_backward"]
avgpool = _active["avgpool"]
avgpool_backward = _active["avgpool_backward"]
