"""Compiled depthwise-convolution loops (numba), with numpy fallbacks."""

from __future__ import annotations

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None


def _dw_forward_py(xp, w, out):
    kh, kw = w.shape[1:]
    Ho, Wo = out.shape[2:]
    for i in range(kh):
        for j in range(kw):
            out += w[None, :, i, j, None, None] * xp[:, :, i : i + Ho, j : j + Wo]


def _dw_grad_input_py(g, w, gxp):
    kh, kw = w.shape[1:]
    Ho, Wo = g.shape[2:]
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + Ho, j : j + Wo] += w[None, :, i, j, None, None] * g


def _dw_grad_weight_py(g, xp, gw):
    kh, kw = gw.shape[1:]
    Ho, Wo = g.shape[2:]
    for i in range(kh):
        for j in range(kw):
            gw[:, i, j] = np.einsum("nchw,nchw->c", g, xp[:, :, i : i + Ho, j : j + Wo])


if numba is not None:

    @numba.njit(cache=True)
    def _dw_forward_nb(xp, w, out):
        N, C, Ho, Wo = out.shape
        kh, kw = w.shape[1], w.shape[2]
        for n in range(N):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        wv = w[c, i, j]
                        for h in range(Ho):
                            for q in range(Wo):
                                out[n, c, h, q] += wv * xp[n, c, h + i, q + j]

    @numba.njit(cache=True)
    def _dw_grad_input_nb(g, w, gxp):
        N, C, Ho, Wo = g.shape
        kh, kw = w.shape[1], w.shape[2]
        for n in range(N):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        wv = w[c, i, j]
                        for h in range(Ho):
                            for q in range(Wo):
                                gxp[n, c, h + i, q + j] += wv * g[n, c, h, q]

    @numba.njit(cache=True)
    def _dw_grad_weight_nb(g, xp, gw):
        N, C, Ho, Wo = g.shape
        kh, kw = gw.shape[1], gw.shape[2]
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    acc = 0.0
                    for n in range(N):
                        for h in range(Ho):
                            for q in range(Wo):
                                acc += g[n, c, h, q] * xp[n, c, h + i, q + j]
                    gw[c, i, j] = acc

    dw_forward = _dw_forward_nb
    dw_grad_input = _dw_grad_input_nb
    dw_grad_weight = _dw_grad_weight_nb
else:  # pragma: no cover
    dw_forward = _dw_forward_py
    dw_grad_input = _dw_grad_input_py
    dw_grad_weight = _dw_grad_weight_py
