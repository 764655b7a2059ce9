"""Brute-force reference implementations used as test oracles.

Every function here is a direct nested-loop transcription of the textbook
definition, written independently of the vectorized kernels under test.
"""
from __future__ import annotations

import math

import numpy as np


def conv2d_loops(x, w, b=None, stride=(1, 1), pad=(0, 0), dil=(1, 1)):
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    assert ci == c
    sh, sw = stride
    ph, pw = pad
    dh, dw = dil
    oh = (h + 2 * ph - dh * (kh - 1) - 1) // sh + 1
    ow = (wd + 2 * pw - dw * (kw - 1) - 1) // sw + 1
    out = np.zeros((n, o, oh, ow))
    for b_ in range(n):
        for oc in range(o):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0 if b is None else float(b[oc])
                    for ic in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                y = i * sh - ph + u * dh
                                xx = j * sw - pw + v * dw
                                if 0 <= y < h and 0 <= xx < wd:
                                    acc += float(x[b_, ic, y, xx]) * float(w[oc, ic, u, v])
                    out[b_, oc, i, j] = acc
    return out


def pool_loops(x, kind, window, stride, pad=(0, 0)):
    n, c, h, w = x.shape
    kh, kw = window
    sh, sw = stride
    ph, pw = pad
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    out = np.zeros((n, c, oh, ow))
    for b in range(n):
        for ch in range(c):
            for i in range(oh):
                for j in range(ow):
                    vals = []
                    for u in range(kh):
                        for v in range(kw):
                            y, xx = i * sh - ph + u, j * sw - pw + v
                            inside = 0 <= y < h and 0 <= xx < w
                            if kind == "max":
                                if inside:
                                    vals.append(float(x[b, ch, y, xx]))
                            else:
                                vals.append(float(x[b, ch, y, xx]) if inside else 0.0)
                    out[b, ch, i, j] = max(vals) if kind == "max" else sum(vals) / (kh * kw)
    return out


def matmul_loops(a, b, bias=None):
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0 if bias is None else float(bias[j])
            for t in range(k):
                acc += float(a[i, t]) * float(b[t, j])
            out[i, j] = acc
    return out


def bilinear_point(img, sy, sx):
    """Bilinear sample of a 2-D array at a (clamped) real position."""
    h, w = img.shape
    sy = min(max(sy, 0.0), h - 1)
    sx = min(max(sx, 0.0), w - 1)
    y0, x0 = int(math.floor(sy)), int(math.floor(sx))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    fy, fx = sy - y0, sx - x0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def resize_loops(x, oh, ow):
    """Center-aligned bilinear resize, one output pixel at a time."""
    n, c, h, w = x.shape
    out = np.zeros((n, c, oh, ow))
    for b in range(n):
        for ch in range(c):
            for i in range(oh):
                for j in range(ow):
                    sy = (i + 0.5) * h / oh - 0.5 if oh != h else i
                    sx = (j + 0.5) * w / ow - 0.5 if ow != w else j
                    out[b, ch, i, j] = bilinear_point(x[b, ch], sy, sx)
    return out


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))
