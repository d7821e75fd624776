"""Numba-jitted kernel implementations.

Every reduction is a scalar loop in ascending index order with fastmath off,
so results are bit-reproducible and independent of how callers schedule
concurrent evaluations.
"""

from __future__ import annotations

import numpy as np
from numba import njit

ACT_IDENTITY = 0
ACT_TANH = 1


@njit(cache=True)
def matvec(a, x):
    m, n = a.shape
    out = np.empty(m)
    for i in range(m):
        s = 0.0
        for j in range(n):
            s += a[i, j] * x[j]
        out[i] = s
    return out


@njit(cache=True)
def mat_t_vec(a, g):
    m, n = a.shape
    out = np.zeros(n)
    for i in range(m):
        gi = g[i]
        for j in range(n):
            out[j] += a[i, j] * gi
    return out


@njit(cache=True)
def dot(a, b):
    s = 0.0
    for i in range(a.shape[0]):
        s += a[i] * b[i]
    return s


@njit(cache=True)
def axpy(alpha, x, y):
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        out[i] = alpha * x[i] + y[i]
    return out


@njit(cache=True)
def mlp_forward(widths, acts, params, x):
    n_layers = widths.shape[0] - 1
    a = x.copy()
    off = 0
    for layer in range(n_layers):
        ni = widths[layer]
        no = widths[layer + 1]
        boff = off + no * ni
        out = np.empty(no)
        for i in range(no):
            s = 0.0
            row = off + i * ni
            for j in range(ni):
                s += params[row + j] * a[j]
            s += params[boff + i]
            out[i] = np.tanh(s) if acts[layer] == ACT_TANH else s
        a = out
        off = boff + no
    return a


@njit(cache=True)
def mlp_vjp(widths, acts, params, x, g):
    n_layers = widths.shape[0] - 1
    total = 0
    for k in range(widths.shape[0]):
        total += widths[k]
    abuf = np.empty(total)
    for j in range(widths[0]):
        abuf[j] = x[j]

    aoff = 0
    off = 0
    for layer in range(n_layers):
        ni = widths[layer]
        no = widths[layer + 1]
        boff = off + no * ni
        out_off = aoff + ni
        for i in range(no):
            s = 0.0
            row = off + i * ni
            for j in range(ni):
                s += params[row + j] * abuf[aoff + j]
            s += params[boff + i]
            abuf[out_off + i] = np.tanh(s) if acts[layer] == ACT_TANH else s
        aoff = out_off
        off = boff + no

    gparams = np.zeros_like(params)
    delta = np.empty(widths[n_layers])
    for i in range(widths[n_layers]):
        delta[i] = g[i]

    for layer in range(n_layers - 1, -1, -1):
        ni = widths[layer]
        no = widths[layer + 1]
        off = 0
        aoff = 0
        for k in range(layer):
            off += widths[k + 1] * widths[k] + widths[k + 1]
            aoff += widths[k]
        boff = off + no * ni
        out_off = aoff + ni
        if acts[layer] == ACT_TANH:
            for i in range(no):
                a = abuf[out_off + i]
                delta[i] = delta[i] * (1.0 - a * a)
        for i in range(no):
            row = off + i * ni
            d = delta[i]
            for j in range(ni):
                gparams[row + j] = d * abuf[aoff + j]
            gparams[boff + i] = d
        new_delta = np.zeros(ni)
        for i in range(no):
            row = off + i * ni
            d = delta[i]
            for j in range(ni):
                new_delta[j] += d * params[row + j]
        delta = new_delta
    return delta, gparams


@njit(cache=True)
def threshold_bits(x, thr):
    out = np.empty(x.shape[0])
    for i in range(x.shape[0]):
        out[i] = 1.0 if x[i] > thr else 0.0
    return out


@njit(cache=True)
def bit_features(bits):
    n = bits.shape[0]
    ones = 0
    for i in range(n):
        if bits[i] > 0.5:
            ones += 1
    c11 = 0.0
    for i in range(n - 1):
        if bits[i] > 0.5 and bits[i + 1] > 0.5:
            c11 += 1.0
    c101 = 0.0
    for i in range(n - 2):
        if bits[i] > 0.5 and bits[i + 1] <= 0.5 and bits[i + 2] > 0.5:
            c101 += 1.0
    parity = float(ones % 2)
    best = 1
    run = 1
    for i in range(1, n):
        if (bits[i] > 0.5) == (bits[i - 1] > 0.5):
            run += 1
            if run > best:
                best = run
        else:
            run = 1
    out = np.empty(4)
    out[0] = c11
    out[1] = c101
    out[2] = parity
    out[3] = float(best)
    return out
