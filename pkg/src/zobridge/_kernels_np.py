"""Pure-numpy kernel implementations (fallback backend).

These use vectorized BLAS paths, so the accumulation order inside a reduction
is whatever numpy/BLAS picks; results can differ from the numba backend in
the last ulps. Within this backend every call is deterministic.
"""

from __future__ import annotations

import numpy as np

ACT_IDENTITY = 0
ACT_TANH = 1


def matvec(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    return a @ x


def mat_t_vec(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    return a.T @ g


def dot(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b))


def axpy(alpha: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return alpha * x + y


def mlp_forward(widths: np.ndarray, acts: np.ndarray, params: np.ndarray,
                x: np.ndarray) -> np.ndarray:
    a = x
    off = 0
    for layer in range(widths.shape[0] - 1):
        ni = int(widths[layer])
        no = int(widths[layer + 1])
        w = params[off:off + no * ni].reshape(no, ni)
        off += no * ni
        b = params[off:off + no]
        off += no
        z = w @ a + b
        a = np.tanh(z) if acts[layer] == ACT_TANH else z
    return a


def mlp_vjp(widths: np.ndarray, acts: np.ndarray, params: np.ndarray,
            x: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reverse pass: returns (d/dx, d/dparams) contracted against cotangent g."""
    n_layers = widths.shape[0] - 1
    cache = [x]
    w_offs = []
    off = 0
    for layer in range(n_layers):
        ni = int(widths[layer])
        no = int(widths[layer + 1])
        w_offs.append(off)
        w = params[off:off + no * ni].reshape(no, ni)
        off += no * ni
        b = params[off:off + no]
        off += no
        z = w @ cache[-1] + b
        cache.append(np.tanh(z) if acts[layer] == ACT_TANH else z)

    gparams = np.zeros_like(params)
    delta = np.array(g, dtype=np.float64, copy=True)
    for layer in range(n_layers - 1, -1, -1):
        ni = int(widths[layer])
        no = int(widths[layer + 1])
        if acts[layer] == ACT_TANH:
            out = cache[layer + 1]
            delta = delta * (1.0 - out * out)
        woff = w_offs[layer]
        w = params[woff:woff + no * ni].reshape(no, ni)
        gparams[woff:woff + no * ni] = np.outer(delta, cache[layer]).ravel()
        gparams[woff + no * ni:woff + no * ni + no] = delta
        delta = w.T @ delta
    return delta, gparams


def threshold_bits(x: np.ndarray, thr: float) -> np.ndarray:
    return (x > thr).astype(np.float64)


def bit_features(bits: np.ndarray) -> np.ndarray:
    """(count of "11" pairs, count of "101" triples, parity of ones,
    longest run of equal bits) as floats."""
    b = bits > 0.5
    n = b.shape[0]
    c11 = float(np.count_nonzero(b[:-1] & b[1:]))
    c101 = float(np.count_nonzero(b[:-2] & ~b[1:-1] & b[2:]))
    parity = float(np.count_nonzero(b) % 2)
    if n <= 1:
        longest = float(n)
    else:
        change = np.flatnonzero(b[1:] != b[:-1])
        edges = np.concatenate(([-1], change, [n - 1]))
        longest = float(np.max(np.diff(edges)))
    return np.array([c11, c101, parity, longest])
