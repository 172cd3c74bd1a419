"""Independent brute-force oracles used to freeze expected values.

These deliberately avoid the library's own kernels: naive loops only.
"""

import numpy as np


def matmul_triple_loop(a, b):
    m, p = a.shape
    p2, n = b.shape
    assert p == p2
    out = np.zeros((m, n), dtype=a.dtype)
    for i in range(m):
        for j in range(n):
            acc = a[i, 0] * b[0, j]
            for kk in range(1, p):
                acc = acc + a[i, kk] * b[kk, j]
            out[i, j] = acc
    return out


def permute_index_map(x, order):
    out = np.zeros(tuple(x.shape[ax] for ax in order), dtype=x.dtype)
    for idx in np.ndindex(*x.shape):
        out[tuple(idx[ax] for ax in order)] = x[idx]
    return out


def conv2d_seven_loop(x, w, stride, padding):
    b, ci, h, width = x.shape
    co, _, k, _ = w.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (width + 2 * padding - k) // stride + 1
    out = np.zeros((b, co, ho, wo), dtype=x.dtype)
    for bi in range(b):
        for oc in range(co):
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for ic in range(ci):
                        for ky in range(k):
                            for kx in range(k):
                                iy = oy * stride + ky - padding
                                ix = ox * stride + kx - padding
                                if 0 <= iy < h and 0 <= ix < width:
                                    acc += x[bi, ic, iy, ix] * w[oc, ic, ky, kx]
                    out[bi, oc, oy, ox] = acc
    return out


def jacobi_eigen_symmetric(a, sweeps=100, tol=1e-14):
    """Classical cyclic Jacobi eigensolver for a symmetric matrix.

    Returns eigenvalues sorted nonincreasing.
    """
    a = a.astype(np.float64, copy=True)
    n = a.shape[0]
    for _ in range(sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                off = max(off, abs(a[p, q]))
                if abs(a[p, q]) <= tol * np.sqrt(abs(a[p, p] * a[q, q]) + 1e-300):
                    continue
                theta = 0.5 * np.arctan2(2.0 * a[p, q], a[q, q] - a[p, p])
                c, s = np.cos(theta), np.sin(theta)
                rp = a[:, p].copy()
                a[:, p] = c * rp - s * a[:, q]
                a[:, q] = s * rp + c * a[:, q]
                rp = a[p, :].copy()
                a[p, :] = c * rp - s * a[q, :]
                a[q, :] = s * rp + c * a[q, :]
        if off < tol:
            break
    return np.sort(np.diag(a))[::-1]


def numeric_grad(f, x, h=1e-5):
    """Central finite differences of scalar f at array x."""
    x = x.astype(np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2.0 * h)
        it.iternext()
    return g


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


def fro_rel(a, b):
    """Frobenius-norm relative difference, the scale-aware reconstruction metric."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))
