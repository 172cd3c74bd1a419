"""SVD kernel and parameter initializers.

The SVD is a one-sided Jacobi implementation: accurate at desk scale,
deterministic (fixed cyclic sweep order, fixed sign convention) and free of
external dependencies.  It backs the spectral initialization of factorized
layers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, RankError
from .tensor import Tensor

MAX_SWEEPS = 60
_ORTHO_TOL = 1e-14


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD a = u @ diag(s) @ v.T with q = min(m, n) columns."""

    u: Tensor  # (m, q), column-orthonormal
    s: Tensor  # (q,), nonincreasing, nonnegative
    v: Tensor  # (n, q), column-orthonormal


def _complete_orthonormal(b: np.ndarray, start: int) -> None:
    """Fill columns b[:, start:] with unit vectors orthogonal to the rest."""
    m = b.shape[0]
    col = start
    for cand in range(m):
        if col >= b.shape[1]:
            break
        e = np.zeros(m)
        e[cand] = 1.0
        e -= b[:, :col] @ (b[:, :col].T @ e)
        nrm = np.linalg.norm(e)
        if nrm > 1e-6:
            b[:, col] = e / nrm
            col += 1
    if col < b.shape[1]:  # pragma: no cover - m >= q always leaves enough basis vectors
        raise ConvergenceError("failed to complete orthonormal basis")


def _jacobi_svd(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One-sided Jacobi on columns of a (m x n, m >= n). Returns (u, s, v)."""
    m, n = a.shape
    b = a.astype(np.float64, copy=True)
    v = np.eye(n)
    eps = np.finfo(np.float64).eps
    for _ in range(MAX_SWEEPS):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                bp = b[:, p]
                bq = b[:, q]
                alpha = float(bp @ bp)
                beta = float(bq @ bq)
                gamma = float(bp @ bq)
                denom = math.sqrt(alpha * beta)
                if denom > 0.0:
                    off = max(off, abs(gamma) / denom)
                if denom == 0.0 or abs(gamma) <= 10.0 * eps * denom:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                bp_new = c * bp - s * bq
                b[:, q] = s * bp + c * bq
                b[:, p] = bp_new
                vp = v[:, p].copy()
                v[:, p] = c * vp - s * v[:, q]
                v[:, q] = s * vp + c * v[:, q]
        if off <= 10.0 * eps:
            break
    else:
        raise ConvergenceError(f"one-sided Jacobi SVD: off-diagonal residual {off:.3e} after {MAX_SWEEPS} sweeps")

    norms = np.linalg.norm(b, axis=0)
    order = np.argsort(-norms, kind="stable")
    norms = norms[order]
    b = b[:, order]
    v = v[:, order]
    scale = norms.max(initial=0.0)
    tiny = scale * n * eps
    u = np.zeros_like(b)
    nz = norms > tiny
    u[:, nz] = b[:, nz] / norms[nz]
    norms[~nz] = 0.0
    if not nz.all():
        _complete_orthonormal(u, int(nz.sum()))
    # Sign convention: largest-magnitude component of each u column positive.
    for j in range(n):
        k = int(np.argmax(np.abs(u[:, j])))
        if u[k, j] < 0.0:
            u[:, j] = -u[:, j]
            v[:, j] = -v[:, j]
    return u, norms, v


def svd(a: Tensor) -> SvdResult:
    """Thin SVD of a 2-D tensor, computed in float64."""
    if a.rank != 2:
        raise ValueError(f"svd expects a matrix, got shape {a.shape}")
    mat = a.data.astype(np.float64)
    m, n = mat.shape
    if m >= n:
        u, s, v = _jacobi_svd(mat)
    else:
        v, s, u = _jacobi_svd(mat.T)
        # Re-apply the sign convention to u after the transpose swap.
        for j in range(len(s)):
            k = int(np.argmax(np.abs(u[:, j])))
            if u[k, j] < 0.0:
                u[:, j] = -u[:, j]
                v[:, j] = -v[:, j]
    return SvdResult(u=Tensor(u, dtype="float64"), s=Tensor(s, dtype="float64"), v=Tensor(v, dtype="float64"))


# -- initializers ----------------------------------------------------------

SCHEMES = ("kaiming-uniform", "glorot-uniform")


def _fans(shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 2:
        return shape[0], shape[1]
    if len(shape) == 4:
        co, ci, kh, kw = shape
        return ci * kh * kw, co * kh * kw
    raise ValueError(f"init_dense: unsupported rank {len(shape)} for shape {shape}")


def init_bound(shape: tuple[int, ...], scheme: str) -> float:
    fan_in, fan_out = _fans(shape)
    if scheme == "kaiming-uniform":
        return math.sqrt(6.0 / fan_in)
    if scheme == "glorot-uniform":
        return math.sqrt(6.0 / (fan_in + fan_out))
    raise ValueError(f"unknown init scheme {scheme!r}; expected one of {SCHEMES}")


def init_dense(shape, scheme: str, seed: int, dtype: str = "float32") -> Tensor:
    """Uniform fan-based initialization, deterministic per seed."""
    shape = tuple(int(e) for e in shape)
    bound = init_bound(shape, scheme)
    rng = np.random.default_rng(seed)
    values = rng.uniform(-bound, bound, size=shape)
    return Tensor(values, dtype=dtype)


def spectral_factorize(
    w: Tensor,
    r: int,
    scheme: str = "kaiming-uniform",
    seed: int = 0,
) -> tuple[Tensor, Tensor, Tensor]:
    """Factor w (m x n) into U (m x r), mdiag (r,), V (r x n) with U@diag@V == w.

    The leading min(m, n) directions carry the exact SVD triplet; the extra
    overparameterised directions get fresh scheme-initialized vectors scaled
    by 1/sqrt(r) and zero diagonal entries, so the contracted product equals
    w at initialization for every admissible r.
    """
    if w.rank != 2:
        raise ValueError(f"spectral_factorize expects a matrix, got shape {w.shape}")
    m, n = w.shape
    q = min(m, n)
    if r < q:
        raise RankError(f"rank {r} below full-rank bound min({m}, {n}) = {q}")
    res = svd(w)
    u = np.zeros((m, r))
    mdiag = np.zeros(r)
    v = np.zeros((r, n))
    u[:, :q] = res.u.data
    mdiag[:q] = res.s.data
    v[:q, :] = res.v.data.T
    if r > q:
        rng = np.random.default_rng(seed)
        bound_u = init_bound((m, r), scheme)
        bound_v = init_bound((r, n), scheme)
        u[:, q:] = rng.uniform(-bound_u, bound_u, size=(m, r - q)) / math.sqrt(r)
        v[q:, :] = rng.uniform(-bound_v, bound_v, size=(r - q, n)) / math.sqrt(r)
    dt = w.dtype
    return Tensor(u, dtype=dt), Tensor(mdiag, dtype=dt), Tensor(v, dtype=dt)
