"""Dense linear algebra kernel.

Matrices are plain 2-D ``float64`` numpy arrays. Everything here is a pure
function of its inputs: Householder thin QR, a one-sided Jacobi SVD used as
the exact small-matrix solver, and the randomized truncated SVD (Gaussian
range finder + subspace iteration) that builds adapter projections.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import as_matrix, check_positive_int, check_rank, check_seed, check_shapes_chain
from .exceptions import ConvergenceError, ParameterError

__all__ = [
    "SvdFactors",
    "matmul",
    "qr_thin",
    "svd_dense",
    "truncated_svd",
    "frobenius_norm",
    "oversamples_for",
    "read_matrix_text",
    "write_matrix_text",
]

SVD_SIZE_CAP = 512
JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 60
MAX_OVERSAMPLES = 10
DEFAULT_N_ITER = 10

_EPS = np.finfo(np.float64).eps


@dataclass(frozen=True)
class SvdFactors:
    """Truncated factorization ``W ~= U @ diag(S) @ V.T``.

    ``U`` is m x k, ``S`` holds k nonincreasing nonnegative values and ``V``
    is n x k. Arrays are made read-only on construction.
    """

    U: np.ndarray
    S: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        for arr in (self.U, self.S, self.V):
            arr.setflags(write=False)

    @property
    def rank_k(self) -> int:
        return self.S.shape[0]

    def reconstruct(self, rank: int | None = None) -> np.ndarray:
        k = self.rank_k if rank is None else rank
        return (self.U[:, :k] * self.S[:k]) @ self.V[:, :k].T


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    check_shapes_chain(a, b)
    return a @ b


def frobenius_norm(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))


def qr_thin(a, *, return_deficient=False):
    """Householder thin QR with a nonnegative diagonal on ``r``.

    Returns ``(q, r)`` with ``q`` m x n orthonormal-column and ``r`` n x n upper
    triangular. Rank-deficient input is allowed: ``q`` stays orthonormal and the
    affected diagonal entries of ``r`` are (numerically) zero. With
    ``return_deficient=True`` a boolean mask of those columns is returned as a
    third element.
    """
    a = as_matrix(a, "a")
    m, n = a.shape
    if m < n:
        raise ParameterError(f"qr_thin needs rows >= cols, got shape {a.shape}")
    r = a.copy()
    reflectors = []
    for j in range(n):
        x = r[j:, j]
        norm_x = np.linalg.norm(x)
        if norm_x == 0.0:
            reflectors.append(None)
            continue
        v = x.copy()
        v[0] += np.copysign(norm_x, x[0])
        v /= np.linalg.norm(v)
        r[j:, j:] -= 2.0 * np.outer(v, v @ r[j:, j:])
        reflectors.append(v)

    q = np.eye(m, n)
    for j in range(n - 1, -1, -1):
        v = reflectors[j]
        if v is not None:
            q[j:, :] -= 2.0 * np.outer(v, v @ q[j:, :])
    r = np.triu(r[:n])

    signs = np.where(np.diag(r) < 0, -1.0, 1.0)
    q *= signs
    r *= signs[:, None]
    if not return_deficient:
        return q, r
    tol = max(m, n) * _EPS * max(frobenius_norm(a), np.finfo(np.float64).tiny)
    return q, r, np.abs(np.diag(r)) <= tol


def _round_robin(k):
    """Disjoint column-pair schedule covering every pair once per sweep."""
    players = list(range(k)) + ([-1] if k % 2 else [])
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        pairs = [(players[i], players[size - 1 - i]) for i in range(size // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p >= 0 and q >= 0]
        if pairs:
            rounds.append((np.array([p for p, _ in pairs]), np.array([q for _, q in pairs])))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _complete_orthonormal(u: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Replace the columns of ``u`` not flagged ``good`` by an orthonormal completion."""
    u = u.copy()
    basis = [u[:, j] for j in np.flatnonzero(good)]
    rows = u.shape[0]
    candidates = iter(range(rows))
    for j in np.flatnonzero(~good):
        while True:
            e = np.zeros(rows)
            e[next(candidates)] = 1.0
            for _ in range(2):
                for b in basis:
                    e -= (b @ e) * b
            norm_e = np.linalg.norm(e)
            if norm_e > 0.5:
                break
        u[:, j] = e / norm_e
        basis.append(u[:, j])
    return u


def _normalize_signs(u: np.ndarray, v: np.ndarray):
    """Make the largest-magnitude entry of each column of ``u`` positive."""
    if u.shape[1] == 0:
        return u, v
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[idx, np.arange(u.shape[1])] < 0, -1.0, 1.0)
    return u * signs, v * signs


def svd_dense(a, *, max_size=SVD_SIZE_CAP, tol=JACOBI_TOL, max_sweeps=JACOBI_MAX_SWEEPS) -> SvdFactors:
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Pairs of columns are rotated until every pair's cosine falls below
    ``tol``; disjoint pairs are processed together in round-robin order.
    Returns k = min(m, n) singular triplets, sign-normalized.
    """
    a = as_matrix(a, "a")
    m, n = a.shape
    if min(m, n) > max_size:
        raise ParameterError(f"svd_dense limited to min(m, n) <= {max_size}, got shape {a.shape}")
    transposed = n > m
    # columns are stored as rows so that pair gathers are contiguous
    cols = np.array(a if transposed else a.T, dtype=np.float64, order="C")
    k, rows = cols.shape
    rot = np.eye(k)

    scale = frobenius_norm(cols)
    negligible = (max(rows, k) * _EPS * scale) ** 2
    rounds = _round_robin(k)
    for sweep in range(1, max_sweeps + 1):
        rotated = False
        for p, q in rounds:
            cp, cq = cols[p], cols[q]
            alpha = np.einsum("ij,ij->i", cp, cp)
            beta = np.einsum("ij,ij->i", cq, cq)
            gamma = np.einsum("ij,ij->i", cp, cq)
            active = (np.abs(gamma) > tol * np.sqrt(alpha * beta)) & (alpha > negligible) & (beta > negligible)
            if not active.any():
                continue
            rotated = True
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = (1.0 / np.sqrt(1.0 + t * t))[:, None]
            s = c * t[:, None]
            for mat in (cols, rot):
                mp, mq = mat[p], mat[q]
                mat[p] = c * mp - s * mq
                mat[q] = s * mp + c * mq
        if not rotated:
            break
    else:
        raise ConvergenceError("one-sided Jacobi SVD did not converge", max_sweeps)

    sv = np.sqrt(np.einsum("ij,ij->i", cols, cols))
    order = np.argsort(-sv, kind="stable")
    sv, cols, rot = sv[order], cols[order], rot[order]
    good = sv > max(rows, k) * _EPS * (sv[0] if k else 0.0)
    left = np.zeros((rows, k))
    left[:, good] = (cols[good] / sv[good, None]).T
    if not good.all():
        left = _complete_orthonormal(left, good)
    rot = rot.T

    if transposed:
        u, v = rot, left
    else:
        u, v = left, rot
    u, v = _normalize_signs(u, v)
    return SvdFactors(u, sv, v)


def oversamples_for(r: int, m: int, n: int) -> int:
    return min(MAX_OVERSAMPLES, min(m, n) - r)


def truncated_svd(w, r: int, n_iter: int = DEFAULT_N_ITER, seed: int = 0) -> SvdFactors:
    """Rank-``r`` randomized SVD.

    A Gaussian test matrix of width ``r + oversamples_for(r, m, n)`` sketches
    the range of ``w``; ``n_iter`` subspace iterations re-orthonormalize with
    QR after every product; the projected matrix is solved exactly with
    :func:`svd_dense` and truncated back to ``r``. Deterministic for a fixed
    ``seed``.
    """
    w = as_matrix(w, "w")
    m, n = w.shape
    r = check_rank(r, m, n)
    n_iter = check_positive_int(n_iter, "n_iter", minimum=0)
    seed = check_seed(seed)

    width = r + oversamples_for(r, m, n)
    rng = np.random.default_rng(seed)
    omega = rng.standard_normal((n, width))
    q, _ = qr_thin(w @ omega)
    for _ in range(n_iter):
        z, _ = qr_thin(w.T @ q)
        q, _ = qr_thin(w @ z)
    small = svd_dense(q.T @ w)
    u = (q @ small.U)[:, :r]
    v = small.V[:, :r]
    u, v = _normalize_signs(u, v.copy())
    return SvdFactors(u, small.S[:r].copy(), v)


def read_matrix_text(source) -> np.ndarray:
    """Read whitespace-delimited rows, one matrix row per line."""
    return as_matrix(np.loadtxt(source, dtype=np.float64, ndmin=2), "matrix")


def write_matrix_text(target, a) -> None:
    np.savetxt(target, as_matrix(a), fmt="%.17g")
