"""Small dense linear algebra: one-sided Jacobi SVD, rank truncation, rank factorization.

Matrices are plain 2-D ``float64`` numpy arrays. Everything here is meant for the
small (at most a few hundred entries per side) matrices found in adapter layers.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

MAX_SWEEPS = 100
JACOBI_TOL = 1e-12
DEFAULT_RANK_TOL = 1e-9
NEGLIGIBLE = 1e-280  # squared column norm, after scaling to unit max entry


class SvdConvergenceError(RuntimeError):
    pass


class SvdResult(NamedTuple):
    u: np.ndarray  # d x n, orthonormal columns
    sigma: np.ndarray  # n, descending, >= 0
    v: np.ndarray  # k x n, orthonormal columns


def as_matrix(m) -> np.ndarray:
    """Validate and copy ``m`` into a finite 2-D float64 array."""
    arr = np.array(m, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"expected a non-empty 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("matrix has non-finite entries")
    return arr


def frobenius_norm(m) -> float:
    arr = np.asarray(m, dtype=np.float64)
    if arr.size == 0:
        return 0.0
    return float(np.sqrt(np.sum(arr * arr)))


def _complete_basis(u: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace columns of ``u`` not flagged in ``keep`` with an orthonormal completion."""
    d, n = u.shape
    basis = [u[:, j] for j in range(n) if keep[j]]
    out = u.copy()
    candidates = iter(np.eye(d))
    for j in range(n):
        if keep[j]:
            continue
        for e in candidates:
            w = e.copy()
            # two Gram-Schmidt passes for numerical orthogonality
            for _ in range(2):
                for q in basis:
                    w -= (q @ w) * q
            nrm = np.linalg.norm(w)
            if nrm > 1e-8:
                w /= nrm
                basis.append(w)
                out[:, j] = w
                break
        else:  # pragma: no cover - d >= n guarantees enough candidates
            raise SvdConvergenceError("could not complete left singular basis")
    return out


def _jacobi_tall(a: np.ndarray) -> SvdResult:
    # a is d x k with d >= k
    d, k = a.shape
    scale = float(np.max(np.abs(a)))
    if scale == 0.0:
        scale = 1.0
    ut = (a / scale).T.copy()  # rows are columns; unit scale keeps dot products clear of under/overflow
    vt = np.eye(k)
    # columns below eps * ||a|| are numerically zero; rotating them only churns noise
    floor = max(NEGLIGIBLE, (np.finfo(float).eps ** 2) * float(np.sum(ut * ut)))
    for _ in range(MAX_SWEEPS):
        rotated = False
        norms = np.einsum("ij,ij->i", ut, ut)
        for i in range(k - 1):
            for j in range(i + 1, k):
                alpha, beta = norms[i], norms[j]
                if min(alpha, beta) < floor:
                    continue
                gamma = ut[i] @ ut[j]
                if abs(gamma) <= JACOBI_TOL * np.sqrt(alpha) * np.sqrt(beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                if abs(zeta) > 1e150:
                    t = 0.5 / zeta
                else:
                    t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                for m in (ut, vt):
                    ri = m[i].copy()
                    m[i] = c * ri - s * m[j]
                    m[j] = s * ri + c * m[j]
                norms[i] = alpha - t * gamma
                norms[j] = beta + t * gamma
        if not rotated:
            break
    else:
        raise SvdConvergenceError(f"one-sided Jacobi did not converge in {MAX_SWEEPS} sweeps")

    u = ut.T.copy()
    v = vt.T.copy()
    sigma = np.sqrt(np.sum(u * u, axis=0))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    u = u[:, order]
    v = v[:, order]
    smax = sigma[0] if sigma.size else 0.0
    keep = sigma > max(smax, 1e-300) * k * np.finfo(float).eps
    keep &= sigma > 0.0
    u[:, keep] /= sigma[keep]
    if not np.all(keep):
        u = _complete_basis(u, keep)
    return SvdResult(u, sigma * scale, v)


def _fix_signs(res: SvdResult) -> SvdResult:
    u, sigma, v = res.u.copy(), res.sigma, res.v.copy()
    for j in range(u.shape[1]):
        nz = np.flatnonzero(np.abs(u[:, j]) > 1e-12)
        if nz.size and u[nz[0], j] < 0:
            u[:, j] *= -1.0
            v[:, j] *= -1.0
    return SvdResult(u, sigma, v)


def svd(m) -> SvdResult:
    """Thin SVD ``m = u @ diag(sigma) @ v.T`` by one-sided Jacobi rotations.

    Deterministic; the first nonzero entry of every left singular vector is positive.
    """
    a = as_matrix(m)
    d, k = a.shape
    if d >= k:
        res = _jacobi_tall(a)
    else:
        t = _jacobi_tall(a.T)
        res = SvdResult(t.v, t.sigma, t.u)
    return _fix_signs(res)


def truncate_rank(m, r: int) -> np.ndarray:
    """Best rank-``r`` approximation in Frobenius norm (SVD truncation)."""
    a = as_matrix(m)
    n = min(a.shape)
    if not 1 <= r <= n:
        raise ValueError(f"rank {r} outside [1, {n}]")
    u, sigma, v = svd(a)
    return (u[:, :r] * sigma[:r]) @ v[:, :r].T


def tail_error(sigma: np.ndarray, r: int) -> float:
    """sqrt(sum_{i>r} sigma_i^2): the optimal rank-r residual."""
    tail = np.asarray(sigma[r:], dtype=np.float64)
    return float(np.sqrt(np.sum(tail * tail)))


def numerical_rank(m, tol: float = DEFAULT_RANK_TOL) -> int:
    sigma = svd(m).sigma
    if sigma[0] == 0.0:
        return 0
    return int(np.sum(sigma > tol * sigma[0]))


def rank_factorize(delta_w, tol: float = DEFAULT_RANK_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Split ``delta_w`` into ``b @ a`` with inner dimension equal to its numerical rank.

    The rank is ``#{sigma_i > tol * sigma_1}``. Both factors carry ``sqrt(sigma)`` so
    they are balanced; ``b`` has full column rank. An all-zero input returns factors
    of shape ``(d, 0)`` and ``(0, k)`` whose product is the zero matrix.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    a = as_matrix(delta_w)
    d, k = a.shape
    u, sigma, v = svd(a)
    if sigma[0] == 0.0:
        return np.zeros((d, 0)), np.zeros((0, k))
    r = int(np.sum(sigma > tol * sigma[0]))
    root = np.sqrt(sigma[:r])
    return u[:, :r] * root, (v[:, :r] * root).T
