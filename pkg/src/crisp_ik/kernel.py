"""Kernels on end-effector poses and the regularized Gram solve."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cholesky, eigvalsh, solve_triangular
from scipy.spatial.distance import cdist, pdist, squareform

KERNEL_FAMILIES = ("gaussian", "laplacian", "linear")


class FactorizationError(RuntimeError):
    """Cholesky of ``K + n*lam*I`` failed."""


@dataclass(frozen=True)
class KernelSpec:
    family: str = "gaussian"
    sigma: float = 1.0

    def __post_init__(self):
        if self.family not in KERNEL_FAMILIES:
            raise ValueError(f"kernel family must be one of {KERNEL_FAMILIES}, got {self.family!r}")
        if self.family != "linear" and not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


def embed_poses(X, pos_dim: int) -> np.ndarray:
    """Map pose vectors ``[position, angles]`` to ``[position, cos, sin]``.

    Angles go on the unit circle so kernel distances are continuous across
    the 0 / 2*pi seam. Output has ``pos_dim + 2 * n_angles`` columns.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    angles = X[:, pos_dim:]
    return np.hstack([X[:, :pos_dim], np.cos(angles), np.sin(angles)])


def _from_sq_dist(spec, d2):
    if spec.family == "gaussian":
        return np.exp(-d2 / spec.sigma**2)
    return np.exp(-np.sqrt(d2) / spec.sigma)


def kernel_eval(spec: KernelSpec, x, x2) -> float:
    """Kernel value between two poses (``Pose`` objects or pose vectors)."""
    v1 = np.asarray(getattr(x, "vector", x), dtype=float)
    v2 = np.asarray(getattr(x2, "vector", x2), dtype=float)
    if v1.shape != v2.shape or v1.size not in (3, 6):
        raise ValueError(f"pose dimensions differ or are invalid: {v1.shape} vs {v2.shape}")
    pos_dim = 2 if v1.size == 3 else 3
    e1, e2 = embed_poses(v1, pos_dim)[0], embed_poses(v2, pos_dim)[0]
    if spec.family == "linear":
        return float(e1 @ e2)
    return float(_from_sq_dist(spec, np.sum((e1 - e2) ** 2)))


def gram(spec: KernelSpec, E) -> np.ndarray:
    """Symmetric kernel matrix over embedded inputs ``E`` of shape ``(n, p)``."""
    E = np.atleast_2d(E)
    if E.shape[0] == 1:
        return np.array([[1.0]]) if spec.family != "linear" else np.array([[float(E[0] @ E[0])]])
    if spec.family == "linear":
        K = E @ E.T
        return np.triu(K) + np.triu(K, 1).T
    K = squareform(_from_sq_dist(spec, pdist(E, "sqeuclidean")))
    np.fill_diagonal(K, 1.0)
    return K


def cross_kernel(spec: KernelSpec, E_query, E_train) -> np.ndarray:
    """Kernel values ``(m, n)`` between query and training embeddings."""
    E_query = np.atleast_2d(E_query)
    if spec.family == "linear":
        return E_query @ E_train.T
    return _from_sq_dist(spec, cdist(E_query, E_train, "sqeuclidean"))


@dataclass(frozen=True, eq=False)
class GramFactor:
    """Lower Cholesky factor of ``K + n * lam * I``."""

    L: np.ndarray
    n: int
    lam: float


def factorize(K, n: int, lam: float, overwrite: bool = False) -> GramFactor:
    if not lam > 0:
        raise ValueError(f"lam must be positive, got {lam}")
    K = np.asarray(K, dtype=float)
    if K.shape != (n, n):
        raise ValueError(f"K must be {n}x{n}, got {K.shape}")
    A = K if overwrite else K.copy()
    A[np.diag_indices(n)] += n * lam
    try:
        L = cholesky(A, lower=True, overwrite_a=True, check_finite=True)
    except (LinAlgError, ValueError) as exc:
        # Only reachable for non-PSD input; report what went wrong.
        sample = np.asarray(K[: min(n, 500), : min(n, 500)])
        min_eig = float(eigvalsh(sample)[0]) if np.all(np.isfinite(sample)) else float("nan")
        raise FactorizationError(
            f"Cholesky of K + n*lam*I failed (lam={lam}, min eigenvalue of leading "
            f"block ~ {min_eig:.3g}): {exc}"
        ) from exc
    L.setflags(write=False)
    return GramFactor(L, n, float(lam))


def weights(factor: GramFactor, kx) -> np.ndarray:
    """Solve ``(K + n*lam*I) alpha = kx`` with two triangular solves.

    ``kx`` may be a vector or an ``(n, m)`` matrix of query columns.
    """
    kx = np.asarray(kx, dtype=float)
    if kx.shape[0] != factor.n:
        raise ValueError(f"kx has length {kx.shape[0]}, expected {factor.n}")
    z = solve_triangular(factor.L, kx, lower=True, check_finite=False)
    return solve_triangular(factor.L, z, lower=True, trans="T", check_finite=False)
