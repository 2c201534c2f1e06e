"""Principal component analysis on embedding matrices via cyclic Jacobi rotations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def jacobi_eigh(A: np.ndarray, tol: float = 1e-10, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi sweeps.

    Sweeps stop once the off-diagonal Frobenius norm falls below
    ``tol * ||A||_F``; one further sweep then polishes the result (convergence
    is quadratic, so this costs little and drives the residual to rounding
    level).  Returns ``(eigenvalues, eigenvectors)`` sorted by decreasing
    eigenvalue, eigenvectors in columns.
    """
    A = np.array(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got {A.shape}")
    if not np.allclose(A, A.T, rtol=0, atol=1e-12 * max(1.0, np.abs(A).max())):
        raise ValueError("matrix is not symmetric")
    A = 0.5 * (A + A.T)
    n = A.shape[0]
    V = np.eye(n)
    scale = np.linalg.norm(A) or 1.0
    eye = np.eye(n, dtype=bool)
    converged = False
    for _ in range(max_sweeps):
        off = np.linalg.norm(A[~eye])
        if converged or off == 0.0:
            break
        converged = off <= tol * scale
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                g = 100.0 * abs(apq)
                if abs(A[p, p]) + g == abs(A[p, p]) and abs(A[q, q]) + g == abs(A[q, q]):
                    # below the diagonal's resolution: the rotation would be the identity
                    A[p, q] = A[q, p] = 0.0
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 1.0 / (2.0 * theta)
                else:
                    t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                col_p, col_q = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * col_p - s * col_q
                A[:, q] = s * col_p + c * col_q
                row_p, row_q = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * row_p - s * row_q
                A[q, :] = s * row_p + c * row_q
                v_p, v_q = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * v_p - s * v_q
                V[:, q] = s * v_p + c * v_q
    evals = np.diag(A).copy()
    order = np.argsort(-evals, kind="stable")
    return evals[order], V[:, order]


def covariance(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    Xc = X - X.mean(axis=0)
    return Xc.T @ Xc / (X.shape[0] - 1)


@dataclass
class PCAProjector:
    mean: np.ndarray
    components: np.ndarray  # [d_out, d], orthonormal rows
    explained_variance: np.ndarray  # [d_out], non-increasing

    @property
    def d_in(self) -> int:
        return self.components.shape[1]

    @property
    def d_out(self) -> int:
        return self.components.shape[0]

    def project(self, v: np.ndarray, renormalize: bool = False, eps: float = 1e-12) -> np.ndarray:
        """``components @ (v - mean)`` for one vector or each row of a matrix."""
        v = np.asarray(v, dtype=np.float64)
        if v.shape[-1] != self.d_in:
            raise ValueError(f"projector expects {self.d_in}-d input, got {v.shape[-1]}")
        z = (v - self.mean) @ self.components.T
        if renormalize:
            z = z / np.maximum(np.linalg.norm(z, axis=-1, keepdims=True), eps)
        return z

    def reconstruct(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z) @ self.components + self.mean


def fit_pca(X: np.ndarray, d_out: int) -> PCAProjector:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("fit_pca needs an n x d matrix with n >= 2")
    n, d = X.shape
    if not 1 <= d_out <= min(n, d):
        raise ValueError(f"d_out={d_out} must lie in [1, min(n, d)] = [1, {min(n, d)}]")
    evals, evecs = jacobi_eigh(covariance(X))
    return PCAProjector(
        mean=X.mean(axis=0),
        components=evecs[:, :d_out].T.copy(),
        explained_variance=np.maximum(evals[:d_out], 0.0),
    )


def project(proj: PCAProjector, v: np.ndarray, renormalize: bool = False) -> np.ndarray:
    return proj.project(v, renormalize)


def reconstruction_error(proj: PCAProjector, X: np.ndarray) -> float:
    """Mean squared reconstruction error of the rows of ``X``."""
    X = np.asarray(X, dtype=np.float64)
    R = proj.reconstruct(proj.project(X)) - X
    return float(np.mean(np.sum(R * R, axis=1)))
