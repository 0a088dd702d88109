"""Modified Cholesky (Bickel-Levina) precision estimator.

Each state component is regressed on its predecessors within a radius ``r``;
the regression coefficients populate a unit lower-triangular ``L`` and the
residual variances a diagonal ``D`` so that ``B^{-1} ~= L^T D^{-1} L``.

Indices are 0-based throughout.
"""
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .ensemble import anomalies

__all__ = [
    "PrecisionFactors",
    "predecessors",
    "fit_precision",
    "apply_sqrt_B",
    "apply_inv_sqrt_B",
    "materialize_sqrt_B",
    "precision_matrix",
    "covariance_matrix",
]

RIDGE_SCALE = 1e-8


@dataclass(frozen=True)
class PrecisionFactors:
    """Factors of ``B^{-1} = L^T D^{-1} L``.

    Attributes
    ----------
    L : ndarray (n, n)
        Unit lower-triangular, at most ``radius`` nonzeros below the diagonal
        per row.
    D_inv_diag : ndarray (n,)
        Inverse residual variances (diagonal of ``D^{-1}``).
    radius : int
    """

    L: np.ndarray
    D_inv_diag: np.ndarray
    radius: int

    @property
    def n(self):
        return self.D_inv_diag.shape[0]


def predecessors(i, r, n):
    """Labels smaller than ``i`` within distance ``r``, no periodic wrap.

    >>> list(predecessors(4, 2, 40))
    [2, 3]
    """
    if not 0 <= i < n:
        raise ValueError(f"index {i} out of range for n={n}")
    return range(max(0, i - r), i)


def fit_precision(X, r, var_floor=1e-8):
    """Fit modified-Cholesky factors from an ensemble ``X`` of shape ``(n, N)``.

    Rank-deficient predictor blocks (``N - 1 < r`` or collinear rows) are
    handled with a small Tikhonov ridge, ``RIDGE_SCALE * trace(G) / p``.
    Residual variances below ``var_floor`` are clamped to it.
    """
    if r < 0:
        raise ValueError(f"radius must be >= 0, got {r}")
    if not var_floor > 0:
        raise ValueError(f"var_floor must be > 0, got {var_floor}")
    Z = anomalies(X)
    n, N = Z.shape
    L = np.eye(n)
    d_inv = np.empty(n)
    for i in range(n):
        z = Z[i]
        lo = max(0, i - r)
        if lo < i:
            P = Z[lo:i]
            G = P @ P.T
            rhs = P @ z
            p = G.shape[0]
            if p > N - 1 or np.linalg.matrix_rank(G) < p:
                scale = np.trace(G) / p
                G = G + RIDGE_SCALE * (scale if scale > 0 else 1.0) * np.eye(p)
            beta = np.linalg.solve(G, rhs)
            L[i, lo:i] = -beta
            resid = z - beta @ P
        else:
            resid = z
        var = resid @ resid / (N - 1)
        d_inv[i] = 1.0 / max(var, var_floor)
    return PrecisionFactors(L=L, D_inv_diag=d_inv, radius=int(r))


def apply_sqrt_B(F, a):
    """Apply ``B^{1/2} = L^{-1} D^{1/2}`` to ``a`` (vector or column stack)."""
    a = np.asarray(a, dtype=float)
    scaled = (a.T / np.sqrt(F.D_inv_diag)).T
    return solve_triangular(F.L, scaled, lower=True, unit_diagonal=True)


def apply_inv_sqrt_B(F, x):
    """Apply ``(B^{1/2})^{-1} = D^{-1/2} L``, the inverse of :func:`apply_sqrt_B`.

    Its transpose ``L^T D^{-1/2}`` is the factor with
    ``B^{-1} = (L^T D^{-1/2}) (L^T D^{-1/2})^T``.
    """
    x = np.asarray(x, dtype=float)
    return ((F.L @ x).T * np.sqrt(F.D_inv_diag)).T


def materialize_sqrt_B(F):
    """Dense ``B^{1/2}``; column ``j`` is ``apply_sqrt_B(F, e_j)``."""
    return apply_sqrt_B(F, np.eye(F.n))


def precision_matrix(F):
    return F.L.T @ (F.D_inv_diag[:, None] * F.L)


def covariance_matrix(F):
    S = materialize_sqrt_B(F)
    return S @ S.T
