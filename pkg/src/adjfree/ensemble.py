"""Ensemble containers and empirical moments.

Ensembles are plain ``(n, N)`` float arrays whose columns are member states.
"""
import numpy as np

__all__ = ["as_ensemble", "ensemble_mean", "anomalies", "sample_covariance", "inflate"]


def as_ensemble(X):
    """Validate and return ``X`` as a float ``(n, N)`` array with ``N >= 2``."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError(f"ensemble must be 2-D (n, N), got shape {X.shape}")
    if X.shape[1] < 2:
        raise ValueError(f"ensemble needs at least 2 members, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("ensemble contains non-finite entries")
    return X


def ensemble_mean(X):
    return as_ensemble(X).mean(axis=1)


def anomalies(X):
    """Member deviations from the ensemble mean, ``X - mean 1^T``."""
    X = as_ensemble(X)
    return X - X.mean(axis=1, keepdims=True)


def sample_covariance(X):
    """Unbiased sample covariance ``dX dX^T / (N - 1)``."""
    dX = anomalies(X)
    return dX @ dX.T / (dX.shape[1] - 1)


def inflate(X, factor):
    """Scale the anomalies of ``X`` by ``factor`` while keeping the mean."""
    if not factor >= 1.0:
        raise ValueError(f"inflation factor must be >= 1, got {factor}")
    X = as_ensemble(X)
    if factor == 1.0:
        return X.copy()
    mean = X.mean(axis=1, keepdims=True)
    return mean + factor * (X - mean)
