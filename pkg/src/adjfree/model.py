"""Lorenz-96 dynamics and an adaptive Dormand-Prince 5(4) integrator.

The integrator works column-wise on ``(n, K)`` arrays: every column keeps its
own time, step size and error control, so propagating an ensemble gives
exactly the same numbers as propagating each member on its own.
"""
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "ModelParams",
    "IntegrationError",
    "lorenz96_rhs",
    "propagate",
    "propagate_ensemble",
    "rk4_fixed",
]


class IntegrationError(RuntimeError):
    """Raised when the adaptive step size drops below ``min_step``."""

    def __init__(self, message, last_time):
        super().__init__(message)
        self.last_time = last_time


@dataclass(frozen=True)
class ModelParams:
    """Lorenz-96 size, forcing and integrator tolerances."""

    n: int = 40
    forcing: float = 8.0
    abs_tol: float = 1e-7
    rel_tol: float = 1e-7
    min_step: float = 1e-12
    max_step: float = np.inf

    def __post_init__(self):
        if self.n < 4:
            raise ValueError(f"n must be >= 4, got {self.n}")
        if not self.abs_tol > 0:
            raise ValueError(f"abs_tol must be > 0, got {self.abs_tol}")
        if self.rel_tol < 0:
            raise ValueError(f"rel_tol must be >= 0, got {self.rel_tol}")


def lorenz96_rhs(x, params):
    """Time derivative of the Lorenz-96 state with cyclic indexing.

    Works on a single state of shape ``(n,)`` or on an ``(n, K)`` stack of
    column states.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[0] != params.n:
        raise ValueError(f"state has {x.shape[0]} components, expected n={params.n}")
    ip1, im2, im1 = _neighbours(params.n)
    return (x[ip1] - x[im2]) * x[im1] - x + params.forcing


@lru_cache(maxsize=None)
def _neighbours(n):
    j = np.arange(n)
    return (j + 1) % n, (j - 2) % n, (j - 1) % n


# Dormand-Prince 5(4) tableau
_A21 = 1 / 5
_A31, _A32 = 3 / 40, 9 / 40
_A41, _A42, _A43 = 44 / 45, -56 / 15, 32 / 9
_A51, _A52, _A53, _A54 = 19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729
_A61, _A62, _A63, _A64, _A65 = 9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656
_B1, _B3, _B4, _B5, _B6 = 35 / 384, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84
# difference between 5th and embedded 4th order weights
_E1 = 71 / 57600
_E3 = -71 / 16695
_E4 = 71 / 1920
_E5 = -17253 / 339200
_E6 = 22 / 525
_E7 = -1 / 40

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 5.0


def _scaled_error(y, y_new, err, params):
    scale = params.abs_tol + params.rel_tol * np.maximum(np.abs(y), np.abs(y_new))
    # max-norm: exact per column, so batching does not change results
    return np.max(np.abs(err) / scale, axis=0)


def _initial_step(y, f0, params, t_span):
    # Hairer, Norsett & Wanner (II.4), with max norms
    scale = params.abs_tol + params.rel_tol * np.abs(y)
    d0 = np.max(np.abs(y) / scale, axis=0)
    d1 = np.max(np.abs(f0) / scale, axis=0)
    h0 = np.where((d0 < 1e-5) | (d1 < 1e-5), 1e-6, 0.01 * d0 / np.where(d1 > 0, d1, 1.0))
    h0 = np.minimum(h0, t_span)
    y1 = y + h0 * f0
    f1 = lorenz96_rhs(y1, params)
    d2 = np.max(np.abs(f1 - f0) / scale, axis=0) / h0
    dmax = np.maximum(d1, d2)
    h1 = np.where(dmax <= 1e-15, np.maximum(1e-6, h0 * 1e-3), (0.01 / np.where(dmax > 0, dmax, 1.0)) ** 0.2)
    return np.minimum(np.minimum(100 * h0, h1), params.max_step)


def _dopri5_columns(Y0, t_span, params):
    Y = np.array(Y0, dtype=float, copy=True)
    K = Y.shape[1]
    t = np.zeros(K)
    F1 = lorenz96_rhs(Y, params)
    h = _initial_step(Y, F1, params, t_span)
    active = np.arange(K)
    while active.size:
        y = Y[:, active]
        k1 = F1[:, active]
        remaining = t_span - t[active]
        hh = np.minimum(h[active], remaining)
        last = hh >= remaining
        hr = hh[None, :]
        k2 = lorenz96_rhs(y + hr * (_A21 * k1), params)
        k3 = lorenz96_rhs(y + hr * (_A31 * k1 + _A32 * k2), params)
        k4 = lorenz96_rhs(y + hr * (_A41 * k1 + _A42 * k2 + _A43 * k3), params)
        k5 = lorenz96_rhs(y + hr * (_A51 * k1 + _A52 * k2 + _A53 * k3 + _A54 * k4), params)
        k6 = lorenz96_rhs(y + hr * (_A61 * k1 + _A62 * k2 + _A63 * k3 + _A64 * k4 + _A65 * k5), params)
        y_new = y + hr * (_B1 * k1 + _B3 * k3 + _B4 * k4 + _B5 * k5 + _B6 * k6)
        k7 = lorenz96_rhs(y_new, params)
        err = hr * (_E1 * k1 + _E3 * k3 + _E4 * k4 + _E5 * k5 + _E6 * k6 + _E7 * k7)
        err_norm = _scaled_error(y, y_new, err, params)
        if not np.all(np.isfinite(err_norm)):
            raise IntegrationError("non-finite state during integration", float(np.min(t[active])))

        accepted = err_norm <= 1.0
        with np.errstate(divide="ignore"):
            factor = _SAFETY * err_norm ** -0.2
        factor = np.clip(factor, _MIN_FACTOR, _MAX_FACTOR)
        factor = np.where(accepted, factor, np.minimum(factor, 1.0))

        acc = active[accepted]
        Y[:, acc] = y_new[:, accepted]
        F1[:, acc] = k7[:, accepted]
        t[acc] = np.where(last[accepted], t_span, t[acc] + hh[accepted])
        h[active] = np.minimum(hh * factor, params.max_step)
        done = accepted & last
        rejected_small = (~accepted) & (h[active] < params.min_step)
        if np.any(rejected_small):
            raise IntegrationError(
                f"step size fell below min_step={params.min_step}",
                float(np.min(t[active[rejected_small]])),
            )
        active = active[~done]
    return Y


def propagate(x0, t_span, params):
    """Integrate one Lorenz-96 state forward by ``t_span`` time units.

    Parameters
    ----------
    x0 : ndarray (n,)
        Initial state.
    t_span : float
        Non-negative duration. ``0`` returns a copy of ``x0``.
    params : ModelParams

    Returns
    -------
    ndarray (n,)
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim != 1:
        raise ValueError("propagate expects a single state vector; use propagate_ensemble")
    return propagate_ensemble(x0[:, None], t_span, params)[:, 0]


def propagate_ensemble(X, t_span, params):
    """Integrate every column of ``X`` (shape ``(n, N)``) by ``t_span``."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] != params.n:
        raise ValueError(f"ensemble must have shape (n={params.n}, N), got {X.shape}")
    if t_span < 0:
        raise ValueError(f"t_span must be >= 0, got {t_span}")
    if t_span == 0 or X.shape[1] == 0:
        return X.copy()
    return _dopri5_columns(X, float(t_span), params)


def rk4_fixed(x0, t_span, params, h):
    """Classical fixed-step RK4; a reference solution for the adaptive path."""
    x = np.array(x0, dtype=float, copy=True)
    steps = int(np.ceil(t_span / h - 1e-9))
    if steps == 0:
        return x
    dt = t_span / steps
    for _ in range(steps):
        k1 = lorenz96_rhs(x, params)
        k2 = lorenz96_rhs(x + 0.5 * dt * k1, params)
        k3 = lorenz96_rhs(x + 0.5 * dt * k2, params)
        k4 = lorenz96_rhs(x + dt * k3, params)
        x = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return x
