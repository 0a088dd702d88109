"""Observation networks, the power-law observation operator and synthetic data.

The operator acts component-wise on the observed entries:

    h(s) = (s / 2) * ((|s| / 2) ** (gamma - 1) + 1)

``gamma = 1`` is the identity; larger exponents make it increasingly
non-linear while keeping it odd and strictly increasing.
"""
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ObservationNetwork",
    "ObsErrorModel",
    "check_gamma",
    "apply_operator",
    "operator_jacobian_diag",
    "synthesize_observation",
    "sample_network",
]

GAMMA_MIN, GAMMA_MAX = 1, 7


@dataclass(frozen=True)
class ObservationNetwork:
    """Sorted, distinct 0-based indices of the observed state components."""

    observed_indices: np.ndarray
    n: int

    def __post_init__(self):
        idx = np.asarray(self.observed_indices, dtype=int)
        if idx.ndim != 1 or idx.size == 0:
            raise ValueError("observation network needs at least one index")
        if np.any(np.diff(idx) <= 0):
            raise ValueError("observed indices must be strictly increasing")
        if idx[0] < 0 or idx[-1] >= self.n:
            raise ValueError(f"observed indices must lie in [0, {self.n})")
        object.__setattr__(self, "observed_indices", idx)

    @property
    def m(self):
        return self.observed_indices.size

    @classmethod
    def full(cls, n):
        return cls(np.arange(n), n)


@dataclass(frozen=True)
class ObsErrorModel:
    """Homogeneous Gaussian observation error, ``R = std_dev**2 I``."""

    std_dev: float = 0.01

    def __post_init__(self):
        if not self.std_dev > 0:
            raise ValueError(f"std_dev must be > 0, got {self.std_dev}")

    @property
    def variance(self):
        return self.std_dev**2


def check_gamma(gamma):
    if int(gamma) != gamma or not GAMMA_MIN <= gamma <= GAMMA_MAX:
        raise ValueError(f"gamma must be an integer in [{GAMMA_MIN}, {GAMMA_MAX}], got {gamma}")
    return int(gamma)


def _h(s, gamma):
    if gamma == 1:
        return s.copy()
    return 0.5 * s * ((0.5 * np.abs(s)) ** (gamma - 1) + 1.0)


def _dh(s, gamma):
    if gamma == 1:
        return np.ones_like(s)
    return 0.5 + gamma * np.abs(s) ** (gamma - 1) / 2.0**gamma


def apply_operator(x, net, gamma):
    """Observe state(s) ``x`` on ``net``; ``x`` may be ``(n,)`` or ``(n, K)``."""
    gamma = check_gamma(gamma)
    return _h(np.asarray(x, dtype=float)[net.observed_indices], gamma)


def operator_jacobian_diag(x, net, gamma):
    """Derivatives of the observed components; the Jacobian is ``diag(.)`` times a row selection."""
    gamma = check_gamma(gamma)
    return _dh(np.asarray(x, dtype=float)[net.observed_indices], gamma)


def synthesize_observation(x_true, net, gamma, err, rng):
    """``apply_operator(x_true) + eps`` with ``eps ~ N(0, std_dev**2 I)``."""
    clean = apply_operator(x_true, net, gamma)
    return clean + err.std_dev * rng.standard_normal(clean.shape)


def sample_network(p, n, rng):
    """Uniformly random network of ``round(p * n)`` distinct sorted indices."""
    if not 0 < p <= 1:
        raise ValueError(f"observation fraction p must be in (0, 1], got {p}")
    m = max(1, int(round(p * n)))
    if m == n:
        return ObservationNetwork.full(n)
    return ObservationNetwork(np.sort(rng.choice(n, size=m, replace=False)), n)
