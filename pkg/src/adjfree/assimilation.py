"""Adjoint-free 4D-Var solvers with line-search Gauss-Newton iterations.

Two control spaces are supported:

* ``MC``: increments live in the range of the modified-Cholesky square root
  ``B_k^{1/2} = L_k^{-1} D_k^{1/2}`` fitted at each observation time
  (control dimension ``n``, background term ``1/2 |beta|^2``).
* ``MLEF``: increments live in the span of the ensemble anomalies ``dX_k``
  (control dimension ``N``, background term ``(N-1)/2 |beta|^2``).

In both cases one control vector drives all snapshots of the window; the
observation operator is linearised about the current snapshots, the
resulting quadratic model gives a search direction and a line search on the
true non-linear cost picks the step length.
"""
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky, solve_triangular

from . import observation as _observation
from .ensemble import anomalies, as_ensemble
from .modchol import PrecisionFactors, fit_precision, materialize_sqrt_B
from .observation import (
    ObservationNetwork,
    ObsErrorModel,
    apply_operator,
    check_gamma,
)

__all__ = [
    "AssimilationWindow",
    "LineSearchConfig",
    "SolverConfig",
    "SolverTrace",
    "SolverError",
    "window_cost",
    "gauss_newton_direction_mc",
    "gauss_newton_direction_mlef",
    "line_search",
    "golden_section",
    "solve_4dvar_mc",
    "solve_4dvar_mlef",
    "solve_linear_4denkf",
    "linear_4denkf_weights",
    "sample_posterior_weights",
]

METHODS = ("MC", "MLEF")


class SolverError(RuntimeError):
    """The optimisation produced a non-finite cost; ``trace`` holds progress so far."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class AssimilationWindow:
    """Observations at times ``k = 0..M`` of one assimilation window."""

    observations: List[np.ndarray]
    networks: List[ObservationNetwork]
    err: ObsErrorModel
    dt_obs: float = 0.1
    times: Optional[List[int]] = None

    def __post_init__(self):
        if len(self.observations) != len(self.networks):
            raise ValueError("observations and networks must have the same length")
        if not self.observations:
            raise ValueError("window needs at least one observation time")
        if self.times is None:
            self.times = list(range(len(self.observations)))
        if len(self.times) != len(self.observations):
            raise ValueError("times and observations must have the same length")
        for y, net in zip(self.observations, self.networks):
            if np.shape(y) != (net.m,):
                raise ValueError(f"observation of shape {np.shape(y)} does not match network size {net.m}")
            if not np.all(np.isfinite(y)):
                raise ValueError("observations contain non-finite values")
        if not self.dt_obs > 0:
            raise ValueError(f"dt_obs must be > 0, got {self.dt_obs}")

    def __len__(self):
        return len(self.observations)


@dataclass
class LineSearchConfig:
    c1: float = 1e-4
    shrink: float = 0.5
    max_backtracks: int = 20
    refine: bool = False

    def __post_init__(self):
        if not 0 < self.c1 < 1:
            raise ValueError(f"c1 must be in (0, 1), got {self.c1}")
        if not 0 < self.shrink < 1:
            raise ValueError(f"shrink must be in (0, 1), got {self.shrink}")
        if self.max_backtracks < 0:
            raise ValueError("max_backtracks must be >= 0")


@dataclass
class SolverConfig:
    max_iters: int = 10
    line_search: LineSearchConfig = field(default_factory=LineSearchConfig)
    convergence_tol: float = 0.0
    method: str = "MC"
    var_floor: float = 1e-8
    repropagate_inner: bool = False

    def __post_init__(self):
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if self.convergence_tol < 0:
            raise ValueError("convergence_tol must be >= 0")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")


@dataclass
class SolverTrace:
    """Progress of one Gauss-Newton solve.

    ``cost_per_iter[0]`` is the cost at the background; entry ``u + 1`` is
    the cost after iteration ``u``.
    """

    cost_per_iter: List[float] = field(default_factory=list)
    step_lengths: List[float] = field(default_factory=list)
    alpha_a: Optional[np.ndarray] = None
    analysis_mean: Optional[np.ndarray] = None
    hessian: Optional[np.ndarray] = None


def window_cost(snapshots, beta, window, gamma, prior_weight=1.0):
    """Background plus observation misfit over the whole window.

    ``prior_weight`` is 1 for the modified-Cholesky space and ``N - 1`` for
    the ensemble space.
    """
    if len(snapshots) != len(window):
        raise ValueError(f"expected {len(window)} snapshots, got {len(snapshots)}")
    beta = np.asarray(beta, dtype=float)
    misfit = 0.0
    for x, y, net in zip(snapshots, window.observations, window.networks):
        d = y - apply_operator(x, net, gamma)
        misfit += d @ d
    return 0.5 * prior_weight * (beta @ beta) + 0.5 * misfit / window.err.variance


def _linearize(snapshots, bases, window, gamma):
    """Innovations ``d_k`` and ``Q_k = H_k S_k`` about the current snapshots."""
    ds, Qs = [], []
    for x, S, y, net in zip(snapshots, bases, window.observations, window.networks):
        ds.append(y - apply_operator(x, net, gamma))
        # looked up on the module so checks can substitute a faulty Jacobian
        Qs.append(_observation.operator_jacobian_diag(x, net, gamma)[:, None] * S[net.observed_indices])
    return ds, Qs


def _normal_equations(beta, ds, Qs, prior_weight, variance):
    c = beta.shape[0]
    hess = prior_weight * np.eye(c)
    obs_grad = np.zeros(c)
    for d, Q in zip(ds, Qs):
        hess += Q.T @ Q / variance
        obs_grad += Q.T @ d / variance
    if not np.all(np.isfinite(hess)):
        raise ValueError("Gauss-Newton Hessian has non-finite entries")
    # gradient of the quadratic model at alpha = 0
    grad = prior_weight * beta - obs_grad
    return hess, grad


def _gn_step(snapshots, beta, bases, window, gamma, prior_weight):
    ds, Qs = _linearize(snapshots, bases, window, gamma)
    hess, grad = _normal_equations(beta, ds, Qs, prior_weight, window.err.variance)
    direction = cho_solve(cho_factor(hess, lower=True), -grad)
    return direction, hess, grad


def gauss_newton_direction_mc(snapshots, beta, factors_per_time, window, gamma):
    """Search direction in the modified-Cholesky control space.

    Solves ``[I + sum Q_k^T R^-1 Q_k] a = -beta + sum Q_k^T R^-1 d_k`` with
    ``Q_k = H_k B_k^{1/2}``.
    """
    gamma = check_gamma(gamma)
    bases = [materialize_sqrt_B(F) for F in factors_per_time]
    return _gn_step(snapshots, np.asarray(beta, dtype=float), bases, window, gamma, 1.0)[0]


def gauss_newton_direction_mlef(snapshots, beta, anomalies_per_time, window, gamma, N):
    """Search direction in the ensemble space spanned by ``dX_k``.

    The Hessian is ``(N - 1) I + sum Q_k^T R^-1 Q_k`` with ``Q_k = H_k dX_k``.
    """
    gamma = check_gamma(gamma)
    bases = [np.asarray(dX, dtype=float) for dX in anomalies_per_time]
    return _gn_step(snapshots, np.asarray(beta, dtype=float), bases, window, gamma, float(N - 1))[0]


def golden_section(f, lo=0.0, hi=1.0, tol=1e-3, max_iter=60):
    """Golden-section minimisation of a scalar function on ``[lo, hi]``."""
    inv_phi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
    return (c, fc) if fc <= fd else (d, fd)


def line_search(eval_cost, rho_max=1.0, slope=None, config=None):
    """Backtracking Armijo search for a step length in ``[0, rho_max]``.

    ``slope`` is the directional derivative of the cost at ``rho = 0``; when
    omitted it is estimated by a forward difference. If no backtrack meets
    the sufficient-decrease test the best sampled step is returned, and
    ``rho = 0`` is always a candidate, so the returned step never increases
    the cost.
    """
    cfg = config or LineSearchConfig()
    f0 = eval_cost(0.0)
    if slope is None:
        eps = 1e-7 * rho_max
        slope = (eval_cost(eps) - f0) / eps
    best_rho, best_f = 0.0, f0
    rho = rho_max
    accepted = None
    for _ in range(cfg.max_backtracks + 1):
        f = eval_cost(rho)
        if np.isfinite(f) and f < best_f:
            best_rho, best_f = rho, f
        if slope < 0 and np.isfinite(f) and f <= f0 + cfg.c1 * rho * slope:
            accepted = rho
            break
        rho *= cfg.shrink
    if cfg.refine:
        rho_g, f_g = golden_section(eval_cost, 0.0, rho_max)
        if np.isfinite(f_g) and f_g < best_f:
            return rho_g
    if accepted is not None:
        return accepted
    return best_rho


def sample_posterior_weights(alpha_a, hessian, N, rng):
    """Draw ``N`` weight vectors from ``Normal(alpha_a, hessian^{-1})``.

    Returns an array of shape ``(len(alpha_a), N)``, one draw per column.
    """
    alpha_a = np.asarray(alpha_a, dtype=float)
    try:
        C = cholesky(hessian, lower=True)
    except np.linalg.LinAlgError as exc:
        raise ValueError("hessian is not symmetric positive definite") from exc
    xi = rng.standard_normal((alpha_a.shape[0], N))
    return alpha_a[:, None] + solve_triangular(C.T, xi, lower=False)


def _check_ensembles(ensembles, window):
    ensembles = [as_ensemble(X) for X in ensembles]
    if len(ensembles) != len(window):
        raise ValueError(f"need one background ensemble per observation time ({len(window)}), got {len(ensembles)}")
    shape = ensembles[0].shape
    if any(X.shape != shape for X in ensembles):
        raise ValueError("background ensembles must share one shape")
    return ensembles


def _gauss_newton(means, bases, window, gamma, prior_weight, config, trajectory=None):
    """Shared iteration of both solvers; returns the trace at the final iterate."""
    snapshots = [m.copy() for m in means]
    c = bases[0].shape[1]
    beta = np.zeros(c)
    trace = SolverTrace()
    cost = window_cost(snapshots, beta, window, gamma, prior_weight)
    trace.cost_per_iter.append(cost)

    for _ in range(config.max_iters):
        direction, _, grad = _gn_step(snapshots, beta, bases, window, gamma, prior_weight)
        increments = [S @ direction for S in bases]

        if trajectory is None:
            def phi(rho):
                moved = [x + rho * dx for x, dx in zip(snapshots, increments)]
                return window_cost(moved, beta + rho * direction, window, gamma, prior_weight)
        else:
            def phi(rho):
                moved = trajectory(snapshots[0] + rho * increments[0])
                return window_cost(moved, beta + rho * direction, window, gamma, prior_weight)

        rho = line_search(phi, 1.0, slope=float(grad @ direction), config=config.line_search)
        step = rho * direction
        if rho > 0:
            if trajectory is None:
                snapshots = [x + rho * dx for x, dx in zip(snapshots, increments)]
            else:
                snapshots = trajectory(snapshots[0] + rho * increments[0])
            beta = beta + step
        cost = window_cost(snapshots, beta, window, gamma, prior_weight)
        trace.step_lengths.append(rho)
        trace.cost_per_iter.append(cost)
        if not np.isfinite(cost):
            trace.alpha_a = beta
            raise SolverError("non-finite cost during Gauss-Newton iterations", trace)
        if config.convergence_tol > 0 and np.linalg.norm(step) < config.convergence_tol:
            break

    ds, Qs = _linearize(snapshots, bases, window, gamma)
    trace.hessian, _ = _normal_equations(beta, ds, Qs, prior_weight, window.err.variance)
    trace.alpha_a = beta
    return trace


def solve_4dvar_mc(ensembles, window, gamma, radius, config=None, rng=None, trajectory=None):
    """4D-Var in the modified-Cholesky control space.

    Parameters
    ----------
    ensembles : sequence of ndarray (n, N)
        Background ensemble propagated to each observation time of ``window``.
    window : AssimilationWindow
    gamma : int
        Observation-operator exponent.
    radius : int
        Predecessor radius of the precision estimator.
    config : SolverConfig, optional
    rng : numpy.random.Generator
        Source for the posterior draws.
    trajectory : callable, optional
        ``x0 -> list of states at the window times``; required when
        ``config.repropagate_inner`` is set.

    Returns
    -------
    analysis : ndarray (n, N)
        Posterior ensemble at the first observation time.
    trace : SolverTrace
    """
    config = config or SolverConfig(method="MC")
    gamma = check_gamma(gamma)
    ensembles = _check_ensembles(ensembles, window)
    N = ensembles[0].shape[1]
    means = [X.mean(axis=1) for X in ensembles]
    factors = [fit_precision(X, radius, config.var_floor) for X in ensembles]
    bases = [materialize_sqrt_B(F) for F in factors]
    traj = _inner_trajectory(config, trajectory)
    trace = _gauss_newton(means, bases, window, gamma, 1.0, config, traj)
    trace.analysis_mean = means[0] + bases[0] @ trace.alpha_a
    weights = sample_posterior_weights(trace.alpha_a, trace.hessian, N, rng)
    return means[0][:, None] + bases[0] @ weights, trace


def solve_4dvar_mlef(ensembles, window, gamma, config=None, rng=None, trajectory=None):
    """4D-Var in the ensemble-anomaly space; same contract as :func:`solve_4dvar_mc`."""
    config = config or SolverConfig(method="MLEF")
    gamma = check_gamma(gamma)
    ensembles = _check_ensembles(ensembles, window)
    N = ensembles[0].shape[1]
    means = [X.mean(axis=1) for X in ensembles]
    bases = [anomalies(X) for X in ensembles]
    traj = _inner_trajectory(config, trajectory)
    trace = _gauss_newton(means, bases, window, gamma, float(N - 1), config, traj)
    trace.analysis_mean = means[0] + bases[0] @ trace.alpha_a
    weights = sample_posterior_weights(trace.alpha_a, trace.hessian, N, rng)
    return means[0][:, None] + bases[0] @ weights, trace


def _inner_trajectory(config, trajectory):
    if not config.repropagate_inner:
        return None
    if trajectory is None:
        raise ValueError("repropagate_inner needs a trajectory callable")
    return trajectory


def linear_4denkf_weights(means, anomalies_per_time, window, gamma=1):
    """Closed-form ensemble-space weights for a linear observation operator.

    ``w* = [(N-1) I + sum Q_k^T R^-1 Q_k]^{-1} sum Q_k^T R^-1 d_k`` with
    ``d_k = y_k - H_k xbar_k`` and ``Q_k = H_k dX_k``.

    Returns the weights and the Hessian.
    """
    if check_gamma(gamma) != 1:
        raise ValueError("the closed-form weights require the linear operator (gamma=1)")
    bases = [np.asarray(dX, dtype=float) for dX in anomalies_per_time]
    N = bases[0].shape[1]
    ds, Qs = _linearize(means, bases, window, 1)
    hess, grad = _normal_equations(np.zeros(N), ds, Qs, float(N - 1), window.err.variance)
    return np.linalg.solve(hess, -grad), hess


def solve_linear_4denkf(ensembles, window, gamma=1, rng=None):
    """Linear 4D-EnKF analysis ensemble built from :func:`linear_4denkf_weights`."""
    ensembles = _check_ensembles(ensembles, window)
    N = ensembles[0].shape[1]
    means = [X.mean(axis=1) for X in ensembles]
    bases = [anomalies(X) for X in ensembles]
    w, hess = linear_4denkf_weights(means, bases, window, gamma)
    trace = SolverTrace(alpha_a=w, hessian=hess, analysis_mean=means[0] + bases[0] @ w)
    trace.cost_per_iter.append(window_cost(means, np.zeros(N), window, gamma, N - 1))
    moved = [m + dX @ w for m, dX in zip(means, bases)]
    trace.cost_per_iter.append(window_cost(moved, w, window, gamma, N - 1))
    weights = sample_posterior_weights(w, hess, N, rng)
    return means[0][:, None] + bases[0] @ weights, trace
