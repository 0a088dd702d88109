"""Self-checks run by ``adjfree verify``.

Each suite returns a list of failure messages; an empty list means it passed.
Suites are small, seeded and deterministic so they run in a few seconds.
"""
import numpy as np

from . import observation
from .assimilation import (
    AssimilationWindow,
    SolverConfig,
    _gn_step,
    gauss_newton_direction_mlef,
    linear_4denkf_weights,
    sample_posterior_weights,
    solve_4dvar_mc,
    solve_4dvar_mlef,
    window_cost,
)
from .ensemble import anomalies
from .modchol import fit_precision, materialize_sqrt_B, precision_matrix
from .model import ModelParams, propagate, rk4_fixed


def random_instance(rng, n=40, N=20, M=0, gamma=1, p=1.0, std=0.5, spread=1.0):
    """Synthetic background ensembles at M+1 times and matching observations."""
    center = rng.normal(0.0, 3.0, n)
    ensembles, obs, nets = [], [], []
    for _ in range(M + 1):
        net = observation.sample_network(p, n, rng)
        truth = center + spread * rng.standard_normal(n)
        ensembles.append(center[:, None] + spread * rng.standard_normal((n, N)))
        nets.append(net)
        obs.append(observation.apply_operator(truth, net, gamma) + std * rng.standard_normal(net.m))
        center = center + rng.normal(0.0, 0.3, n)
    return ensembles, AssimilationWindow(obs, nets, observation.ObsErrorModel(std))


def check_jacobian(samples=1000, tol=1e-5, seed=0):
    rng = np.random.default_rng(seed)
    s = rng.uniform(0.1, 10.0, samples) * rng.choice([-1.0, 1.0], samples)
    net = observation.ObservationNetwork.full(samples)
    failures = []
    for gamma in range(1, 8):
        # central difference with a step scaled to |s|
        h = 1e-5 * np.maximum(1.0, np.abs(s))
        fd = (observation.apply_operator(s + h, net, gamma) - observation.apply_operator(s - h, net, gamma)) / (2 * h)
        exact = observation.operator_jacobian_diag(s, net, gamma)
        rel = np.max(np.abs(exact - fd) / np.abs(fd))
        if not rel < tol:
            failures.append(f"jacobian gamma={gamma}: relative error {rel:.3g}")
    return failures


def check_gradient(tol=1e-5, seed=1):
    """Gauss-Newton gradient at alpha=0 against finite differences of the cost."""
    rng = np.random.default_rng(seed)
    failures = []
    for gamma in range(1, 8):
        ens, win = random_instance(rng, n=12, N=8, M=1, gamma=gamma, p=0.7, spread=0.5)
        bases = [materialize_sqrt_B(fit_precision(X, 2)) for X in ens]
        snaps = [X.mean(axis=1) for X in ens]
        beta = 0.1 * rng.standard_normal(12)
        _, _, grad = _gn_step(snaps, beta, bases, win, gamma, 1.0)

        def cost(a):
            return window_cost([x + S @ a for x, S in zip(snaps, bases)], beta + a, win, gamma)

        h = 1e-6
        fd = np.array([(cost(h * e) - cost(-h * e)) / (2 * h) for e in np.eye(12)])
        rel = np.linalg.norm(grad - fd) / np.linalg.norm(fd)
        if not rel < tol:
            failures.append(f"gradient gamma={gamma}: relative error {rel:.3g}")
    return failures


def check_oracle(instances=50, tol=1e-10, seed=2):
    """One MLEF step from beta=0 with gamma=1 against the closed-form weights."""
    rng = np.random.default_rng(seed)
    failures = []
    for i in range(instances):
        N = (5, 20)[i % 2]
        M = (0, 3)[(i // 2) % 2]
        ens, win = random_instance(rng, n=40, N=N, M=M)
        means = [X.mean(axis=1) for X in ens]
        dXs = [anomalies(X) for X in ens]
        step = gauss_newton_direction_mlef(means, np.zeros(N), dXs, win, 1, N)
        w, _ = linear_4denkf_weights(means, dXs, win)
        err = np.max(np.abs(step - w))
        if not err < tol:
            failures.append(f"oracle instance {i} (N={N}, M={M}): max error {err:.3g}")
    return failures


def check_monotonicity(runs=100, seed=3):
    failures = []
    for i in range(runs):
        rng = np.random.default_rng([seed, i])
        method = ("MC", "MLEF")[i % 2]
        gamma = (1, 3, 5, 7)[(i // 2) % 4]
        ens, win = random_instance(rng, n=40, N=20, M=2, gamma=gamma, p=0.7, std=0.05, spread=2.0)
        cfg = SolverConfig(max_iters=10, method=method)
        if method == "MC":
            _, trace = solve_4dvar_mc(ens, win, gamma, 2, cfg, rng)
        else:
            _, trace = solve_4dvar_mlef(ens, win, gamma, cfg, rng)
        costs = np.asarray(trace.cost_per_iter)
        bad = np.flatnonzero(np.diff(costs) > 0)
        if bad.size:
            failures.append(f"monotonicity run {i} ({method}, gamma={gamma}): cost rose at iteration {bad[0] + 1}")
    return failures


def check_modchol(tol=1e-8, seed=4):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((10, 10)) @ rng.standard_normal((10, 200))
    est = precision_matrix(fit_precision(X, 9))
    ref = np.linalg.inv(np.cov(X))
    rel = np.linalg.norm(est - ref) / np.linalg.norm(ref)
    return [] if rel < tol else [f"modified cholesky: relative Frobenius error {rel:.3g}"]


def check_integrator(states=20, tol=1e-5, seed=5):
    params = ModelParams()
    rng = np.random.default_rng(seed)
    x = propagate(params.forcing + rng.standard_normal(params.n), 10.0, params)
    failures = []
    for i in range(states):
        x = propagate(x, 1.0, params)
        err = np.max(np.abs(propagate(x, 0.5, params) - rk4_fixed(x, 0.5, params, 1e-4)))
        if not err < tol:
            failures.append(f"integrator state {i}: max-norm difference {err:.3g}")
    return failures


def check_posterior(draws=10_000, tol=0.05, seed=6):
    rng = np.random.default_rng(seed)
    # Wishart Hessian: its inverse has a widely spread spectrum
    A = rng.standard_normal((40, 40))
    H = A @ A.T
    W = sample_posterior_weights(np.zeros(40), H, draws, rng)
    target = np.linalg.inv(H)
    rel = np.linalg.norm(np.cov(W) - target, 2) / np.linalg.norm(target, 2)
    return [] if rel < tol else [f"posterior covariance: relative spectral error {rel:.3g}"]


SUITES = {
    "jacobian": check_jacobian,
    "gradient": check_gradient,
    "oracle": check_oracle,
    "monotonicity": check_monotonicity,
    "modchol": check_modchol,
    "integrator": check_integrator,
    "posterior": check_posterior,
}


def run_suites(names=None):
    """Run the named suites (all by default) in a fixed order; returns {name: failures}."""
    names = list(SUITES) if names is None else list(names)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(f"unknown suite(s): {', '.join(unknown)}")
    return {name: SUITES[name]() for name in names}
