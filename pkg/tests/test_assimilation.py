import numpy as np
import pytest

from adjfree.assimilation import (
    AssimilationWindow,
    LineSearchConfig,
    SolverConfig,
    gauss_newton_direction_mc,
    gauss_newton_direction_mlef,
    line_search,
    linear_4denkf_weights,
    sample_posterior_weights,
    solve_4dvar_mc,
    solve_4dvar_mlef,
    solve_linear_4denkf,
    window_cost,
)
from adjfree.ensemble import anomalies
from adjfree.modchol import PrecisionFactors, fit_precision, materialize_sqrt_B, precision_matrix
from adjfree.observation import ObservationNetwork, ObsErrorModel, apply_operator, sample_network


def make_instance(rng, n=40, N=20, M=0, gamma=1, p=1.0, std=0.5, spread=1.0):
    """Random background ensembles and observations around a perturbed truth."""
    center = rng.normal(0, 3, n)
    ensembles, obs, nets = [], [], []
    for _ in range(M + 1):
        X = center[:, None] + spread * rng.standard_normal((n, N))
        net = sample_network(p, n, rng)
        truth = center + spread * rng.standard_normal(n)
        ensembles.append(X)
        nets.append(net)
        obs.append(apply_operator(truth, net, gamma) + std * rng.standard_normal(net.m))
        center = center + rng.normal(0, 0.3, n)
    return ensembles, AssimilationWindow(obs, nets, ObsErrorModel(std))


def scalar_window(y, std=1.0):
    return AssimilationWindow([np.array([y])], [ObservationNetwork.full(1)], ObsErrorModel(std))


# window_cost


def test_cost_zero_when_observations_fit():
    rng = np.random.default_rng(0)
    x = rng.normal(0, 3, 10)
    net = ObservationNetwork.full(10)
    win = AssimilationWindow([apply_operator(x, net, 3)], [net], ObsErrorModel(0.1))
    assert window_cost([x], np.zeros(10), win, 3) == 0.0


def test_cost_scalar_example():
    assert window_cost([np.array([0.0])], np.zeros(1), scalar_window(1.0), 1) == 0.5


def test_cost_invariant_to_time_order():
    rng = np.random.default_rng(1)
    ens, win = make_instance(rng, n=8, N=5, M=3, gamma=2)
    snaps = [X.mean(axis=1) for X in ens]
    beta = rng.standard_normal(8)
    rev = AssimilationWindow(win.observations[::-1], win.networks[::-1], win.err)
    assert window_cost(snaps, beta, win, 2) == pytest.approx(window_cost(snaps[::-1], beta, rev, 2), rel=1e-14)


def test_cost_prior_weight():
    assert window_cost([np.array([1.0])], np.array([2.0]), scalar_window(1.0), 1, prior_weight=3.0) == 6.0


# Gauss-Newton directions


def identity_factors(n):
    return PrecisionFactors(np.eye(n), np.ones(n), 0)


def test_mc_direction_zero_innovation():
    rng = np.random.default_rng(2)
    x = rng.normal(0, 2, 6)
    net = ObservationNetwork.full(6)
    win = AssimilationWindow([apply_operator(x, net, 2)], [net], ObsErrorModel(0.3))
    d = gauss_newton_direction_mc([x], np.zeros(6), [identity_factors(6)], win, 2)
    np.testing.assert_array_equal(d, np.zeros(6))


def test_mc_direction_identity_case():
    x = np.zeros(2)
    y = np.array([1.0, -4.0])
    win = AssimilationWindow([y], [ObservationNetwork.full(2)], ObsErrorModel(1.0))
    d = gauss_newton_direction_mc([x], np.zeros(2), [identity_factors(2)], win, 1)
    np.testing.assert_allclose(d, y / 2, rtol=1e-15)


@pytest.mark.parametrize("gamma", [1, 4])
def test_mc_direction_matches_dense_quadratic_minimiser(gamma):
    rng = np.random.default_rng(3)
    ens, win = make_instance(rng, n=12, N=8, M=2, gamma=gamma, p=0.7)
    factors = [fit_precision(X, 3) for X in ens]
    snaps = [X.mean(axis=1) + 0.1 * rng.standard_normal(12) for X in ens]
    beta = rng.standard_normal(12)
    got = gauss_newton_direction_mc(snaps, beta, factors, win, gamma)

    # oracle: stacked least squares  min |beta + a|^2 + sum |d_k - J_k S_k a|^2 / var
    rows, rhs = [np.eye(12)], [-beta]
    for x, F, y, net in zip(snaps, factors, win.observations, win.networks):
        S = np.linalg.inv(F.L) @ np.diag(1 / np.sqrt(F.D_inv_diag))
        step = 1e-6
        J = np.empty((net.m, 12))
        for j in range(12):
            e = np.zeros(12)
            e[j] = step
            J[:, j] = (apply_operator(x + e, net, gamma) - apply_operator(x - e, net, gamma)) / (2 * step)
        rows.append(J @ S / win.err.std_dev)
        rhs.append((y - apply_operator(x, net, gamma)) / win.err.std_dev)
    oracle = np.linalg.lstsq(np.vstack(rows), np.concatenate(rhs), rcond=None)[0]
    np.testing.assert_allclose(got, oracle, rtol=1e-6, atol=1e-9 * np.abs(oracle).max())


def test_mlef_direction_zero_anomalies():
    N = 5
    beta = np.array([1.0, -2.0, 0.5, 0.0, 3.0])
    x = np.array([0.3, 0.1, -0.2, 1.0])
    net = ObservationNetwork.full(4)
    win = AssimilationWindow([np.array([1.0, 2.0, 3.0, 4.0])], [net], ObsErrorModel(0.5))
    d = gauss_newton_direction_mlef([x], beta, [np.zeros((4, N))], win, 2, N)
    # the background term (N-1)/2 |beta + a|^2 alone is minimised at a = -beta
    np.testing.assert_allclose(d, -beta, rtol=1e-15)


def test_mlef_direction_zero_innovation():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((6, 4))
    x = X.mean(axis=1)
    net = ObservationNetwork.full(6)
    win = AssimilationWindow([apply_operator(x, net, 3)], [net], ObsErrorModel(0.2))
    d = gauss_newton_direction_mlef([x], np.zeros(4), [anomalies(X)], win, 3, 4)
    np.testing.assert_array_equal(d, np.zeros(4))


def test_mlef_one_step_equals_closed_form():
    rng = np.random.default_rng(5)
    ens, win = make_instance(rng, n=40, N=20, M=3)
    means = [X.mean(axis=1) for X in ens]
    dXs = [anomalies(X) for X in ens]
    direction = gauss_newton_direction_mlef(means, np.zeros(20), dXs, win, 1, 20)
    w, _ = linear_4denkf_weights(means, dXs, win)
    np.testing.assert_allclose(direction, w, rtol=0, atol=1e-10)


# linear 4D-EnKF


def test_linear_weights_zero_innovation():
    rng = np.random.default_rng(6)
    X = rng.standard_normal((5, 4))
    net = ObservationNetwork.full(5)
    win = AssimilationWindow([X.mean(axis=1)], [net], ObsErrorModel(1.0))
    w, _ = linear_4denkf_weights([X.mean(axis=1)], [anomalies(X)], win)
    np.testing.assert_array_equal(w, np.zeros(4))


def test_linear_weights_scalar_example():
    # anomaly (-1, 1), H = 1, R = 1, d = 1:  [[2,-1],[-1,2]] w = (-1, 1)
    win = scalar_window(1.0)
    w, hess = linear_4denkf_weights([np.array([0.0])], [np.array([[-1.0, 1.0]])], win)
    np.testing.assert_allclose(w, [-1 / 3, 1 / 3], rtol=1e-15)
    np.testing.assert_allclose(hess, [[2.0, -1.0], [-1.0, 2.0]])


def test_linear_weights_dense_least_squares():
    rng = np.random.default_rng(7)
    ens, win = make_instance(rng, n=10, N=6, M=2, p=0.7)
    means = [X.mean(axis=1) for X in ens]
    dXs = [anomalies(X) for X in ens]
    w, _ = linear_4denkf_weights(means, dXs, win)
    rows, rhs = [np.sqrt(5.0) * np.eye(6)], [np.zeros(6)]
    for m, dX, y, net in zip(means, dXs, win.observations, win.networks):
        rows.append(dX[net.observed_indices] / win.err.std_dev)
        rhs.append((y - m[net.observed_indices]) / win.err.std_dev)
    oracle = np.linalg.lstsq(np.vstack(rows), np.concatenate(rhs), rcond=None)[0]
    np.testing.assert_allclose(w, oracle, atol=1e-10)


def test_linear_weights_require_linear_operator():
    with pytest.raises(ValueError):
        linear_4denkf_weights([np.zeros(1)], [np.array([[-1.0, 1.0]])], scalar_window(1.0), gamma=2)


# line search


def test_line_search_exact_newton_step():
    calls = []

    def f(rho):
        calls.append(rho)
        return (1 - rho) ** 2

    assert line_search(f, 1.0, slope=-2.0) == 1.0
    assert calls == [0.0, 1.0]


def test_line_search_increasing_returns_zero():
    assert line_search(lambda r: r + r**2, 1.0) == 0.0


def test_line_search_refinement():
    f = lambda r: (r - 0.3) ** 2  # noqa: E731
    plain = line_search(f, 1.0, slope=-0.6)
    assert f(plain) <= f(0.0)
    refined = line_search(f, 1.0, slope=-0.6, config=LineSearchConfig(refine=True))
    assert f(refined) <= f(0.0)
    assert abs(refined - 0.3) < 1e-2


def test_line_search_never_increases():
    rng = np.random.default_rng(8)
    for _ in range(100):
        c = rng.normal(size=4)
        f = lambda r, c=c: c[0] * np.sin(5 * r * c[1]) + c[2] * r**2 + c[3] * r  # noqa: E731
        assert f(line_search(f, 1.0)) <= f(0.0)


def test_line_search_config_validation():
    with pytest.raises(ValueError):
        LineSearchConfig(c1=1.5)
    with pytest.raises(ValueError):
        LineSearchConfig(shrink=0.0)


# posterior sampling


def test_posterior_identity_hessian():
    alpha = np.array([1.0, -1.0, 2.0])
    draws = sample_posterior_weights(alpha, np.eye(3), 7, np.random.default_rng(9))
    xi = np.random.default_rng(9).standard_normal((3, 7))
    np.testing.assert_allclose(draws, alpha[:, None] + xi, rtol=0, atol=1e-15)


def test_posterior_scaled_hessian_std():
    draws = sample_posterior_weights(np.zeros(2), 4 * np.eye(2), 100_000, np.random.default_rng(10))
    np.testing.assert_allclose(draws.std(axis=1), 0.5, rtol=0.02)


def test_posterior_reproducible():
    H = np.array([[2.0, 0.5], [0.5, 1.0]])
    a = sample_posterior_weights(np.ones(2), H, 5, np.random.default_rng(11))
    b = sample_posterior_weights(np.ones(2), H, 5, np.random.default_rng(11))
    assert np.array_equal(a, b)


def test_posterior_rejects_indefinite():
    with pytest.raises(ValueError):
        sample_posterior_weights(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]), 3, np.random.default_rng(0))


def test_posterior_covariance_converges():
    rng = np.random.default_rng(12)
    A = rng.standard_normal((10, 10))
    H = A @ A.T + 10 * np.eye(10)
    draws = sample_posterior_weights(np.zeros(10), H, 10_000, rng)
    target = np.linalg.inv(H)
    emp = np.cov(draws)
    assert np.max(np.abs(emp - target)) < 0.05 * np.linalg.norm(target, 2)


# solvers


def test_mc_no_iterations_keeps_background_mean():
    rng = np.random.default_rng(13)
    ens, win = make_instance(rng, n=10, N=8)
    Xa, trace = solve_4dvar_mc(ens, win, 1, 2, SolverConfig(max_iters=0), np.random.default_rng(1))
    mean = ens[0].mean(axis=1)
    np.testing.assert_array_equal(trace.analysis_mean, mean)
    S = materialize_sqrt_B(fit_precision(ens[0], 2))
    weights = sample_posterior_weights(np.zeros(10), trace.hessian, 8, np.random.default_rng(1))
    np.testing.assert_allclose(Xa, mean[:, None] + S @ weights, atol=1e-12)


def test_mc_linear_single_time_matches_kalman():
    rng = np.random.default_rng(14)
    ens, win = make_instance(rng, n=40, N=30, std=0.3)
    X = ens[0]
    _, trace = solve_4dvar_mc(ens, win, 1, 2, SolverConfig(max_iters=3), np.random.default_rng(0))
    # oracle: B = (L^T D^-1 L)^-1 by dense inversion, Kalman gain on the full network
    B = np.linalg.inv(precision_matrix(fit_precision(X, 2)))
    xb = X.mean(axis=1)
    d = win.observations[0] - xb
    K = B @ np.linalg.inv(B + win.err.variance * np.eye(40))
    np.testing.assert_allclose(trace.analysis_mean, xb + K @ d, atol=1e-6)


@pytest.mark.parametrize("solver", ["MC", "MLEF"])
@pytest.mark.parametrize("gamma", [1, 3, 5, 7])
def test_cost_monotone(solver, gamma):
    for seed in range(5):
        rng = np.random.default_rng(100 + seed)
        ens, win = make_instance(rng, n=40, N=20, M=2, gamma=gamma, p=0.7, std=0.05, spread=2.0)
        cfg = SolverConfig(max_iters=10, method=solver)
        if solver == "MC":
            _, trace = solve_4dvar_mc(ens, win, gamma, 2, cfg, rng)
        else:
            _, trace = solve_4dvar_mlef(ens, win, gamma, cfg, rng)
        costs = np.array(trace.cost_per_iter)
        assert len(costs) == 11
        assert np.all(np.diff(costs) <= 0)
        assert len(trace.alpha_a) == (40 if solver == "MC" else 20)


def test_mlef_zero_anomalies_returns_background():
    X = np.tile(np.linspace(-1, 1, 6)[:, None], (1, 4))
    net = ObservationNetwork.full(6)
    win = AssimilationWindow([np.ones(6)], [net], ObsErrorModel(0.1))
    Xa, trace = solve_4dvar_mlef([X], win, 2, SolverConfig(method="MLEF"), np.random.default_rng(0))
    np.testing.assert_array_equal(Xa, X)
    np.testing.assert_array_equal(trace.analysis_mean, X[:, 0])


def test_mlef_linear_one_step_is_closed_form():
    rng = np.random.default_rng(15)
    ens, win = make_instance(rng, n=40, N=20, M=3)
    _, trace = solve_4dvar_mlef(ens, win, 1, SolverConfig(max_iters=1, method="MLEF"), rng)
    assert trace.step_lengths == [1.0]
    w, _ = linear_4denkf_weights([X.mean(axis=1) for X in ens], [anomalies(X) for X in ens], win)
    np.testing.assert_allclose(trace.alpha_a, w, atol=1e-10)


def test_linear_4denkf_solver_matches_mlef_analysis():
    rng = np.random.default_rng(16)
    ens, win = make_instance(rng, n=20, N=10, M=1)
    _, lin = solve_linear_4denkf(ens, win, 1, np.random.default_rng(0))
    _, gn = solve_4dvar_mlef(ens, win, 1, SolverConfig(max_iters=1, method="MLEF"), np.random.default_rng(0))
    np.testing.assert_allclose(lin.analysis_mean, gn.analysis_mean, atol=1e-10)


def test_repropagate_requires_trajectory():
    rng = np.random.default_rng(17)
    ens, win = make_instance(rng, n=8, N=5)
    with pytest.raises(ValueError):
        solve_4dvar_mc(ens, win, 1, 2, SolverConfig(repropagate_inner=True), rng)


def test_repropagate_inner_monotone():
    rng = np.random.default_rng(18)
    ens, win = make_instance(rng, n=8, N=6, M=1, gamma=2)
    shift = ens[1].mean(axis=1) - ens[0].mean(axis=1)
    cfg = SolverConfig(max_iters=4, repropagate_inner=True)
    _, trace = solve_4dvar_mc(ens, win, 2, 2, cfg, rng, trajectory=lambda x0: [x0, x0 + shift])
    assert np.all(np.diff(trace.cost_per_iter) <= 0)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(19)
    for gamma in (1, 3, 6):
        ens, win = make_instance(rng, n=10, N=8, M=1, gamma=gamma, std=0.5)
        factors = [fit_precision(X, 2) for X in ens]
        bases = [materialize_sqrt_B(F) for F in factors]
        snaps = [X.mean(axis=1) for X in ens]
        beta = 0.3 * rng.standard_normal(10)
        from adjfree.assimilation import _gn_step

        _, _, grad = _gn_step(snaps, beta, bases, win, gamma, 1.0)

        def J(a):
            return window_cost([x + S @ a for x, S in zip(snaps, bases)], beta + a, win, gamma)

        h = 1e-6
        fd = np.array([(J(h * e) - J(-h * e)) / (2 * h) for e in np.eye(10)])
        np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-6 * np.abs(fd).max())
