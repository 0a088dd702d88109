"""Lorenz-96 twin experiments: spin-up, assimilation cycles and RMSE bookkeeping."""
import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .assimilation import (
    AssimilationWindow,
    LineSearchConfig,
    SolverConfig,
    solve_4dvar_mc,
    solve_4dvar_mlef,
    solve_linear_4denkf,
)
from .ensemble import inflate
from .model import ModelParams, propagate, propagate_ensemble
from .observation import ObsErrorModel, sample_network, synthesize_observation

log = logging.getLogger(__name__)

RESULTS_HEADER = ["method", "gamma", "N", "r", "p", "W", "replication", "seed", "rmse", "wall_time_s"]
TRACE_HEADER = ["replication", "cycle", "k", "lambda_k", "cost_final"]


class SolverSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    c1: float = Field(1e-4, gt=0, lt=1)
    shrink: float = Field(0.5, gt=0, lt=1)
    max_backtracks: int = Field(20, ge=0)
    refine: bool = False
    convergence_tol: float = Field(0.0, ge=0)
    var_floor: float = Field(1e-8, gt=0)
    repropagate_inner: bool = False


class ExperimentConfig(BaseModel):
    """Every knob of a twin experiment; JSON config files mirror these names."""

    model_config = ConfigDict(extra="forbid")

    n: int = Field(40, ge=4)
    F: float = 8.0
    abs_tol: float = Field(1e-7, gt=0)
    rel_tol: float = Field(1e-7, ge=0)
    N: int = Field(20, ge=2)
    method: Literal["MC", "MLEF", "LINEAR_4DENKF", "NODA"] = "MC"
    gamma: int = Field(1, ge=1, le=7)
    p: float = Field(1.0, gt=0, le=1)
    r: int = Field(2, ge=0)
    U: int = Field(10, ge=0)
    M_steps: int = Field(500, ge=1)
    W: int = Field(2, ge=1)
    dt_obs: float = Field(0.1, gt=0)
    obs_std: float = Field(0.01, gt=0)
    init_perturb_std: float = Field(0.05, ge=0)
    spinup_pre: float = Field(20.0, ge=0)
    spinup_post: float = Field(10.0, ge=0)
    inflation: float = Field(1.0, ge=1)
    divergence_bound: float = Field(1e3, gt=0)
    replications: int = Field(5, ge=1)
    seed: int = Field(0, ge=0)
    solver: SolverSettings = Field(default_factory=SolverSettings)

    def model_params(self):
        return ModelParams(n=self.n, forcing=self.F, abs_tol=self.abs_tol, rel_tol=self.rel_tol)

    def solver_config(self):
        s = self.solver
        return SolverConfig(
            max_iters=self.U,
            line_search=LineSearchConfig(c1=s.c1, shrink=s.shrink, max_backtracks=s.max_backtracks, refine=s.refine),
            convergence_tol=s.convergence_tol,
            method="MLEF" if self.method == "MLEF" else "MC",
            var_floor=s.var_floor,
            repropagate_inner=s.repropagate_inner,
        )


@dataclass
class CycleMetrics:
    step: int
    l2_error: float
    cost_trace: List[float] = field(default_factory=list)


@dataclass
class RunSummary:
    rmse: float
    metrics: List[CycleMetrics]
    config: ExperimentConfig
    replication: int = 0
    seed: int = 0
    wall_time: float = 0.0
    error: Optional[str] = None


def rmse(metrics):
    """Root mean square of the per-step L2 errors."""
    if not metrics:
        raise ValueError("rmse of an empty metrics list")
    lam = np.array([m.l2_error for m in metrics])
    return float(np.sqrt(np.mean(lam**2)))


def _streams(seed):
    # independent streams keep truth and observations identical across methods
    spin, obs, net, post = np.random.SeedSequence(seed).spawn(4)
    return tuple(np.random.default_rng(s) for s in (spin, obs, net, post))


def spin_up(params, rng, N, perturb_std=0.05, spinup_pre=20.0, spinup_post=10.0):
    """Truth, background and initial ensemble on the attractor.

    A random state is integrated for ``spinup_pre`` to give the truth. The
    background is the truth plus ``N(0, perturb_std^2 I)`` integrated for
    ``spinup_post``; ensemble members perturb that background the same way
    and are integrated another ``spinup_post``. The truth and background are
    carried along so all three refer to the same time.
    """
    x = params.forcing + rng.standard_normal(params.n)
    truth = propagate(x, spinup_pre, params)
    background = truth + perturb_std * rng.standard_normal(params.n)
    Z = propagate_ensemble(np.column_stack([truth, background]), spinup_post, params)
    truth, background = Z[:, 0], Z[:, 1]
    pool = background[:, None] + perturb_std * rng.standard_normal((params.n, N))
    Z = propagate_ensemble(np.column_stack([truth, background, pool]), spinup_post, params)
    return Z[:, 0], Z[:, 1], Z[:, 2:]


def _solve(cfg, ensembles, window, solver_cfg, rng, trajectory):
    if cfg.method == "MC":
        return solve_4dvar_mc(ensembles, window, cfg.gamma, cfg.r, solver_cfg, rng, trajectory)
    if cfg.method == "MLEF":
        return solve_4dvar_mlef(ensembles, window, cfg.gamma, solver_cfg, rng, trajectory)
    return solve_linear_4denkf(ensembles, window, cfg.gamma, rng)


def run_experiment(cfg, replication=0):
    """Run one replication of ``cfg`` with seed ``cfg.seed + replication``.

    Failures inside the cycle loop are caught; the summary then carries the
    metrics gathered so far and the error message.
    """
    seed = cfg.seed + replication
    start = time.perf_counter()
    params = cfg.model_params()
    spin_rng, obs_rng, net_rng, post_rng = _streams(seed)
    truth, background, X = spin_up(
        params, spin_rng, cfg.N, cfg.init_perturb_std, cfg.spinup_pre, cfg.spinup_post
    )
    err = ObsErrorModel(cfg.obs_std)
    solver_cfg = cfg.solver_config()
    dt = cfg.dt_obs

    def trajectory(x0):
        states = [x0]
        for _ in range(cfg.W - 1):
            states.append(propagate(states[-1], dt, params))
        return states

    metrics = []
    error = None
    step = 0
    try:
        for cycle in range(cfg.M_steps):
            if cfg.method == "NODA":
                Z = np.column_stack([truth, background])
                for j in range(cfg.W):
                    metrics.append(CycleMetrics(step, float(np.linalg.norm(Z[:, 0] - Z[:, 1]))))
                    step += 1
                    Z = propagate_ensemble(Z, dt, params)
                truth, background = Z[:, 0], Z[:, 1]
                continue

            X = inflate(X, cfg.inflation)
            truths = [truth]
            ensembles = [X]
            Z = np.column_stack([truth, X])
            for _ in range(cfg.W - 1):
                Z = propagate_ensemble(Z, dt, params)
                truths.append(Z[:, 0])
                ensembles.append(Z[:, 1:])
            # a fresh random network at every observation time
            nets = [sample_network(cfg.p, cfg.n, net_rng) for _ in truths]
            observations = [synthesize_observation(xt, net, cfg.gamma, err, obs_rng) for xt, net in zip(truths, nets)]
            window = AssimilationWindow(observations, nets, err, dt)
            Xa, trace = _solve(cfg, ensembles, window, solver_cfg, post_rng, trajectory)
            # states far off the attractor make the integrator crawl; stop early
            if not np.max(np.abs(Xa)) < cfg.divergence_bound:
                lam = float(np.linalg.norm(truths[0] - trace.analysis_mean))
                metrics.append(CycleMetrics(step, lam, list(trace.cost_per_iter)))
                step += 1
                raise RuntimeError(f"analysis ensemble left |x| < {cfg.divergence_bound:g} at cycle {cycle}")

            Z = np.column_stack([trace.analysis_mean, Xa])
            for j in range(cfg.W):
                lam = float(np.linalg.norm(truths[j] - Z[:, 0]))
                costs = list(trace.cost_per_iter) if j == 0 else []
                metrics.append(CycleMetrics(step, lam, costs))
                step += 1
                Z = propagate_ensemble(Z, dt, params)
            X = Z[:, 1:]
            truth = propagate(truths[-1], dt, params)
            log.debug("cycle %d lambda %.4g", cycle, metrics[-cfg.W].l2_error)
    except (RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
        error = f"{type(exc).__name__}: {exc}"
        log.warning("replication %d aborted at step %d: %s", replication, step, error)

    value = rmse(metrics) if metrics else math.nan
    return RunSummary(
        rmse=value,
        metrics=metrics,
        config=cfg,
        replication=replication,
        seed=seed,
        wall_time=time.perf_counter() - start,
        error=error,
    )


def run_replications(cfg):
    return [run_experiment(cfg, rep) for rep in range(cfg.replications)]


def _run_job(job):
    cfg, rep = job
    return run_experiment(cfg, rep)


def sweep(configs, jobs=1):
    """Run every replication of every config; output order follows the input.

    ``jobs > 1`` farms replications out to worker processes. Each replication
    owns its seed, so results do not depend on ``jobs``.
    """
    work = [(cfg, rep) for cfg in configs for rep in range(cfg.replications)]
    if jobs <= 1:
        return [_run_job(w) for w in work]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_job, work))


def format_float(x):
    """Shortest round-trip decimal representation."""
    return repr(float(x))


def results_rows(summaries, timing=False):
    for s in summaries:
        c = s.config
        yield [
            c.method,
            str(c.gamma),
            str(c.N),
            str(c.r),
            format_float(c.p),
            str(c.W),
            str(s.replication),
            str(s.seed),
            format_float(s.rmse),
            format_float(s.wall_time) if timing else "",
        ]


def write_csv(path, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def write_results(path, summaries, timing=False):
    write_csv(path, RESULTS_HEADER, results_rows(summaries, timing))


def write_trace(path, summaries):
    rows = []
    for s in summaries:
        cycle_len = s.config.W
        for m in s.metrics:
            cost = format_float(m.cost_trace[-1]) if m.cost_trace else ""
            rows.append([str(s.replication), str(m.step // cycle_len), str(m.step), format_float(m.l2_error), cost])
    write_csv(path, TRACE_HEADER, rows)


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return ExperimentConfig.model_validate(json.load(fh))
