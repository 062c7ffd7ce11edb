"""Multi-run experiments: ground truth, measurements, BP and RMSE metrics."""
from __future__ import annotations

import os
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import bp_engine as bp
from .config import ScenarioConfig, n_pairs
from .measurement import exchange_schedule, simulate_exchange
from .messages import Gaussian, GaussianMixture, NumericalError
from .models import (
    STREAM_NOISE,
    STREAM_PARTICLES,
    STREAM_PRIOR,
    STREAM_TRUTH,
    AgentState,
    ClockState,
    EvolutionParams,
    LocationState,
    PriorSpec,
    evolve_clock,
    evolve_location,
    kinematic_matrices,
    make_rng,
)

MAX_PAYLOAD = 16


@dataclass
class Truth:
    clocks: np.ndarray   # (N, I, 2) rows (nu, lam)
    locs: np.ndarray     # (N, I, 4)
    attempts: int

    def state(self, n: int, i: int) -> AgentState:
        return AgentState(ClockState.from_array(self.clocks[n, i]),
                          LocationState.from_array(self.locs[n, i]))


@dataclass
class RunTrace:
    """Estimates of one run. The ``q`` axis holds iterations 0..Q when
    per-iteration beliefs were requested, else only the final iteration."""
    run: int
    est_theta: np.ndarray      # (N, nq, I, 2)
    est_x: np.ndarray          # (N, nq, I, 4)
    alpha_hat: np.ndarray      # (N, nq, I)
    beta_hat: np.ndarray       # (N, nq, I)
    trace_theta: np.ndarray    # (N, I) covariance traces of the final beliefs
    trace_x: np.ndarray        # (N, I)
    trace_pred_theta: np.ndarray  # (N, I) covariance traces of the predictions
    payload_total: np.ndarray  # (N, I) reals sent per step
    payload_max: np.ndarray    # (N,) largest single-link single-iteration payload
    n_links: np.ndarray        # (N,)


@dataclass
class Metrics:
    rows: list   # tuples (n, q, rmse_p, rmse_pdot, rmse_beta_us, rmse_alpha_ppm)
    mode: str
    runs: int
    seed: int


# ---------------------------------------------------------------- topology

def build_connectivity(positions, radius: float) -> list[tuple[int, int]]:
    """Pairs ``(i, j)``, ``i < j``, whose distance is at most ``radius``."""
    pos = np.asarray(positions, dtype=float)
    dist = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
    n = len(pos)
    return [(i, j) for i in range(n) for j in range(i + 1, n) if dist[i, j] <= radius]


def check_initialization_reach(edges, n_agents: int, temporal_refs) -> set[int]:
    """Agents connected to a temporal reference (breadth-first search)."""
    adj = [[] for _ in range(n_agents)]
    for i, j in edges:
        adj[i].append(j)
        adj[j].append(i)
    seen = set(temporal_refs)
    todo = deque(temporal_refs)
    while todo:
        i = todo.popleft()
        for j in adj[i]:
            if j not in seen:
                seen.add(j)
                todo.append(j)
    return seen


def _connected(edges, n):
    return len(check_initialization_reach(edges, n, [0])) == n


# ------------------------------------------------------------- ground truth

def generate_truth(cfg: ScenarioConfig) -> Truth:
    """One realization of all agent states, shared by every run.

    Trajectories are redrawn until all agents stay inside the area and the
    network is connected at every step (up to ``truth_max_attempts``; the
    last draw is kept otherwise).
    """
    N, I = cfg.steps, cfg.n_agents
    evo = EvolutionParams(cfg.sigma1, cfg.sigma2, max(cfg.truth_sigma_u2, 0.0), cfg.T)
    prior = PriorSpec(cfg.clock_mean, cfg.sigma_nu, cfg.sigma_lam)
    spatial, temporal = set(cfg.spatial_refs), set(cfg.temporal_refs)
    for attempt in range(cfg.truth_max_attempts):
        rng = make_rng(cfg.seed, STREAM_TRUTH, attempt)
        clocks = np.empty((N, I, 2))
        locs = np.empty((N, I, 4))
        for i in range(I):
            c = np.asarray(cfg.clock_mean) + rng.standard_normal(2) * [prior.sigma_nu, prior.sigma_lam]
            clocks[0, i] = (0.0, 1.0) if i in temporal else c
            locs[0, i] = [*cfg.positions[i], *cfg.velocities[i]]
            if i in spatial:
                locs[0, i, 2:] = 0.0
        for n in range(1, N):
            for i in range(I):
                if i in temporal:
                    clocks[n, i] = clocks[n - 1, i]
                else:
                    clocks[n, i] = evolve_clock(ClockState.from_array(clocks[n - 1, i]), evo,
                                                rng).as_array()
                if i in spatial:
                    locs[n, i] = locs[n - 1, i]
                else:
                    locs[n, i] = evolve_location(LocationState.from_array(locs[n - 1, i]), evo,
                                                 rng).as_array()
        p = locs[:, :, :2]
        inside = np.all(p >= 0) and np.all(p[..., 0] <= cfg.area[0]) and np.all(p[..., 1] <= cfg.area[1])
        if inside and all(_connected(build_connectivity(p[n], cfg.radius), I) for n in range(N)):
            break
    return Truth(clocks, locs, attempt + 1)


# ----------------------------------------------------------------- one run

def engine_config(cfg: ScenarioConfig) -> bp.EngineConfig:
    return bp.EngineConfig(Q=cfg.Q, tau=cfg.tau, tau1=cfg.tau1, tau2=cfg.tau2,
                           L_total=cfg.L_total, mu_d=cfg.mu_d, sigma_d=cfg.sigma_d,
                           sigma_v=cfg.sigma_v, min_ess=cfg.min_ess,
                           belief_includes_prediction=cfg.belief_includes_prediction,
                           constant_uninformative=cfg.constant_uninformative)


def _pins(cfg: ScenarioConfig, mode: str):
    I = cfg.n_agents
    clock = set(range(I)) if mode == "clkref" else set(cfg.temporal_refs)
    loc = set(range(I)) if mode == "locref" else set(cfg.spatial_refs)
    return clock, loc


def _pinned_clock(theta):
    return Gaussian(theta, bp.CLOCK_EPS * np.eye(2))


def _pinned_loc(x):
    return GaussianMixture(np.ones(1), np.asarray(x)[None], (bp.POSITION_EPS * np.eye(4))[None])


def initial_beliefs(cfg: ScenarioConfig, truth: Truth, run: int, mode: str):
    clock_pins, loc_pins = _pins(cfg, mode)
    prior = PriorSpec(cfg.clock_mean, cfg.sigma_nu, cfg.sigma_lam, sigma_x=cfg.sigma_x,
                      sigma_xdot=cfg.sigma_xdot)
    out = []
    for i in range(cfg.n_agents):
        if i in clock_pins:
            bt = _pinned_clock(truth.clocks[0, i])
        else:
            bt = Gaussian(np.asarray(cfg.clock_mean), prior.clock_cov)
        if i in loc_pins:
            bx = _pinned_loc(truth.locs[0, i])
        else:
            rng = make_rng(cfg.seed, STREAM_PRIOR, run, i)
            eps = rng.standard_normal(4) * np.sqrt(np.diag(prior.loc_cov))
            bx = GaussianMixture(np.ones(1), (truth.locs[0, i] + eps)[None], prior.loc_cov[None])
        out.append(bp.AgentBeliefs(bt, bx))
    return out


def simulate_links(cfg: ScenarioConfig, truth: Truth, run: int, n: int, participants):
    """Time stamps of every link between participating agents at step ``n``."""
    edges = build_connectivity(truth.locs[n, :, :2], cfg.radius)
    links = {}
    slot = (cfg.K + 1) * cfg.packet_spacing
    for i, j in edges:
        if i not in participants or j not in participants:
            continue
        # Fixed slot per pair so schedules do not depend on the topology.
        rank = i * cfg.n_agents - i * (i + 1) // 2 + (j - i - 1)
        assert rank < n_pairs(cfg.n_agents)
        t0 = n * cfg.T + rank * slot
        sched = exchange_schedule(t0, cfg.K, cfg.K, cfg.packet_spacing)
        rng = make_rng(cfg.seed, STREAM_NOISE, run, n, i, j)
        links[(i, j)] = simulate_exchange(truth.state(n, i), truth.state(n, j), cfg.K, cfg.K,
                                          cfg.sigma_v, sched, rng)
    return links


def run_single(cfg: ScenarioConfig, truth: Truth, run: int, mode: str | None = None) -> RunTrace:
    mode = mode or cfg.mode
    ecfg = engine_config(cfg)
    N, I = cfg.steps, cfg.n_agents
    nq = cfg.Q + 1 if cfg.per_iteration_metrics else 1
    clock_pins, loc_pins = _pins(cfg, mode)
    temporal = clock_pins
    G1, G2 = kinematic_matrices(cfg.T)
    Sigma_u2 = cfg.sigma_u2 ** 2 * G2
    Sigma_u1 = [np.diag([cfg.sigma1 ** 2, cfg.sigma2 ** 2])] * I

    tr = RunTrace(run, np.zeros((N, nq, I, 2)), np.zeros((N, nq, I, 4)), np.zeros((N, nq, I)),
                  np.zeros((N, nq, I)), np.zeros((N, I)), np.zeros((N, I)), np.zeros((N, I)),
                  np.zeros((N, I), dtype=int), np.zeros(N, dtype=int), np.zeros(N, dtype=int))
    beliefs = initial_beliefs(cfg, truth, run, mode)
    for n in range(N):
        edges = build_connectivity(truth.locs[n, :, :2], cfg.radius)
        participants = check_initialization_reach(edges, I, sorted(temporal))
        links = simulate_links(cfg, truth, run, n, participants)
        pin_c = {i: _pinned_clock(truth.clocks[n, i]) for i in clock_pins}
        pin_l = {i: _pinned_loc(truth.locs[n, i]) for i in loc_pins}

        def rng_for(q, i, j, _n=n):
            return make_rng(cfg.seed, STREAM_PARTICLES, run, _n, q, i, j + 2)

        try:
            res = bp.run_time_step(beliefs, links, ecfg, Sigma_u1, G1, Sigma_u2, rng_for,
                                   pin_c, pin_l, predict=n > 0,
                                   per_iteration=cfg.per_iteration_metrics)
        except NumericalError as exc:
            raise NumericalError(f"{exc} (run {run}, step {n})") from exc
        beliefs = res.beliefs
        stages = res.per_iteration if cfg.per_iteration_metrics else [res.beliefs]
        for q, bs in enumerate(stages):
            for i, b in enumerate(bs):
                try:
                    th, x, a, be = bp.estimate(b)
                except NumericalError as exc:
                    raise NumericalError(f"{exc} (run {run}, step {n}, agent {i})") from exc
                tr.est_theta[n, q, i] = th.as_array()
                tr.est_x[n, q, i] = x.as_array()
                tr.alpha_hat[n, q, i] = a
                tr.beta_hat[n, q, i] = be
        for i, b in enumerate(beliefs):
            tr.trace_theta[n, i] = np.trace(b.b_theta.cov)
            tr.trace_x[n, i] = np.trace(bp.moment_match_mixture(b.b_x).cov)
            tr.trace_pred_theta[n, i] = np.trace(res.predictions[i].b_theta.cov)
        for it in res.payloads:
            for (i, j), v in it.items():
                tr.payload_total[n, i] += v
                tr.payload_max[n] = max(tr.payload_max[n], v)
        tr.n_links[n] = len(links)
    return tr


def _worker(args):
    cfg, truth, run, mode = args
    return run_single(cfg, truth, run, mode)


def worker_count(requested: int | None = None) -> int:
    """Workers from ``COSLAS_THREADS`` (0 or unset means one per CPU)."""
    if requested is None:
        raw = os.environ.get("COSLAS_THREADS", "0").strip() or "0"
        try:
            requested = int(raw)
        except ValueError as exc:
            raise ValueError(f"COSLAS_THREADS must be an integer, got {raw!r}") from exc
    if requested < 0:
        raise ValueError("COSLAS_THREADS must be >= 0")
    return requested or (os.cpu_count() or 1)


def run_scenario(cfg: ScenarioConfig, mode: str | None = None, workers: int | None = None):
    """All runs of one mode. Returns ``(truth, traces)``; traces are in run order
    and do not depend on the number of workers."""
    mode = mode or cfg.mode
    truth = generate_truth(cfg)
    jobs = [(cfg, truth, r, mode) for r in range(cfg.runs)]
    w = min(worker_count(workers), cfg.runs)
    if w <= 1:
        traces = [_worker(j) for j in jobs]
    else:
        import multiprocessing as mp
        with mp.get_context("fork").Pool(w) as pool:
            traces = pool.map(_worker, jobs)
    return truth, traces


# ------------------------------------------------------------------ metrics

def compute_metrics(cfg: ScenarioConfig, truth: Truth, traces, mode: str | None = None) -> Metrics:
    """RMSE per step (and iteration) over runs and non-reference agents.

    Clock errors exclude the temporal references, location errors the spatial
    references. ``beta`` is reported in microseconds and ``alpha`` in ppm.
    """
    mode = mode or cfg.mode
    I = cfg.n_agents
    clk = [i for i in range(I) if i not in cfg.temporal_refs]
    loc = [i for i in range(I) if i not in cfg.spatial_refs]
    lam = truth.clocks[:, :, 1]
    alpha = 1.0 / lam
    beta = truth.clocks[:, :, 0] / lam
    est_x = np.stack([t.est_x for t in traces])        # (R, N, nq, I, 4)
    a_hat = np.stack([t.alpha_hat for t in traces])    # (R, N, nq, I)
    b_hat = np.stack([t.beta_hat for t in traces])
    dx = est_x - truth.locs[None, :, None]
    nq = est_x.shape[2]

    def rmse(e2, idx):
        if not idx:
            return 0.0
        return float(np.sqrt(np.mean(e2[..., idx])))

    rows = []
    for n in range(cfg.steps):
        for k in range(nq):
            q = k if nq > 1 else cfg.Q
            e = dx[:, n, k]
            rows.append((n, q,
                         rmse(np.sum(e[..., :2] ** 2, -1), loc),
                         rmse(np.sum(e[..., 2:] ** 2, -1), loc),
                         rmse(((b_hat[:, n, k] - beta[n]) * 1e6) ** 2, clk),
                         rmse(((a_hat[:, n, k] - alpha[n]) * 1e6) ** 2, clk)))
    return Metrics(rows, mode, cfg.runs, cfg.seed)


def trace_records(cfg: ScenarioConfig, truth: Truth, traces):
    """One flat record per (run, n, agent) with truth and final estimates."""
    for t in traces:
        for n in range(cfg.steps):
            for i in range(cfg.n_agents):
                lam = truth.clocks[n, i, 1]
                yield {
                    "run": t.run, "n": n, "agent": i,
                    "true_nu": float(truth.clocks[n, i, 0]), "true_lambda": float(lam),
                    "true_alpha": float(1 / lam), "true_beta": float(truth.clocks[n, i, 0] / lam),
                    "true_x": [float(v) for v in truth.locs[n, i]],
                    "est_nu": float(t.est_theta[n, -1, i, 0]),
                    "est_lambda": float(t.est_theta[n, -1, i, 1]),
                    "alpha_hat": float(t.alpha_hat[n, -1, i]),
                    "beta_hat": float(t.beta_hat[n, -1, i]),
                    "est_x": [float(v) for v in t.est_x[n, -1, i]],
                    "trace_theta": float(t.trace_theta[n, i]),
                    "trace_x": float(t.trace_x[n, i]),
                    "payload_total": int(t.payload_total[n, i]),
                }
