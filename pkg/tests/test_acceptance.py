"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Tolerances are pinned here. Oracles live in ``oracles.py`` and are independent
of the package's numerical routines.
"""
import time

import numpy as np
import pytest

from coslas import bp_engine as bp
from coslas import cli
from coslas import simulator as sim
from coslas.config import ScenarioConfig
from coslas.measurement import (
    approx_loglikelihood,
    build_matrices,
    exact_log_normalizer,
    exact_loglikelihood,
    exchange_schedule,
    simulate_exchange,
)
from coslas.messages import Gaussian, GaussianMixture
from coslas.models import AgentState, ClockParams, ClockState, LocationState, params_to_state

from oracles import (
    JointGaussian,
    closed_form_clock,
    closed_form_distance,
    distance_moments_mc,
    gaussian_product_2d,
    matrices,
)

SIGMA_V = 1e-8


@pytest.fixture
def report(capsys):
    def _report(k, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {k:>2} {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return _report


def agent(clock, p):
    return AgentState(clock, LocationState(np.asarray(p, float), np.zeros(2)))


def random_link(rng, K_ij, K_ji, sigma_v=SIGMA_V, d=None, skew_sd=1e-4):
    ci = ClockState(rng.normal(0, 1), 1 + rng.normal(0, skew_sd))
    cj = ClockState(rng.normal(0, 1), 1 + rng.normal(0, skew_sd))
    pi = rng.uniform(0, 50, 2)
    pj = rng.uniform(0, 50, 2) if d is None else pi + d * np.array([0.6, 0.8])
    blk = simulate_exchange(agent(ci, pi), agent(cj, pj), K_ij, K_ji, sigma_v,
                            exchange_schedule(rng.uniform(0, 30), K_ij, K_ji), rng)
    return blk, ci, cj, float(np.linalg.norm(pi - pj))


def test_1_likelihood_equivalence(report):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        K_ij, K_ji = rng.integers(1, 11, 2)
        ci = params_to_state(ClockParams(1.0, rng.normal(0, 1)))
        cj = params_to_state(ClockParams(1.0, rng.normal(0, 1)))
        blk = simulate_exchange(agent(ci, rng.uniform(0, 50, 2)), agent(cj, rng.uniform(0, 50, 2)),
                                K_ij, K_ji, SIGMA_V,
                                exchange_schedule(rng.uniform(0, 30), K_ij, K_ji), rng)
        # Evaluate away from the truth so both exponents are well above round-off.
        ti = params_to_state(ClockParams(1.0, rng.normal(0, 1)))
        tj = params_to_state(ClockParams(1.0, rng.normal(0, 1)))
        d = rng.uniform(0, 60)
        exact = exact_loglikelihood(blk, ti, tj, d, SIGMA_V) - exact_log_normalizer(blk, ti, tj, SIGMA_V)
        approx = approx_loglikelihood(blk, ti, tj, d, SIGMA_V)
        worst = max(worst, abs(exact - approx) / abs(exact))
    dt = time.perf_counter() - t0
    report(1, worst < 1e-9 and dt < 1.0, f"likelihood equivalence: max rel err {worst:.2e}, {dt:.2f} s")


def test_2_distance_moments_vs_monte_carlo(report):
    rng = np.random.default_rng(102)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        mi = rng.uniform(0, 50, 2)
        u = rng.standard_normal(2)
        dist = rng.uniform(10, 50)
        mj = mi + dist * u / np.linalg.norm(u)
        covs = []
        for _ in range(2):
            A = rng.standard_normal((2, 2))
            covs.append(A @ A.T + 0.1 * np.eye(2))
        # Scale so that the spread of p_i - p_j is at most a tenth of the distance.
        scale = (0.1 * dist * rng.uniform(0.2, 1.0)) ** 2 / np.linalg.eigvalsh(covs[0] + covs[1]).max()
        Si, Sj = covs[0] * scale, covs[1] * scale
        out = bp.zeta_phi_d(GaussianMixture.single(Gaussian(mi, Si)),
                            GaussianMixture.single(Gaussian(mj, Sj)))
        m, v = distance_moments_mc(mi, Si, mj, Sj, 1_000_000, rng)
        worst = max(worst, abs(out.mean[0] - m) / m, abs(out.cov[0, 0] - v) / v)
    dt = time.perf_counter() - t0
    report(2, worst < 0.02 and dt < 60, f"distance moments vs MC: max rel err {worst:.4f}, {dt:.1f} s")


def test_3_distance_message(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(103)
    blk, ci, cj, d = random_link(rng, 10, 10, sigma_v=0.0, d=20.0)
    pin = 1e-18 * np.eye(2)
    out = bp.zeta_f_d(build_matrices(blk), Gaussian(ci.as_array(), pin),
                      Gaussian(cj.as_array(), pin), SIGMA_V)
    err_noiseless = abs(out.mean[0] - d)
    worst = 0.0
    for _ in range(20):
        blk, ci, cj, _ = random_link(rng, 2, 2)
        Si = np.diag([1e-12, 1e-12]) * 10 ** rng.uniform(0, 2)
        Sj = np.diag([1e-12, 1e-12]) * 10 ** rng.uniform(0, 2)
        mi = ci.as_array() + rng.normal(0, 1e-6, 2)
        mj = cj.as_array() + rng.normal(0, 1e-6, 2)
        A, B, a = matrices(blk)
        mean, var = closed_form_distance(A, B, a, mi, Si, mj, Sj, SIGMA_V)
        got = bp.zeta_f_d(build_matrices(blk), Gaussian(mi, Si), Gaussian(mj, Sj), SIGMA_V)
        worst = max(worst, abs(got.mean[0] - mean) / abs(mean), abs(got.cov[0, 0] - var) / var)
    dt = time.perf_counter() - t0
    ok = err_noiseless < 0.01 and worst < 1e-6 and dt < 1.0
    report(3, ok, f"distance message: noiseless err {err_noiseless:.2e} m, "
                  f"oracle rel err {worst:.2e}, {dt:.2f} s")


def test_4_clock_message(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(104)
    worst_mean = worst_cov = 0.0
    for _ in range(20):
        K_ij, K_ji = rng.integers(1, 4, 2)
        blk, ci, cj, d = random_link(rng, K_ij, K_ji)
        Sj = np.diag([1e-12, 1e-12]) * 10 ** rng.uniform(0, 2)
        mj = cj.as_array() + rng.normal(0, 1e-6, 2)
        vd = 10 ** rng.uniform(-2, 2)
        A, B, a = matrices(blk)
        mean, cov = closed_form_clock(A, B, a, mj, Sj, d, vd, SIGMA_V)
        got = bp.zeta_f_theta(build_matrices(blk), Gaussian(mj, Sj), Gaussian([d], [[vd]]), SIGMA_V)
        sd = np.sqrt(np.diag(cov))
        worst_mean = max(worst_mean, np.max(np.abs(got.mean - mean) / np.abs(mean)))
        worst_cov = max(worst_cov, np.max(np.abs(got.cov - cov) / np.outer(sd, sd)))
    dt = time.perf_counter() - t0
    ok = worst_mean < 1e-6 and worst_cov < 1e-6 and dt < 1.0
    report(4, ok, f"clock message: mean rel err {worst_mean:.2e}, "
                  f"cov err {worst_cov:.2e} (sd units), {dt:.2f} s")


def test_5_particle_product(report):
    t0 = time.perf_counter()
    passed = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        factors = []
        for _ in range(rng.integers(2, 4)):
            A = rng.standard_normal((2, 2))
            factors.append(Gaussian(rng.normal(0, 2, 2), A @ A.T + np.eye(2)))
        pts, w = bp.particle_product(factors, 10_000, np.random.default_rng(1000 + seed))
        m, C = gaussian_product_2d([f.mean for f in factors], [f.cov for f in factors])
        ess = 1.0 / np.sum(w ** 2)
        mean_hat = w @ pts
        var_hat = w @ (pts - mean_hat) ** 2
        var = np.diag(C)
        ok_mean = np.all(np.abs(mean_hat - m) < 3 * np.sqrt(var / ess))
        ok_var = np.all(np.abs(var_hat - var) < 3 * var * np.sqrt(2 / ess))
        passed += bool(ok_mean and ok_var)
    dt = time.perf_counter() - t0
    report(5, passed >= 48 and dt < 60, f"particle product: {passed}/50 seeds within 3 SE, {dt:.1f} s")


def test_6_tree_exactness(report):
    rng = np.random.default_rng(106)
    n = 5
    pos = np.array([[20.0 * i, 3.0 * i] for i in range(n)])
    clocks = [ClockState(0.0, 1.0)] + [ClockState(rng.normal(0, 1), 1 + rng.normal(0, 1e-4))
                                      for _ in range(n - 1)]
    states = [agent(clocks[i], pos[i]) for i in range(n)]
    links = {(i, i + 1): simulate_exchange(states[i], states[i + 1], 10, 10, SIGMA_V,
                                           exchange_schedule(0.01 + 0.03 * i, 10, 10), rng)
             for i in range(n - 1)}
    prior_c = [Gaussian([0.0, 1.0], bp.CLOCK_EPS * np.eye(2))] + \
        [Gaussian([0.0, 1.0], np.diag([1.0, 150e-6 ** 2])) for _ in range(n - 1)]
    pin_l = {i: GaussianMixture(np.ones(1), np.r_[pos[i], 0, 0][None],
                                (bp.POSITION_EPS * np.eye(4))[None]) for i in range(n)}
    prior = [bp.AgentBeliefs(prior_c[i], pin_l[i]) for i in range(n)]
    t0 = time.perf_counter()
    res = bp.run_time_step(prior, links, bp.EngineConfig(Q=n - 1), [np.zeros((2, 2))] * n,
                           np.eye(4), np.zeros((4, 4)), lambda q, i, j: np.random.default_rng(0),
                           {0: prior_c[0]}, pin_l, predict=False)
    dt = time.perf_counter() - t0

    # Dense joint over all clocks and link distances; known positions enter
    # through the distance variance floor.
    J = JointGaussian(2 * n + n - 1)
    for i in range(n):
        J.add_prior([2 * i, 2 * i + 1], prior_c[i].mean, prior_c[i].cov)
    for k, (i, j) in enumerate(sorted(links)):
        A, B, a = matrices(links[(i, j)])
        J.add_rows([2 * i, 2 * i + 1, 2 * j, 2 * j + 1, 2 * n + k], np.hstack([A, B, a[:, None]]), SIGMA_V)
        J.add_prior([2 * n + k], [np.linalg.norm(pos[i] - pos[j])], [[bp.MIN_DIST_VAR]])
    rel = cov_err = sd_err = 0.0
    for i in range(1, n):
        m, C = J.marginal([2 * i, 2 * i + 1])
        b = res.beliefs[i].b_theta
        sd = np.sqrt(np.diag(C))
        rel = max(rel, np.max(np.abs(b.mean - m) / np.abs(m)))
        sd_err = max(sd_err, np.max(np.abs(b.mean - m) / sd))
        cov_err = max(cov_err, np.max(np.abs(b.cov - C) / np.outer(sd, sd)))
    ok = rel < 1e-6 and cov_err < 1e-6 and sd_err < 1e-3 and dt < 1.0
    report(6, ok, f"tree exactness: mean rel err {rel:.1e} ({sd_err:.1e} sd), "
                  f"cov err {cov_err:.1e} (sd units), {dt:.2f} s")


# ------------------------------------------------------------ full scenario

@pytest.fixture(scope="module")
def scenario():
    """The built-in scenario in all three modes (20 runs, 30 steps, Q = 5)."""
    base = ScenarioConfig()
    t0 = time.perf_counter()
    out = {}
    for mode in ("coslas", "clkref", "locref"):
        cfg = base.replace(mode=mode, per_iteration_metrics=(mode == "coslas"))
        truth, traces = sim.run_scenario(cfg, mode)
        out[mode] = (cfg, traces, sim.compute_metrics(cfg, truth, traces, mode))
    out["seconds"] = time.perf_counter() - t0
    return out


def final_rows(metrics, Q):
    return {r[0]: r for r in metrics.rows if r[1] == Q}


def test_7_scenario_properties(report, scenario):
    rows = {(r[0], r[1]): r for r in scenario["coslas"][2].rows}
    Q = scenario["coslas"][0].Q
    # (a) clock RMSE at n = 1 drops between q = 0 and q = 2.
    a_beta = rows[(1, 2)][4] < rows[(1, 0)][4]
    a_alpha = rows[(1, 2)][5] < rows[(1, 0)][5]
    # (b) pooled over n >= 15: CoSLAS within a factor 2 of the ablations.
    co = final_rows(scenario["coslas"][2], Q)
    ck = final_rows(scenario["clkref"][2], Q)
    lc = final_rows(scenario["locref"][2], Q)
    late = [n for n in co if n >= 15]

    def pooled(rs, col):
        return float(np.sqrt(np.mean([rs[n][col] ** 2 for n in late])))

    ratio_p = pooled(co, 2) / pooled(ck, 2)
    ratio_b = pooled(co, 4) / pooled(lc, 4)
    ratio_a = pooled(co, 5) / pooled(lc, 5)
    # (c) location RMSE below 3 m from n = 20 on.
    worst_late = max(co[n][2] for n in co if n >= 20)
    secs = scenario["seconds"]
    ok = a_beta and a_alpha and max(ratio_p, ratio_b, ratio_a) <= 2 and worst_late < 3 and secs < 600
    report(7, ok, f"scenario: (a) beta {rows[(1, 0)][4]:.3g}->{rows[(1, 2)][4]:.3g} us, "
                  f"alpha {rows[(1, 0)][5]:.3g}->{rows[(1, 2)][5]:.3g} ppm; "
                  f"(b) ratios p {ratio_p:.2f}, beta {ratio_b:.2f}, alpha {ratio_a:.2f}; "
                  f"(c) max p RMSE n>=20 {worst_late:.2f} m; {secs:.0f} s")


def test_8_payload(report, scenario):
    traces = scenario["coslas"][1]
    per_step = np.stack([t.payload_max for t in traces])
    # run_single records the maximum over every link and iteration of each step.
    worst = int(per_step.max())
    report(8, worst == sim.MAX_PAYLOAD and np.all(per_step <= sim.MAX_PAYLOAD),
           f"payload: max {worst} reals per link and iteration over {per_step.size} steps")


def small_scenario_args(out):
    return ["--runs", "3", "--steps", "4", "--seed", "11", "--per-iteration-metrics",
            "--out", str(out)]


def test_9_determinism_across_workers(report, tmp_path, monkeypatch):
    outputs = []
    for threads in ("1", "3", "1"):
        monkeypatch.setenv("COSLAS_THREADS", threads)
        d = tmp_path / f"w{threads}_{len(outputs)}"
        assert cli.main(small_scenario_args(d)) == 0
        outputs.append((d / "metrics_coslas.csv").read_bytes())
    ok = outputs[0] == outputs[1] == outputs[2]
    report(9, ok, "determinism: CSV byte-identical for 1 and 3 workers and on rerun")


def test_10_censoring_soundness(report, tmp_path, monkeypatch):
    monkeypatch.setenv("COSLAS_THREADS", "1")
    outputs = []
    for flag in ("false", "true"):
        doc = tmp_path / f"{flag}.yaml"
        doc.write_text(f"runs: 1\nconstant_uninformative: {flag}\ndump_trace: true\n")
        out = tmp_path / flag
        assert cli.main(["--config", str(doc), "--out", str(out), "--per-iteration-metrics"]) == 0
        outputs.append(((out / "metrics_coslas.csv").read_bytes(),
                        (out / "trace_coslas.ndjson").read_bytes()))
    report(10, outputs[0] == outputs[1],
           "censoring: explicit constant messages leave CSV and trace byte-identical (30 steps)")
