"""End-to-end acceptance checks for the replay-selection engine.

Each test prints exactly one PASS/FAIL line (visible with ``pytest -s``);
run this module alone via ``pytest tests/test_acceptance.py -s``.  Shared
heavyweight computations (benchmark sweeps, coordination instances, the
drift simulation grid) are module-scoped fixtures, so the whole module is
meant to run as a unit.  Expect roughly 15 minutes on one core.
"""
from __future__ import annotations

import socket
import threading
import time

import numpy as np
import pytest

from replaycoord.bench import (MixtureConfig, brute_force_optimum,
                               gen_mixture_gradients, run_selection_benchmark)
from replaycoord.coordination import ClientSelectionState, run_coordination
from replaycoord.flsim import (SimConfig, SyntheticDriftConfig,
                               forgetting_factor, loss_gradient, mean_loss,
                               param_count, rcp, run_simulation)
from replaycoord.gradients import normalize_columns
from replaycoord.strategies import BufferUpdateInput, StrategySpec, select_relaxed
from replaycoord.transport import run_tcp_client, serve_coordination


def verdict(num: int, ok: bool, detail: str) -> None:
    print(f"\n[criterion {num:2d}] {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {num}: {detail}"


# ---------------------------------------------------------------------------
# criteria 1-2: relaxation quality against the exhaustive optimum

BENCH_STRATEGIES = ["naive_uniform", "greedy_gss", "relaxed_convex",
                    "relaxed_nonconvex"]


@pytest.fixture(scope="module")
def gap_stats():
    """Mean optimality gap per strategy at n in {10, 30, 50}; 500 trials each."""
    stats = {}
    t0 = time.time()
    for n in (10, 30, 50):
        cfg = MixtureConfig(dim=300, n=n, budget=5, trials=500, seed=0)
        res = run_selection_benchmark(cfg, [StrategySpec(k) for k in BENCH_STRATEGIES])
        stats[n] = {k: float(np.mean(res.gaps(k))) for k in BENCH_STRATEGIES}
    stats["elapsed"] = time.time() - t0
    return stats


def test_criterion_1_relaxation_quality(gap_stats):
    g = gap_stats[50]
    checks = {
        "ncvx<=cvx": g["relaxed_nonconvex"] <= g["relaxed_convex"],
        "cvx<greedy": g["relaxed_convex"] < g["greedy_gss"],
        "ncvx<random": g["relaxed_nonconvex"] < g["naive_uniform"],
        "ncvx<0.5*random": g["relaxed_nonconvex"] < 0.5 * g["naive_uniform"],
    }
    means = ", ".join(f"{k}={g[k]:.3f}" for k in BENCH_STRATEGIES)
    failed = [k for k, ok in checks.items() if not ok]
    verdict(1, not failed,
            f"mean gaps at n=50 over 500 trials: {means}; "
            f"failed sub-checks: {failed or 'none'} "
            f"(sweep took {gap_stats['elapsed']:.0f}s)")


def test_criterion_2_gap_monotone_in_pool_size(gap_stats):
    monotone_ok = all(
        gap_stats[10][k] < gap_stats[30][k] < gap_stats[50][k]
        for k in BENCH_STRATEGIES)
    orderings = {
        n: tuple(sorted(BENCH_STRATEGIES, key=lambda k: gap_stats[n][k]))
        for n in (10, 30, 50)}
    ordering_ok = orderings[10] == orderings[30] == orderings[50]
    verdict(2, monotone_ok and ordering_ok,
            f"per-strategy gap monotone in n: {monotone_ok}; "
            f"orderings {dict(orderings)} identical: {ordering_ok}")


# ---------------------------------------------------------------------------
# criteria 3-6: coordinated selection

N_COORD_INSTANCES = 100


def _coord_clients(seed: int) -> list[ClientSelectionState]:
    rng = np.random.default_rng([7001, seed])
    m = int(rng.integers(2, 9))
    return [
        ClientSelectionState(
            f"c{i}",
            normalize_columns(rng.standard_normal((20, 12)),
                              [f"c{i}:{j}" for j in range(12)]),
            3)
        for i in range(m)]


def _rounded_objective(clients, selections) -> float:
    total = np.zeros(clients[0].gradients.dim)
    for c in clients:
        for sid in selections[c.client_id].chosen:
            total += c.gradients.columns[:, c.gradients.sample_ids.index(sid)]
    return float(total @ total)


@pytest.fixture(scope="module")
def coord_runs():
    """Per instance: a converged run, a 0-round run, and a 1-round run."""
    out = []
    t0 = time.time()
    for s in range(N_COORD_INSTANCES):
        clients = _coord_clients(s)
        _, full = run_coordination(clients, max_rounds=30000, tol=1e-8)
        scale = 1.0 + max(
            float(np.linalg.norm(c.gradients.columns @ c.x.values))
            for c in clients)

        zero_clients = _coord_clients(s)
        zero_sel, _ = run_coordination(zero_clients, max_rounds=0, tol=1e-8)

        one_clients = _coord_clients(s)
        one_sel, one = run_coordination(one_clients, max_rounds=1, tol=0.0)

        out.append({
            "full": full, "scale": scale,
            "zero_clients": zero_clients, "zero_sel": zero_sel,
            "one_trace": one.relaxed_objective_per_round,
            "rounded0": _rounded_objective(zero_clients, zero_sel),
            "rounded1": _rounded_objective(one_clients, one_sel),
        })
    return {"instances": out, "elapsed": time.time() - t0}


def test_criterion_3_coupling_feasibility(coord_runs):
    bad = []
    for i, inst in enumerate(coord_runs["instances"]):
        rep = inst["full"]
        if not rep.converged:
            bad.append((i, "no convergence"))
        elif rep.theorem1_residual > 1e-5 * inst["scale"]:
            bad.append((i, f"residual {rep.theorem1_residual:.2e}"))
        elif rep.max_target_sum > 1e-9:
            bad.append((i, f"target sum {rep.max_target_sum:.2e}"))
    worst = max(r["full"].theorem1_residual / (1e-5 * r["scale"])
                for r in coord_runs["instances"])
    verdict(3, not bad,
            f"{N_COORD_INSTANCES} instances converged at tol=1e-8; worst "
            f"residual/bound {worst:.3f}; violations: {bad or 'none'} "
            f"(fixture took {coord_runs['elapsed']:.0f}s)")


def test_criterion_4_monotone_descent(coord_runs):
    bad = []
    for i, inst in enumerate(coord_runs["instances"]):
        trace = inst["full"].relaxed_objective_per_round
        for prev, cur in zip(trace, trace[1:]):
            if cur > prev + 1e-10 * max(1.0, abs(prev)):
                bad.append((i, prev, cur))
                break
    verdict(4, not bad,
            f"objective trace non-increasing (1e-10 relative) across all "
            f"rounds of all instances; violations: {bad or 'none'}")


def test_criterion_5_zero_rounds_is_uncoordinated(coord_runs):
    mismatches = 0
    for inst in coord_runs["instances"]:
        for c in inst["zero_clients"]:
            inp = BufferUpdateInput(c.gradients.sample_ids, (), c.budget,
                                    c.gradients)
            expected = select_relaxed(inp, zero_diagonal=False)
            if expected.chosen != inst["zero_sel"][c.client_id].chosen:
                mismatches += 1
    verdict(5, mismatches == 0,
            f"0-round coordinated selection vs convex relaxed strategy: "
            f"{mismatches} client mismatches across all instances")


def test_criterion_6_one_round_improves(coord_runs):
    frac_bad = sum(
        1 for inst in coord_runs["instances"]
        if inst["one_trace"][-1] > inst["one_trace"][0])
    rounded_ok = sum(
        1 for inst in coord_runs["instances"]
        if inst["rounded1"] <= inst["rounded0"] + 1e-12)
    share = rounded_ok / N_COORD_INSTANCES
    verdict(6, frac_bad == 0 and share >= 0.80,
            f"fractional objective after 1 round <= 0 rounds in "
            f"{N_COORD_INSTANCES - frac_bad}/{N_COORD_INSTANCES}; rounded "
            f"non-worse in {share:.0%} (threshold 80%: rounding to a discrete "
            f"subset can perturb the objective)")


# ---------------------------------------------------------------------------
# criterion 7: TCP transport equals in-memory transport


def _run_over_tcp(clients, max_rounds, tol):
    srv = socket.create_server(("127.0.0.1", 0))
    port = srv.getsockname()[1]
    srv.close()
    box = {}
    server = threading.Thread(
        target=lambda: box.update(report=serve_coordination(
            ("127.0.0.1", port), len(clients), max_rounds=max_rounds,
            tol=tol, timeout=30)))
    server.start()
    selections = {}
    workers = []
    for state in clients:
        def worker(s=state):
            sel, _ = run_tcp_client(("127.0.0.1", port), s, timeout=30)
            selections[s.client_id] = sel
        t = threading.Thread(target=worker)
        workers.append(t)
        t.start()
    server.join(60)
    for t in workers:
        t.join(60)
    return selections, box["report"]


def test_criterion_7_transport_equivalence():
    mismatches = []
    for seed in range(10):
        mem_sel, mem_rep = run_coordination(_coord_clients(seed),
                                            max_rounds=4, tol=1e-6)
        tcp_sel, tcp_rep = _run_over_tcp(_coord_clients(seed),
                                         max_rounds=4, tol=1e-6)
        same = (
            {c: s.chosen for c, s in mem_sel.items()}
            == {c: s.chosen for c, s in tcp_sel.items()}
            and mem_rep.relaxed_objective_per_round
            == tcp_rep.relaxed_objective_per_round
            and mem_rep.theorem1_residual == tcp_rep.theorem1_residual)
        if not same:
            mismatches.append(seed)
    verdict(7, not mismatches,
            f"10 seeded sessions, TCP vs in-memory: selections and objective "
            f"traces exactly equal; mismatched seeds: {mismatches or 'none'}")


# ---------------------------------------------------------------------------
# criterion 8: diagonal choice never changes the exhaustive argmin


def test_criterion_8_brute_force_diagonal_invariance():
    mismatches = 0
    for i in range(1000):
        rng = np.random.default_rng([8001, i])
        n = int(rng.integers(3, 11))
        d = int(rng.integers(3, 13))
        g = normalize_columns(rng.standard_normal((d, n)),
                              [f"s{j}" for j in range(n)])
        budget = int(rng.integers(1, n + 1))
        with_diag = brute_force_optimum(g, budget, include_diagonal=True)
        without = brute_force_optimum(g, budget, include_diagonal=False)
        if with_diag.selection.chosen != without.selection.chosen:
            mismatches += 1
    verdict(8, mismatches == 0,
            f"1000 exhaustive searches (n<=10): argmin with vs without "
            f"diagonal identical; mismatches: {mismatches}")


# ---------------------------------------------------------------------------
# criterion 9: drift simulation, replay quality trends

SIM_STRATEGIES = {
    "naive_uniform": StrategySpec("naive_uniform", seed=0),
    "approx_uniform": StrategySpec("approx_uniform"),
    "fixed_proportion": StrategySpec("fixed_proportion", p=0.5),
    "greedy_gss": StrategySpec("greedy_gss"),
    "relaxed_convex": StrategySpec("relaxed_convex"),
    "relaxed_nonconvex": StrategySpec("relaxed_nonconvex"),
}
SIM_SEEDS = 10


@pytest.fixture(scope="module")
def sim_grid():
    """10-seed drift simulation: every strategy at N=20, the non-convex
    strategy additionally at N in {5, 50}, plus matched N=0 baselines."""
    drift = SyntheticDriftConfig(clients=20, periods=5, features=10, classes=5,
                                 drift_angle=0.5, samples_per_period=200,
                                 seed=0)

    def mean_forget(res):
        return float(np.mean([res.forgetting(p)
                              for p in range(res.metric.shape[0])]))

    t0 = time.time()
    runs: dict[str, list[dict]] = {}
    baseline = []
    grid = [(name, 20) for name in SIM_STRATEGIES]
    grid += [("relaxed_nonconvex", 5), ("relaxed_nonconvex", 50)]
    for seed in range(SIM_SEEDS):
        base = run_simulation(SimConfig(drift=drift, budget=0), None, seed=seed)
        baseline.append({"overall": base.overall, "forget": mean_forget(base)})
        for name, budget in grid:
            res = run_simulation(SimConfig(drift=drift, budget=budget),
                                 SIM_STRATEGIES[name], seed=seed)
            runs.setdefault(f"{name}@{budget}", []).append({
                "overall": res.overall,
                "rcp": rcp(res.overall, base.overall),
                "forget": mean_forget(res)})
    return {"runs": runs, "baseline": baseline, "elapsed": time.time() - t0}


def test_criterion_9_simulation_trends(sim_grid):
    runs, baseline = sim_grid["runs"], sim_grid["baseline"]

    forget = {0: float(np.mean([b["forget"] for b in baseline]))}
    for budget in (5, 20, 50):
        forget[budget] = float(np.mean(
            [r["forget"] for r in runs[f"relaxed_nonconvex@{budget}"]]))
    a_ok = forget[0] > forget[5] > forget[20] > forget[50]

    mean_rcp = {name: float(np.mean([r["rcp"] for r in runs[f"{name}@20"]]))
                for name in SIM_STRATEGIES}
    b_ok = all(v < 0 for v in mean_rcp.values())

    ncvx = np.array([r["rcp"] for r in runs["relaxed_nonconvex@20"]])
    unif = np.array([r["rcp"] for r in runs["naive_uniform@20"]])
    c_ok = ncvx.mean() <= unif.mean()

    fmt_f = ", ".join(f"N={k}:{v:.3f}" for k, v in forget.items())
    fmt_r = ", ".join(f"{k}:{v:.3f}" for k, v in mean_rcp.items())
    verdict(9, a_ok and b_ok and c_ok,
            f"(a) forgetting monotone in N [{fmt_f}]: {a_ok}; "
            f"(b) mean RCP at N=20 negative for every strategy [{fmt_r}]: "
            f"{b_ok}; (c) nonconvex {ncvx.mean():.3f}±{ncvx.std():.3f} <= "
            f"uniform {unif.mean():.3f}±{unif.std():.3f}: {c_ok} "
            f"(grid took {sim_grid['elapsed']:.0f}s)")


# ---------------------------------------------------------------------------
# criteria 10-11: model gradients and metric arithmetic


def test_criterion_10_gradient_correctness():
    rng = np.random.default_rng([10001])
    features, classes = 10, 5
    eps = 1e-6
    worst = 0.0
    for _ in range(100):
        w = rng.standard_normal(param_count(features, classes)) * 0.5
        x = rng.standard_normal((1, features))
        y = rng.integers(0, classes, size=1)
        analytic = loss_gradient(w, x, y, classes)
        fd = np.empty_like(analytic)
        for i in range(w.size):
            wp, wm = w.copy(), w.copy()
            wp[i] += eps
            wm[i] -= eps
            fd[i] = (mean_loss(wp, x, y, classes)
                     - mean_loss(wm, x, y, classes)) / (2 * eps)
        rel = float(np.linalg.norm(analytic - fd) / max(np.linalg.norm(fd), 1e-12))
        worst = max(worst, rel)
    verdict(10, worst <= 1e-5,
            f"per-sample gradient vs central finite differences on 100 "
            f"samples: worst relative error {worst:.2e} (bound 1e-5)")


def test_criterion_11_metric_arithmetic():
    cases = [
        forgetting_factor([10.0, 8.0, 9.0]) == 1.0,
        forgetting_factor([10.0, 9.0, 8.0]) == -1.0,
        forgetting_factor([5.0, 5.0]) == 0.0,
        rcp(9.0, 10.0) == (9.0 - 10.0) / 10.0,
        rcp(10.0, 10.0) == 0.0,
        rcp(12.0, 10.0) == (12.0 - 10.0) / 10.0,
    ]
    verdict(11, all(cases),
            f"hand-computed forgetting/RCP examples exact: "
            f"{sum(cases)}/{len(cases)}")
