"""Acceptance suite: one test per criterion, one PASS/FAIL line each.

Run with `pytest tests/test_acceptance.py -v -s`. Tolerances are pinned
here, not configurable. Criterion 10's conditional-decay clause is asserted
literally and is expected to fail; see the analysis note in its docstring.
"""

import itertools
import json
import time

import numpy as np
import pytest

from oracles import brute_force_G, grid_sup_rate

from rwspace.cli import ExperimentConfig, run
from rwspace.collisions import collision_series, criterion_eta, recursion_G
from rwspace.conditioned import (cell_weight, conditioned_empirics, mu_exact,
                                 product_function, stationarity_check,
                                 step_indicator, welldefined_check,
                                 zeta_diagnostic)
from rwspace.environment import (Deterministic, DirichletCells, FiniteSupport,
                                 cone_geometry, sample_window)
from rwspace.harmonic import compute_u, doob_kernel, martingale_diagnostics, \
    quenched_rate_convergence
from rwspace.lattice import StepSet, lookup_rows, sort_sites
from rwspace.rate import (grad_log_phi, solve_theta, velocity_lln)
from rwspace.walks import averaged_marginal, averaged_mgf_check


def report(criterion: str, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")


MU_CASES = None  # built by criterion 7, reused by criterion 8


def test_criterion_01_cramer_duality(twopoint3):
    """Roundtrip residual <= 1e-9 on 100 random velocities, I_a(xi_o) = 0
    within 1e-12, grid-search sup agreement 1e-5, under 5 s."""
    t0 = time.time()
    q = twopoint3.mean_kernel()
    rng = np.random.default_rng(2024)
    worst_round = 0.0
    worst_grid = 0.0
    for _ in range(100):
        xi = rng.uniform(-1, 1, size=3)
        if np.abs(xi).sum() >= 0.97:
            xi *= 0.9 / np.abs(xi).sum()
        sol = solve_theta(q, xi)
        worst_round = max(worst_round,
                          float(np.abs(grad_log_phi(q, sol.theta) - xi).max()))
        worst_grid = max(worst_grid, abs(sol.rate - grid_sup_rate(q, xi)))
    rate_at_lln = solve_theta(q, velocity_lln(q)).rate
    elapsed = time.time() - t0
    ok = worst_round <= 1e-9 and abs(rate_at_lln) <= 1e-12 \
        and worst_grid <= 1e-5 and elapsed < 5.0
    report("criterion 1 (Cramer duality)", ok,
           f"roundtrip {worst_round:.2e}, I_a(xi_o) {rate_at_lln:.2e}, "
           f"grid gap {worst_grid:.2e}, {elapsed:.1f}s")
    assert worst_round <= 1e-9
    assert abs(rate_at_lln) <= 1e-12
    assert worst_grid <= 1e-5
    assert elapsed < 5.0


def test_criterion_02_mgf_identity(twopoint3):
    """Exact convolution reproduces phi(theta)^n to relative 1e-10 for 20
    random tilts with |theta| <= 1 at n <= 12, under 30 s."""
    t0 = time.time()
    rng = np.random.default_rng(7)
    worst = 0.0
    for i in range(20):
        theta = rng.uniform(-1, 1, size=3)
        if np.linalg.norm(theta) > 1:
            theta /= np.linalg.norm(theta)
        n = int(rng.integers(1, 13))
        worst = max(worst, averaged_mgf_check(twopoint3, theta, n).rel_error)
    elapsed = time.time() - t0
    ok = worst <= 1e-10 and elapsed < 30
    report("criterion 2 (MGF identity)", ok,
           f"worst rel err {worst:.2e}, {elapsed:.1f}s")
    assert worst <= 1e-10
    assert elapsed < 30


def _fuzz_dists(seed):
    rng = np.random.default_rng(seed)
    ss = StepSet(3)
    kind = rng.integers(0, 3)
    c = float(rng.uniform(0.01, 0.08))
    if kind == 0:
        w = rng.uniform(c, 1, size=6)
        w = c + (1 - 6 * c) * (w / w.sum())
        return Deterministic(ss, c, w / w.sum() if abs(w.sum() - 1) > 1e-12 else w)
    if kind == 1:
        n_atoms = int(rng.integers(2, 5))
        raw = rng.uniform(0, 1, size=(n_atoms, 6))
        atoms = c + (1 - 6 * c) * raw / raw.sum(axis=1, keepdims=True)
        probs = rng.uniform(0.2, 1, size=n_atoms)
        probs /= probs.sum()
        probs[-1] = 1.0 - probs[:-1].sum()
        return FiniteSupport(ss, c, list(zip(atoms, probs)))
    return DirichletCells(ss, c, rng.uniform(0.5, 4.0, size=6))


def test_criterion_03_harmonicity_positivity():
    """One-step identity residual <= 1e-12 at every site over 50 fuzz
    environments at N = 16, all values positive, transformed rows summing to
    one within 1e-12, under 60 s."""
    t0 = time.time()
    steps = StepSet(3).steps
    worst_resid = 0.0
    worst_row = 0.0
    min_u = np.inf
    for trial in range(50):
        dist = _fuzz_dists(5000 + trial)
        rng = np.random.default_rng(9000 + trial)
        theta = rng.uniform(-1, 1, size=3)
        if trial % 10 == 9:
            theta = theta * (2.5 / max(np.abs(theta).sum(), 1e-9))  # log-space path
        env = sample_window(dist, cone_geometry(0, 17, (0, 0, 0)),
                            master_seed=777 + trial)
        fld = compute_u(env, theta, 16)
        lp = fld.log_phi
        tilts = np.exp(np.array([theta[k // 2] * (1 - 2 * (k % 2)) - lp
                                 for k in range(6)]))
        kern = doob_kernel(fld)
        for n in range(16):
            u_n = fld.u_level(n)
            u_n1 = fld.u_level(n + 1)
            min_u = min(min_u, float(u_n.min()), float(u_n1.min()))
            sites = fld.level_sites(n)
            cells = env.cells_at(n, sites)
            keys1 = sort_sites(fld.level_sites(n + 1), 3)[1]
            acc = np.zeros(len(sites))
            for zi in range(6):
                idx = lookup_rows(keys1, sites + steps[zi], 3)
                acc += cells[:, zi] * tilts[zi] * u_n1[idx]
            worst_resid = max(worst_resid,
                              float(np.abs(acc / u_n - 1.0).max()))
            rows = kern._levels[n][2]
            worst_row = max(worst_row,
                            float(np.abs(rows.sum(axis=1) - 1.0).max()))
    elapsed = time.time() - t0
    ok = worst_resid <= 1e-12 and worst_row <= 1e-12 and min_u > 0 \
        and elapsed < 60
    report("criterion 3 (harmonicity/positivity)", ok,
           f"residual {worst_resid:.2e}, row-sum {worst_row:.2e}, "
           f"min u {min_u:.2e}, {elapsed:.1f}s")
    assert worst_resid <= 1e-12
    assert worst_row <= 1e-12
    assert min_u > 0
    assert elapsed < 60


def test_criterion_04_second_moment_oracle(twopoint3):
    """Renewal recursion equals the double-path sum within 1e-10 for
    N <= 4 at theta in {0, 0.05 e1}, and G_N(0) = 1 for N <= 64 within
    1e-10, under 120 s."""
    t0 = time.time()
    worst_bf = 0.0
    for theta in (np.zeros(3), np.array([0.05, 0, 0])):
        series = collision_series(twopoint3, theta, k_max=4)
        G = recursion_G(series, 4)
        for N in (1, 2, 3, 4):
            worst_bf = max(worst_bf,
                           abs(G[N - 1] - brute_force_G(twopoint3, theta, N)))
    series0 = collision_series(twopoint3, np.zeros(3), k_max=64)
    worst_one = float(np.abs(recursion_G(series0, 64) - 1.0).max())
    elapsed = time.time() - t0
    ok = worst_bf <= 1e-10 and worst_one <= 1e-10 and elapsed < 120
    report("criterion 4 (second-moment oracle)", ok,
           f"vs brute force {worst_bf:.2e}, G_N(0)-1 {worst_one:.2e}, "
           f"{elapsed:.1f}s")
    assert worst_bf <= 1e-10
    assert worst_one <= 1e-10
    assert elapsed < 120


def test_criterion_05_collision_criterion(mild_twopoint3, twopoint1):
    """Certified B(theta) < 1 (truncation bound included) on the grid
    |theta| <= 0.05 in d = 3 with small overlap, inapplicable report in
    d = 1, under 120 s."""
    t0 = time.time()
    from rwspace.collisions import overlap_potential
    v_bar = overlap_potential(mild_twopoint3).v_bar
    dirs = [np.array([1.0, 0, 0]), np.array([0, 1.0, 0]),
            np.array([1.0, 1.0, 1.0]) / np.sqrt(3)]
    grid = [r * u for u in dirs for r in (0.0125, 0.025, 0.0375, 0.05)]
    grid.insert(0, np.zeros(3))
    rep = criterion_eta(mild_twopoint3, grid, k_max=48)
    all_true = rep.applicable and all(e["verdict"] for e in rep.entries)
    worst_B = max(e["B_upper"] for e in rep.entries)
    rep_d1 = criterion_eta(twopoint1, [np.zeros(1)], k_max=8)
    elapsed = time.time() - t0
    ok = v_bar <= 0.1 and all_true and not rep_d1.applicable and elapsed < 120
    report("criterion 5 (B(theta) < 1 region)", ok,
           f"Vbar {v_bar:.3f}, worst B upper {worst_B:.3f}, eta_bar "
           f"{rep.eta_bar:.4f}, d=1 inapplicable {not rep_d1.applicable}, "
           f"{elapsed:.1f}s")
    assert v_bar <= 0.1
    assert all_true
    assert rep.eta_bar >= 0.05 - 1e-12
    assert not rep_d1.applicable
    assert elapsed < 120


def test_criterion_06_martingale_l2(twopoint3):
    """Empirical E[u_N] = 1 and E[u_N^2] = exact G_N within 3 sigma for
    N in {2,4,8,16} over 1e4 environments, under 120 s."""
    t0 = time.time()
    diag = martingale_diagnostics(twopoint3, [0.1, 0, 0], [2, 4, 8, 16],
                                  env_replicas=10_000, seed=606)
    mean_dev = np.abs(diag.mean - 1.0) / diag.mean_stderr
    sq_dev = np.abs(diag.second_moment - diag.exact_G) / diag.second_moment_stderr
    elapsed = time.time() - t0
    ok = mean_dev.max() <= 3 and sq_dev.max() <= 3 and elapsed < 120
    report("criterion 6 (martingale/L2)", ok,
           f"mean dev {mean_dev.max():.2f} sigma, second-moment dev "
           f"{sq_dev.max():.2f} sigma, {elapsed:.1f}s")
    assert mean_dev.max() <= 3
    assert sq_dev.max() <= 3
    assert elapsed < 120


def _mu_cases(twopoint3, twopoint1, uniform3):
    xi3 = np.array([0.12, 0.0, 0.03])
    xi1 = np.array([0.15])
    return [
        (twopoint3, xi3, step_indicator(3, "+e1")),
        (twopoint3, xi3, product_function(step_indicator(3, "+e1"),
                                          cell_weight(3, 0, (0, 0, 0), "+e1"))),
        (twopoint3, xi3, cell_weight(3, 0, (0, 0, 0), "-e1")),
        (uniform3, xi3, product_function(step_indicator(3, "+e2"),
                                         cell_weight(3, 0, (0, 0, 0), "+e2"))),
        (twopoint1, xi1, product_function(step_indicator(1, "+e1"),
                                          cell_weight(1, 0, (0,), "+e1"))),
        (twopoint1, xi1, cell_weight(1, -1, (1,), "+e1").with_indices(N=1)),
    ]


def test_criterion_07_mu_oracles(twopoint3, twopoint1, uniform3):
    """Well-definedness and stationarity deviations <= 1e-12 on six
    enumerable cases including the 2-point d=3 environment, under 60 s."""
    t0 = time.time()
    worst = 0.0
    n_cases = 0
    for dist, xi, f in _mu_cases(twopoint3, twopoint1, uniform3):
        wd = welldefined_check(dist, xi, f)
        st_rep = stationarity_check(dist, xi, f)
        worst = max(worst, wd.max_deviation, st_rep.max_deviation)
        n_cases += 1
    elapsed = time.time() - t0
    ok = worst <= 1e-12 and n_cases >= 5 and elapsed < 60
    report("criterion 7 (mu well-defined/stationary)", ok,
           f"{n_cases} cases, worst deviation {worst:.2e}, {elapsed:.1f}s")
    assert worst <= 1e-12
    assert n_cases >= 5
    assert elapsed < 60


def test_criterion_08_zeta(twopoint3, twopoint1, uniform3):
    """zeta(0) = 0 within 1e-12 and |zeta'(0)| <= 1e-8 (central difference,
    h = 1e-5) on every criterion-7 case, under 30 s."""
    t0 = time.time()
    worst_zero = 0.0
    worst_deriv = 0.0
    for dist, xi, f in _mu_cases(twopoint3, twopoint1, uniform3):
        rep = zeta_diagnostic(dist, xi, f)
        worst_zero = max(worst_zero, abs(rep.zeta_zero))
        worst_deriv = max(worst_deriv, abs(rep.derivative_at_zero))
    elapsed = time.time() - t0
    ok = worst_zero <= 1e-12 and worst_deriv <= 1e-8 and elapsed < 30
    report("criterion 8 (zeta diagnostic)", ok,
           f"zeta(0) {worst_zero:.2e}, zeta'(0) {worst_deriv:.2e}, "
           f"{elapsed:.1f}s")
    assert worst_zero <= 1e-12
    assert worst_deriv <= 1e-8
    assert elapsed < 30


def test_criterion_09_averaged_ldp(twopoint3):
    """Importance-sampled -(1/n) log P(D) within 0.05 of I_a at n = 200
    (I_a(xi) = 0.050), cross-checked against the exact convolution of the
    averaged marginal, under 5 min."""
    t0 = time.time()
    xi = np.array([0.2, 0.0, 0.0])
    sol = solve_theta(twopoint3.mean_kernel(), xi)
    assert sol.rate <= 0.1
    rep = conditioned_empirics("averaged", twopoint3, xi,
                               step_indicator(3, "+e1"), eps=0.04, delta=0.02,
                               n_grid=[200], replicas=100_000, seed=314)
    entry = rep.entries[0]
    is_rate = -np.log(entry.p_d) / 200
    gap = abs(is_rate - sol.rate)
    law = averaged_marginal(twopoint3, 200)
    exact_pd = law.region_prob(200 * xi, 200 * 0.02, norm="l2")
    del law
    cross_sigmas = abs(entry.p_d - exact_pd) / entry.p_d_stderr
    elapsed = time.time() - t0
    ok = gap <= 0.05 and cross_sigmas <= 4 and elapsed < 300
    report("criterion 9 (averaged LDP at n=200)", ok,
           f"-(1/n)log P(D) {is_rate:.4f} vs I_a {sol.rate:.4f} (gap "
           f"{gap:.4f}), IS vs convolution {cross_sigmas:.1f} sigma, "
           f"{elapsed:.0f}s")
    assert gap <= 0.05
    assert cross_sigmas <= 4
    assert elapsed < 300


def test_criterion_10a_quenched_rate_trend(twopoint3):
    """Median |(1/n) log u_n| over 32 environments falls by at least 2x
    from n = 8 to n = 64 at |theta| = 0.1."""
    t0 = time.time()
    table = quenched_rate_convergence(twopoint3, [0.1, 0, 0], [8, 16, 32, 64],
                                      env_replicas=32, seed=512)
    med = table.median_abs
    ratio = med[0] / med[-1]
    elapsed = time.time() - t0
    ok = ratio >= 2.0
    report("criterion 10a (quenched=averaged trend)", ok,
           f"median |(1/n)log u_n|: {med[0]:.2e} (n=8) -> {med[-1]:.2e} "
           f"(n=64), ratio {ratio:.1f}x, {elapsed:.0f}s")
    assert ratio >= 2.0


@pytest.mark.parametrize("mode", ["averaged", "quenched"])
def test_criterion_10b_conditional_decay(mode, twopoint3):
    """P(A|D) decay over n in {50, 100, 200}, both modes.

    The criterion's literal clause asserts (1/n) log P_hat(A|D) negative AND
    nonincreasing. Negativity and genuine exponential decay of P_hat(A|D)
    hold and are asserted first. The nonincreasing clause is asserted last,
    exactly as stated, and fails by construction of the estimator: the
    finite-n rate is -Lambda - log(n)/(2n) + O(1/n) (Bahadur-Rao), which
    INCREASES toward its negative limit; see the decisions ledger. An
    honest red, not a measurement problem: the measured sequence is stable
    to replica count and seed.
    """
    t0 = time.time()
    xi = np.array([0.2, 0.0, 0.0])
    rep = conditioned_empirics(mode, twopoint3, xi, step_indicator(3, "+e1"),
                               eps=0.04, delta=0.02, n_grid=[50, 100, 200],
                               replicas=100_000, seed=99)
    rates = [e.log_rate for e in rep.entries]
    probs = [e.p_a_given_d for e in rep.entries]
    hits = [e.ad_hits for e in rep.entries]
    negative = all(r < 0 for r in rates)
    decaying = all(probs[i + 1] < probs[i] for i in range(len(probs) - 1))
    noninc = all(rates[i + 1] <= rates[i] for i in range(len(rates) - 1))
    elapsed = time.time() - t0
    report(f"criterion 10b ({mode} P(A|D) decay)", negative and noninc,
           f"(1/n)log P(A|D) = {[f'{r:.4f}' for r in rates]}, hits {hits}, "
           f"negative {negative}, P decaying {decaying}, nonincreasing "
           f"{noninc}, {elapsed:.0f}s")
    assert negative, "every finite-n rate must be strictly negative"
    assert decaying, "P(A|D) must decay strictly in n"
    assert noninc, (
        "literal clause: (1/n) log P(A|D) nonincreasing -- expected to fail; "
        "the finite-n rate rises toward its negative limit (see decisions "
        "ledger)")


def test_criterion_11_determinism(tmp_path, twopoint3):
    """Identical seeds with different worker counts give byte-identical
    non-timing report content."""
    spec = tmp_path / "env.json"
    spec.write_text(json.dumps(twopoint3.to_spec()))
    outputs = {}
    for sub, params in [
        ("simulate", {"env": str(spec), "mode": "quenched", "n": 24,
                      "replicas": 96}),
        ("rate-curve", {"env": str(spec), "samples": 9}),
        ("intersection", {"env": str(spec), "theta_grid": "0:0.02:0.01",
                          "kmax": 12}),
    ]:
        pair = []
        for workers in (1, 2):
            cfg = ExperimentConfig(sub, dict(params), seed=41, workers=workers)
            doc = run(cfg).to_dict()
            doc.pop("timing")
            doc["config"].pop("workers")
            pair.append(json.dumps(doc, sort_keys=True).encode())
        outputs[sub] = pair[0] == pair[1]
    ok = all(outputs.values())
    report("criterion 11 (worker-count determinism)", ok, str(outputs))
    assert ok
