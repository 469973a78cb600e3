"""Harmonic fields, Doob kernels, tilted simulation, and martingale
diagnostics against the exact renewal second moments."""

import itertools

import numpy as np
import pytest

from rwspace.collisions import collision_series, recursion_G
from rwspace.environment import (Deterministic, FiniteSupport, cone_geometry,
                                 sample_window)
from rwspace.errors import WindowBoundsError
from rwspace.harmonic import (compute_u, doob_kernel, martingale_diagnostics,
                              quenched_rate_convergence, shift_identity_check,
                              simulate_tilted)
from rwspace.lattice import StepSet, lookup_rows, sort_sites
from rwspace.rate import log_phi, tilted_step_law
from rwspace.walks import Path, quenched_path_prob, simulate_quenched

THETA = np.array([0.2, -0.1, 0.05])


@pytest.fixture()
def env2(twopoint3):
    return sample_window(twopoint3, cone_geometry(0, 20, (0, 0, 0)), 42)


def test_u_is_one_for_deterministic_env(uniform3):
    env = sample_window(uniform3, cone_geometry(0, 9, (0, 0, 0)), 5)
    fld = compute_u(env, [0.4, -0.2, 0.1], 8)
    for n in range(9):
        assert np.abs(fld.u_level(n) - 1.0).max() <= 1e-12


def test_u_is_one_at_zero_tilt(env2):
    fld = compute_u(env2, np.zeros(3), 8)
    for n in range(9):
        assert np.abs(fld.u_level(n) - 1.0).max() <= 1e-12


def test_u_matches_path_enumeration(env2, twopoint3):
    # N = 3: compare against the sum over all 6^3 weighted paths
    fld = compute_u(env2, THETA, 3)
    lp = log_phi(twopoint3.mean_kernel(), THETA)
    steps = StepSet(3).steps
    total = 0.0
    for comb in itertools.product(range(6), repeat=3):
        pos = np.zeros(3, dtype=np.int64)
        w = 1.0
        for t, zi in enumerate(comb):
            w *= env2.cell(t, pos)[zi] * np.exp(THETA @ steps[zi] - lp)
            pos = pos + steps[zi]
        total += w
    assert fld.value(0, (0, 0, 0)) == pytest.approx(total, rel=1e-12)


def test_harmonicity_residual_every_site(env2, twopoint3):
    fld = compute_u(env2, THETA, 10)
    lp = fld.log_phi
    steps = StepSet(3).steps
    tilts = np.exp(np.array([THETA[k // 2] * (1 - 2 * (k % 2)) - lp
                             for k in range(6)]))
    for n in range(10):
        sites = fld.level_sites(n)
        cells = env2.cells_at(n, sites)
        keys1 = sort_sites(fld.level_sites(n + 1), 3)[1]
        acc = np.zeros(len(sites))
        for zi in range(6):
            idx = lookup_rows(keys1, sites + steps[zi], 3)
            acc += cells[:, zi] * tilts[zi] * fld.u_level(n + 1)[idx]
        assert np.abs(acc / fld.u_level(n) - 1.0).max() <= 1e-12


def test_positivity_and_analytic_floor(env2, twopoint3):
    N = 8
    fld = compute_u(env2, THETA, N)
    lp = fld.log_phi
    c = twopoint3.c
    floor = (c * np.exp(-np.abs(THETA).sum() - lp)) ** N
    for n in range(N + 1):
        u = fld.u_level(n)
        assert u.min() > 0
        assert u.min() >= floor * (1 - 1e-9)


def test_log_space_path_matches_linear(env2):
    # |theta|*N above the switch: force both modes and compare
    fld_lin = compute_u(env2, THETA, 6)
    import rwspace.harmonic as H
    old = H.LOG_SPACE_THRESHOLD
    H.LOG_SPACE_THRESHOLD = -1.0
    try:
        fld_log = compute_u(env2, THETA, 6)
    finally:
        H.LOG_SPACE_THRESHOLD = old
    assert fld_log.log_space and not fld_lin.log_space
    for n in range(7):
        assert np.allclose(fld_log.log_u_level(n), fld_lin.log_u_level(n),
                           atol=1e-13)


def test_window_coverage_error(twopoint3):
    env = sample_window(twopoint3, cone_geometry(0, 4, (0, 0, 0)), 1)
    with pytest.raises(WindowBoundsError):
        compute_u(env, THETA, 6)


def test_shift_identity(env2):
    rep = shift_identity_check(env2, THETA, 2, (1, 0, 0), 4)
    assert rep.max_rel_deviation <= 1e-12
    rep0 = shift_identity_check(env2, THETA, 0, (0, 0, 0), 4)
    assert rep0.max_rel_deviation <= 1e-12


def test_shift_identity_deterministic(uniform3):
    env = sample_window(uniform3, cone_geometry(0, 10, (0, 0, 0)), 3)
    rep = shift_identity_check(env, THETA, 3, (0, 1, 0), 5)
    assert rep.lhs == pytest.approx(1.0, abs=1e-12)
    assert rep.rhs == pytest.approx(1.0, abs=1e-12)


def test_doob_rows_sum_to_one(env2):
    fld = compute_u(env2, THETA, 10)
    kern = doob_kernel(fld)
    for n in range(10):
        rows = kern._levels[n][2]
        assert np.abs(rows.sum(axis=1) - 1.0).max() <= 1e-12
        assert rows.min() > 0


def test_doob_reduces_to_tilted_step_law_for_deterministic(uniform3):
    env = sample_window(uniform3, cone_geometry(0, 6, (0, 0, 0)), 8)
    fld = compute_u(env, THETA, 5)
    kern = doob_kernel(fld)
    qt = tilted_step_law(np.full(6, 1 / 6), THETA)
    assert np.allclose(kern.row(2, (1, 1, 0)), qt, atol=1e-12)


def test_doob_at_zero_tilt_is_quenched_kernel(env2):
    fld = compute_u(env2, np.zeros(3), 8)
    kern = doob_kernel(fld)
    assert np.allclose(kern.row(3, (1, 0, 0)), env2.cell(3, (1, 0, 0)),
                       atol=1e-12)


def test_tilted_sim_zero_tilt_equals_quenched(env2):
    fld = compute_u(env2, np.zeros(3), 12)
    kern = doob_kernel(fld)
    tilted = simulate_tilted(kern, (0, (0, 0, 0)), 10, 300, seed=17)
    quenched = simulate_quenched(env2, (0, (0, 0, 0)), 10, 300, seed=17)
    assert np.array_equal(tilted.steps, quenched.steps)
    assert np.allclose(tilted.weights, 1.0, atol=1e-12)


def test_tilted_sim_velocity(twopoint3):
    from rwspace.rate import grad_log_phi
    env = sample_window(twopoint3, cone_geometry(0, 41, (0, 0, 0)), 4)
    fld = compute_u(env, THETA, 40)
    kern = doob_kernel(fld)
    ens = simulate_tilted(kern, (0, (0, 0, 0)), 30, 3000, seed=23)
    vel = ens.endpoints() / 30
    target = grad_log_phi(twopoint3.mean_kernel(), THETA)
    sem = vel.std(axis=0) / np.sqrt(len(ens))
    # quenched per-environment velocity deviates from the averaged target at
    # O(1/sqrt(n)) too; allow a drift margin on top of pure sampling error
    assert (np.abs(vel.mean(axis=0) - target) <= 5 * sem + 0.05).all()


def test_tilted_weights_unbiased_for_fixed_path(env2):
    # reweighted indicator of a fixed length-3 path == quenched probability
    fld = compute_u(env2, THETA, 19)
    kern = doob_kernel(fld)
    n_rep = 40_000
    ens = simulate_tilted(kern, (0, (0, 0, 0)), 3, n_rep, seed=29)
    target = np.array([0, 2, 0], dtype=np.uint8)
    hit = (ens.steps == target).all(axis=1)
    est = float((ens.weights * hit).mean())
    sem = float((ens.weights * hit).std(ddof=1) / np.sqrt(n_rep))
    truth = quenched_path_prob(env2, Path(0, np.zeros(3, dtype=np.int64), target))
    assert abs(est - truth) <= 3 * sem


def test_martingale_mean_exact_enumeration_d1(twopoint1):
    """E_P[u_N(., 0, 0)] = 1 checked by total enumeration of the atom
    assignment on every cone cell (d=1, N=4: 16 cells, 2^16 assignments)."""
    N = 4
    cells = [(n, x) for n in range(N) for x in range(-n, n + 1)]
    atoms, probs = twopoint1.atoms, twopoint1.probs
    theta = np.array([0.3])
    lp = log_phi(twopoint1.mean_kernel(), theta)
    tplus, tminus = np.exp(theta[0] - lp), np.exp(-theta[0] - lp)
    total = 0.0
    for assign in itertools.product(range(2), repeat=len(cells)):
        table = {c: atoms[a] for c, a in zip(cells, assign)}
        weight = np.prod([probs[a] for a in assign])
        u = {x: 1.0 for x in range(-N, N + 1)}
        for n in range(N - 1, -1, -1):
            u = {x: table[(n, x)][0] * tplus * u[x + 1]
                 + table[(n, x)][1] * tminus * u[x - 1]
                 for x in range(-n, n + 1)}
        total += weight * u[0]
    assert total == pytest.approx(1.0, abs=1e-12)


def test_martingale_mean_exact_enumeration_d3(twopoint3):
    # d=3, N=2: cone cells are 1 + 7 = 8, so 256 assignments
    from rwspace.lattice import l1_ball
    N = 2
    cells = [(n, tuple(x)) for n in range(N) for x in l1_ball(3, n)]
    atoms, probs = twopoint3.atoms, twopoint3.probs
    theta = np.array([0.1, 0.0, 0.0])
    lp = log_phi(twopoint3.mean_kernel(), theta)
    steps = StepSet(3).steps
    tilts = np.exp(np.array([theta[k // 2] * (1 - 2 * (k % 2)) - lp
                             for k in range(6)]))
    total = 0.0
    for assign in itertools.product(range(2), repeat=len(cells)):
        table = {c: atoms[a] for c, a in zip(cells, assign)}
        weight = np.prod([probs[a] for a in assign])
        u = {tuple(x): 1.0 for x in l1_ball(3, N)}
        for n in range(N - 1, -1, -1):
            u = {tuple(x): sum(table[(n, tuple(x))][zi] * tilts[zi]
                               * u[tuple(np.asarray(x) + steps[zi])]
                               for zi in range(6))
                 for x in l1_ball(3, n)}
        total += weight * u[(0, 0, 0)]
    assert total == pytest.approx(1.0, abs=1e-12)


def test_martingale_diagnostics_against_exact_G(twopoint3):
    diag = martingale_diagnostics(twopoint3, [0.1, 0, 0], [2, 4, 8],
                                  env_replicas=4000, seed=11)
    assert (np.abs(diag.mean - 1.0) <= 3 * diag.mean_stderr).all()
    assert (np.abs(diag.second_moment - diag.exact_G)
            <= 3 * diag.second_moment_stderr).all()


def test_martingale_diagnostics_trivial_cases(uniform3):
    diag = martingale_diagnostics(uniform3, [0.1, 0, 0], [2, 4],
                                  env_replicas=50, seed=1,
                                  compute_exact_G=False)
    assert np.abs(diag.samples - 1.0).max() <= 1e-12
    diag0 = martingale_diagnostics(uniform3, np.zeros(3), [2, 4],
                                   env_replicas=50, seed=1,
                                   compute_exact_G=False)
    assert np.abs(diag0.samples - 1.0).max() <= 1e-12


def test_rate_convergence_trivial(uniform3, twopoint3):
    t = quenched_rate_convergence(uniform3, [0.2, 0, 0], [4, 8], 8, seed=2)
    assert np.abs(t.log_u_over_n).max() <= 1e-12
    t0 = quenched_rate_convergence(twopoint3, np.zeros(3), [4, 8], 8, seed=2)
    assert np.abs(t0.log_u_over_n).max() <= 1e-12


def test_rate_convergence_decay(twopoint3):
    t = quenched_rate_convergence(twopoint3, [0.1, 0, 0], [8, 16, 32], 16,
                                  seed=6)
    med = t.median_abs
    assert med[-1] < med[0]


def test_rate_convergence_warns_below_d3(twopoint1):
    with pytest.warns(UserWarning):
        quenched_rate_convergence(twopoint1, [0.1], [4, 8], 4, seed=3)
