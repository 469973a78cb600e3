"""Finite-horizon harmonic fields and the Doob-transformed walk.

The field u_N(omega, n, x) = E^omega_{n,x}[e^{<theta, X_N - X_n>}] /
phi(theta)^{N-n} is filled by backward induction from the all-ones terminal
level over a cone that contains every reachable site, so no truncation
enters. The transformed kernel divides consecutive levels of the *same*
horizon, which makes its rows sum to one exactly (the numerator sum is the
very expression that defined the denominator), at the price of being the
horizon-N approximation of the limiting kernel; martingale_diagnostics
quantifies that approximation.

The backward induction runs in linear arithmetic normally and switches to
log-space (logsumexp per site) automatically when |theta|_1 * horizon is
large enough for intermediate products to threaten overflow; results agree
to rounding and the switch is invisible in the interfaces, which always
expose log values alongside linear ones.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import seeds
from .collisions import collision_series, recursion_G
from .environment import EnvDistribution, EnvWindow
from .errors import WindowBoundsError
from .lattice import StepSet, l1_ball, lookup_rows, sort_sites
from .rate import log_phi as _log_phi
from .walks import PathEnsemble

LOG_SPACE_THRESHOLD = 30.0


def _tilt_exponents(theta: np.ndarray, lp: float, d: int) -> np.ndarray:
    """<theta, z> - log phi for each canonical step z."""
    out = np.empty(2 * d)
    out[0::2] = theta - lp
    out[1::2] = -theta - lp
    return out


def _backward_levels(theta, lp, levels, cells_fn, d, log_mode, kill_missing=False):
    """Shared backward-induction engine.

    levels: list of (n, sites, keys) sorted by n ascending; the last level is
    the terminal one (u = 1). cells_fn(n, sites) -> (S, 2d) realized cells.
    kill_missing: neighbors absent from the next level contribute u = 0
    (used by tube-shaped proposals); with cone levels every neighbor exists.
    Returns dict n -> log u values (log storage regardless of compute mode).
    """
    tilts = _tilt_exponents(np.asarray(theta, dtype=np.float64), lp, d)
    steps = StepSet(d).steps
    out = {}
    n_term, sites_term, _ = levels[-1]
    out[n_term] = np.zeros(len(sites_term))
    nxt = (np.zeros(len(sites_term)) if log_mode else np.ones(len(sites_term)))
    for (n, sites, keys), (n1, sites1, keys1) in zip(levels[-2::-1], levels[::-1]):
        cells = cells_fn(n, sites)
        miss = "mask" if kill_missing else "raise"
        if log_mode:
            terms = np.full((len(sites), 2 * d), -np.inf)
        else:
            acc = np.zeros(len(sites))
        for zi in range(2 * d):
            idx = lookup_rows(keys1, sites + steps[zi], d, missing=miss)
            ok = idx >= 0
            if log_mode:
                vals = np.log(cells[:, zi]) + tilts[zi] + np.where(ok, nxt[idx], -np.inf)
                terms[:, zi] = np.where(ok, vals, -np.inf)
            else:
                acc += np.where(ok, cells[:, zi] * np.exp(tilts[zi]) * nxt[idx], 0.0)
        if log_mode:
            cur = logsumexp(terms, axis=1)
            out[n] = cur
        else:
            cur = acc
            out[n] = np.log(cur)
        nxt = cur
    return out


@dataclass(eq=False)
class HarmonicField:
    """u values over the cone {(n, x): n0 <= n <= N, |x - x0|_1 <= n - n0 + r0},
    stored in log form (values are strictly positive by ellipticity)."""

    env: EnvWindow
    theta: np.ndarray
    n0: int
    N: int
    x0: np.ndarray
    r0: int
    log_phi: float
    log_space: bool
    _levels: dict = field(default_factory=dict, repr=False)  # n -> (sites, keys, log_u)

    @property
    def d(self) -> int:
        return self.env.d

    def level_sites(self, n: int) -> np.ndarray:
        return self._levels[n][0]

    def log_u_level(self, n: int) -> np.ndarray:
        return self._levels[n][2]

    def u_level(self, n: int) -> np.ndarray:
        return np.exp(self._levels[n][2])

    def log_value(self, n: int, x) -> float:
        if n not in self._levels:
            raise WindowBoundsError(f"level {n} outside field range [{self.n0}, {self.N}]")
        sites, keys, log_u = self._levels[n]
        row = lookup_rows(keys, np.atleast_2d(np.asarray(x, dtype=np.int64)), self.d)
        return float(log_u[int(row[0])])

    def value(self, n: int, x) -> float:
        return float(np.exp(self.log_value(n, x)))


def compute_u(env: EnvWindow, theta, N: int, base=None, r0: int = 0) -> HarmonicField:
    """Fill the harmonic field by backward induction.

    base is (n0, x0); default (env.n_lo, origin). The environment window
    must cover the full cone from the base to level N (cells at levels
    n0..N-1), otherwise a WindowBoundsError names the missing site.
    """
    d = env.d
    theta = np.asarray(theta, dtype=np.float64)
    if base is None:
        n0, x0 = env.n_lo, np.zeros(d, dtype=np.int64)
    else:
        n0, x0 = int(base[0]), np.asarray(base[1], dtype=np.int64)
    if N <= n0:
        raise WindowBoundsError(f"horizon N={N} must exceed base level n0={n0}")
    q = env.dist.mean_kernel()
    lp = _log_phi(q, theta)
    from .lattice import sort_sites
    levels = []
    for n in range(n0, N + 1):
        sites = l1_ball(d, (n - n0) + r0, x0)
        keys = sort_sites(sites, d)[1]
        levels.append((n, sites, keys))
    log_mode = float(np.abs(theta).sum()) * (N - n0) > LOG_SPACE_THRESHOLD
    log_u = _backward_levels(theta, lp, levels,
                             lambda n, s: env.cells_at(n, s), d, log_mode)
    fld = HarmonicField(env=env, theta=theta, n0=n0, N=N, x0=x0, r0=r0,
                        log_phi=lp, log_space=log_mode)
    for n, sites, keys in levels:
        fld._levels[n] = (sites, keys, log_u[n])
    return fld


@dataclass(eq=False)
class ShiftIdentityReport:
    n: int
    x: np.ndarray
    N: int
    lhs: float   # u_N(T_{n,x} omega, 0, 0)
    rhs: float   # u_{N+n}(omega, n, x)

    @property
    def max_rel_deviation(self) -> float:
        return abs(self.lhs - self.rhs) / max(abs(self.rhs), 1e-300)

    @property
    def ok(self) -> bool:
        return self.max_rel_deviation <= 1e-12


def shift_identity_check(env: EnvWindow, theta, n: int, x, N: int) -> ShiftIdentityReport:
    """Compare u_N(T_{n,x} omega, 0, 0) with u_{N+n}(omega, n, x), computed
    by two independent backward inductions."""
    x = np.asarray(x, dtype=np.int64)
    shifted = env.shift(n, x)
    lhs = compute_u(shifted, theta, N, base=(0, np.zeros(env.d, dtype=np.int64)))
    rhs = compute_u(env, theta, N + n, base=(n, x))
    return ShiftIdentityReport(n=n, x=x, N=N,
                               lhs=lhs.value(0, np.zeros(env.d, dtype=np.int64)),
                               rhs=rhs.value(n, x))


@dataclass(eq=False)
class TiltedKernelField:
    """Realized Doob kernel rows over the cone interior: row (n, x) gives
    the transformed step probabilities toward level n+1."""

    env: EnvWindow
    theta: np.ndarray
    n0: int
    N: int
    log_phi: float
    _levels: dict = field(default_factory=dict, repr=False)  # n -> (sites, keys, rows)
    _log_u: dict = field(default_factory=dict, repr=False)   # n -> (sites, keys, log_u)

    @property
    def d(self) -> int:
        return self.env.d

    def rows_at(self, n: int, sites) -> np.ndarray:
        if n not in self._levels:
            raise WindowBoundsError(
                f"kernel level {n} outside [{self.n0}, {self.N - 1}]")
        lsites, keys, rows = self._levels[n]
        idx = lookup_rows(keys, np.atleast_2d(np.asarray(sites, dtype=np.int64)), self.d)
        return rows[idx]

    def row(self, n: int, x) -> np.ndarray:
        return self.rows_at(n, np.atleast_2d(np.asarray(x, dtype=np.int64)))[0]

    def log_u_at(self, n: int, sites) -> np.ndarray:
        sites_k, keys, log_u = self._log_u[n]
        idx = lookup_rows(keys, np.atleast_2d(np.asarray(sites, dtype=np.int64)), self.d)
        return log_u[idx]


def doob_kernel(fld: HarmonicField) -> TiltedKernelField:
    """Transformed kernel rows from matched consecutive levels of the field:
    row(n, x)[z] = cell(n,x)[z] e^{<theta,z> - log phi} u(n+1, x+z)/u(n, x).
    Row sums are exactly 1 up to rounding because the numerator sum is the
    recursion that produced u(n, x)."""
    d = fld.d
    tilts = _tilt_exponents(fld.theta, fld.log_phi, d)
    steps = StepSet(d).steps
    kern = TiltedKernelField(env=fld.env, theta=fld.theta, n0=fld.n0, N=fld.N,
                             log_phi=fld.log_phi)
    for n in range(fld.n0, fld.N):
        sites, keys, log_u = fld._levels[n]
        sites1, keys1, log_u1 = fld._levels[n + 1]
        cells = fld.env.cells_at(n, sites)
        rows = np.empty_like(cells)
        for zi in range(2 * d):
            idx = lookup_rows(keys1, sites + steps[zi], d)
            rows[:, zi] = cells[:, zi] * np.exp(tilts[zi] + log_u1[idx] - log_u)
        kern._levels[n] = (sites, keys, rows)
        kern._log_u[n] = (sites, keys, log_u)
    kern._log_u[fld.N] = fld._levels[fld.N]
    return kern


def simulate_tilted(kernel: TiltedKernelField, start, n_steps: int,
                    replicas: int, seed: int) -> PathEnsemble:
    """Walks under the transformed kernel, with likelihood weights that make
    reweighted averages unbiased for the quenched measure:

        w = exp(-<theta, X_end - X_start> + n log phi) * u(start)/u(end).

    At theta = 0 the kernel, the sampled paths (same seed), and the weights
    all reduce to plain quenched simulation.
    """
    k, x = int(start[0]), np.asarray(start[1], dtype=np.int64)
    if not (kernel.n0 <= k and k + n_steps <= kernel.N):
        raise WindowBoundsError(
            f"tilted walk over [{k}, {k + n_steps}] needs kernel levels in "
            f"[{kernel.n0}, {kernel.N}]")
    d = kernel.d
    steps_arr = StepSet(d).steps
    theta = kernel.theta
    pos = np.tile(x, (replicas, 1))
    rep = np.arange(replicas)
    steps = np.zeros((replicas, n_steps), dtype=np.uint8)
    for t in range(n_steps):
        rows = kernel.rows_at(k + t, pos)
        cum = np.cumsum(rows, axis=1)
        u = seeds.uniform01(seed, seeds.STREAM_WALK_STEP, rep, t)
        idx = (u[:, None] >= cum).sum(axis=1).clip(max=2 * d - 1)
        steps[:, t] = idx
        pos += steps_arr[idx]
    log_u_start = kernel.log_u_at(k, x[None, :])[0]
    log_u_end = kernel.log_u_at(k + n_steps, pos)
    disp = (pos - x).astype(np.float64)
    log_w = (-disp @ theta + n_steps * kernel.log_phi + log_u_start - log_u_end)
    return PathEnsemble(k, x, steps, np.exp(log_w),
                        {"seed": seed, "mode": "tilted",
                         "theta": theta.tolist(), "N": kernel.N})


# ---------------------------------------------------------------------------
# Environment-ensemble diagnostics (forward DP, streamed level by level)
# ---------------------------------------------------------------------------

def _forward_u_samples(dist: EnvDistribution, theta, n_levels, env_replicas: int,
                       seed: int, batch: int = 256) -> np.ndarray:
    """u_n(omega, 0, 0) for every n in n_levels over sampled environments.

    Forward recursion on v(n, x) = E^omega[e^{<theta,X_n> - n log phi};
    X_n = x]; summing a level gives u at that horizon, so one sweep serves
    every requested n. Cells are sampled per level from the site-keyed
    scheme and discarded, keeping memory at one level per batch.
    Returns (env_replicas, len(n_levels)).
    """
    d = dist.d
    theta = np.asarray(theta, dtype=np.float64)
    lp = _log_phi(dist.mean_kernel(), theta)
    tilts = np.exp(_tilt_exponents(theta, lp, d))
    steps = StepSet(d).steps
    n_levels = sorted(int(n) for n in n_levels)
    n_max = n_levels[-1]
    from .lattice import sort_sites
    level_sites = []
    for n in range(n_max + 1):
        sites = l1_ball(d, n)
        keys = sort_sites(sites, d)[1]
        level_sites.append((sites, keys))
    out = np.empty((env_replicas, len(n_levels)))
    env_seeds = seeds.derive_seed_array(seed, seeds.STREAM_ENV_REPLICA,
                                        np.arange(env_replicas))
    for lo in range(0, env_replicas, batch):
        hi = min(lo + batch, env_replicas)
        sk = env_seeds[lo:hi][:, None]
        v = np.ones((hi - lo, 1))
        col = 0
        if n_levels[0] == 0:
            out[lo:hi, 0] = 1.0
            col = 1
        for n in range(n_max):
            sites, keys = level_sites[n]
            sites1, keys1 = level_sites[n + 1]
            cells = dist.sample_cells(sk, n, sites)
            v1 = np.zeros((hi - lo, len(sites1)))
            for zi in range(2 * d):
                src = lookup_rows(keys, sites1 - steps[zi], d, missing="mask")
                ok = src >= 0
                v1[:, ok] += v[:, src[ok]] * cells[:, src[ok], zi] * tilts[zi]
            v = v1
            if col < len(n_levels) and n + 1 == n_levels[col]:
                out[lo:hi, col] = v.sum(axis=1)
                col += 1
    return out


@dataclass(eq=False)
class MartingaleDiagnostics:
    theta: np.ndarray
    n_list: list
    samples: np.ndarray        # (R, len(n_list)) of u_N(omega, 0, 0)
    exact_G: np.ndarray | None # matching exact second moments, if computed

    @property
    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)

    @property
    def mean_stderr(self) -> np.ndarray:
        return self.samples.std(axis=0, ddof=1) / np.sqrt(len(self.samples))

    @property
    def second_moment(self) -> np.ndarray:
        return (self.samples ** 2).mean(axis=0)

    @property
    def second_moment_stderr(self) -> np.ndarray:
        return (self.samples ** 2).std(axis=0, ddof=1) / np.sqrt(len(self.samples))

    def summary(self) -> dict:
        out = {"n_list": list(self.n_list),
               "mean": self.mean.tolist(),
               "mean_stderr": self.mean_stderr.tolist(),
               "second_moment": self.second_moment.tolist(),
               "second_moment_stderr": self.second_moment_stderr.tolist()}
        if self.exact_G is not None:
            out["exact_G"] = self.exact_G.tolist()
        return out


def martingale_diagnostics(dist: EnvDistribution, theta, N_list, env_replicas: int,
                           seed: int, compute_exact_G: bool = True,
                           batch: int = 256) -> MartingaleDiagnostics:
    """Sample u_N(., 0, 0) over environments: the mean must sit at 1 (it is
    a mean-one martingale in N) and the second moment tracks the exact
    renewal value G_N(theta)."""
    samples = _forward_u_samples(dist, theta, N_list, env_replicas, seed, batch)
    exact = None
    if compute_exact_G:
        N_list_sorted = sorted(int(n) for n in N_list)
        n_max = max(N_list_sorted)
        series = collision_series(dist, theta, k_max=max(n_max - 1, 1))
        G = recursion_G(series, n_max)
        exact = np.array([1.0 if n == 0 else G[n - 1] for n in N_list_sorted])
    return MartingaleDiagnostics(theta=np.asarray(theta, dtype=np.float64),
                                 n_list=sorted(int(n) for n in N_list),
                                 samples=samples, exact_G=exact)


@dataclass(eq=False)
class RateConvergenceTable:
    theta: np.ndarray
    n_list: list
    log_u_over_n: np.ndarray   # (R, len(n_list)) of (1/n) log u_n(omega)

    @property
    def median_abs(self) -> np.ndarray:
        return np.median(np.abs(self.log_u_over_n), axis=0)

    def summary(self) -> dict:
        return {"n_list": list(self.n_list),
                "median_abs": self.median_abs.tolist(),
                "max_abs": np.abs(self.log_u_over_n).max(axis=0).tolist()}


def quenched_rate_convergence(dist: EnvDistribution, theta, n_list,
                              env_replicas: int, seed: int,
                              batch: int = 64) -> RateConvergenceTable:
    """Per-environment sequences (1/n) log u_n(omega, 0, 0). Their decay to
    zero is the numerical content of the quenched = averaged rate identity:
    (1/n) log E^omega[e^{<theta,X_n>}] = log phi(theta) + (1/n) log u_n."""
    if dist.d < 3:
        warnings.warn(
            f"quenched_rate_convergence in d={dist.d}: the L2-boundedness "
            f"argument behind the limit needs d >= 3; finite-horizon values "
            f"are still well defined", stacklevel=2)
    n_list = sorted(int(n) for n in n_list)
    if n_list[0] < 1:
        raise ValueError("horizons must be >= 1")
    samples = _forward_u_samples(dist, theta, n_list, env_replicas, seed, batch)
    table = np.log(samples) / np.asarray(n_list, dtype=np.float64)
    return RateConvergenceTable(theta=np.asarray(theta, dtype=np.float64),
                                n_list=n_list, log_u_over_n=table)
