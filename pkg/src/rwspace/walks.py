"""Quenched and averaged path measures.

Quenched simulation draws nearest-neighbor steps from the realized cells of
an environment window; every replica consumes its own counter stream keyed
by (seed, replica, time), so results do not depend on worker count or
batching. The averaged path marginal is the classical random walk with step
law q = E[omega_{0,0}], for which this module provides exact finite-n laws
two independent ways: a dense lattice convolution and a closed-form
multinomial sum usable site by site when the full cube would not fit in
memory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp

from . import seeds
from .environment import EnvDistribution, EnvWindow
from .errors import ResourceLimitError, WindowBoundsError
from .lattice import StepSet
from .rate import phi


@dataclass(frozen=True)
class Path:
    """A lattice path: start (time, site) plus step indices into the
    canonical step order. Positions are reconstructed on demand; storage is
    one byte per step."""

    start_time: int
    start_site: np.ndarray
    steps: np.ndarray  # (L,) uint8

    def __len__(self) -> int:
        return len(self.steps)

    def positions(self) -> np.ndarray:
        """(L+1, d) positions including the start."""
        d = len(self.start_site)
        moves = StepSet(d).steps[self.steps]
        out = np.empty((len(self.steps) + 1, d), dtype=np.int64)
        out[0] = self.start_site
        np.cumsum(moves, axis=0, out=out[1:])
        out[1:] += self.start_site
        return out

    @property
    def end_site(self) -> np.ndarray:
        return self.positions()[-1]


@dataclass(eq=False)
class PathEnsemble:
    """Replicated paths from a common start, with importance weights
    (all 1.0 for plain quenched sampling)."""

    start_time: int
    start_site: np.ndarray
    steps: np.ndarray          # (R, L) uint8
    weights: np.ndarray        # (R,) positive
    seed_info: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.steps.shape[0]

    @property
    def n_steps(self) -> int:
        return self.steps.shape[1]

    def path(self, i: int) -> Path:
        return Path(self.start_time, self.start_site, self.steps[i])

    def positions(self) -> np.ndarray:
        """(R, L+1, d) positions of every replica."""
        d = len(self.start_site)
        moves = StepSet(d).steps[self.steps]
        pos = np.concatenate(
            [np.zeros((len(self), 1, d), dtype=np.int64), np.cumsum(moves, axis=1)],
            axis=1)
        return pos + self.start_site

    def endpoints(self) -> np.ndarray:
        d = len(self.start_site)
        moves = StepSet(d).steps[self.steps]
        return moves.sum(axis=1) + self.start_site

    def save_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for i in range(len(self)):
                fh.write(json.dumps({
                    "k": self.start_time,
                    "x": self.start_site.tolist(),
                    "steps": self.steps[i].tolist(),
                    "weight": float(self.weights[i]),
                }) + "\n")

    @staticmethod
    def load_jsonl(path) -> "PathEnsemble":
        starts, sites, steps, weights = [], [], [], []
        with open(path) as fh:
            for line in fh:
                rec = json.loads(line)
                starts.append(rec["k"])
                sites.append(rec["x"])
                steps.append(rec["steps"])
                weights.append(rec["weight"])
        if not steps:
            raise ValueError(f"{path} holds no paths")
        if len(set(starts)) != 1 or len(set(map(tuple, sites))) != 1:
            raise ValueError("ensemble files must share a common start")
        return PathEnsemble(starts[0], np.asarray(sites[0], dtype=np.int64),
                            np.asarray(steps, dtype=np.uint8),
                            np.asarray(weights, dtype=np.float64))


def quenched_step_law(env: EnvWindow, n: int, x) -> np.ndarray:
    """The realized cell (pi_{n,n+1}(x, x+z))_z at (n, x)."""
    return env.cell(n, x)


def _check_cone_coverage(env: EnvWindow, k: int, x: np.ndarray, n_steps: int) -> None:
    g = env.geometry
    if not (g.n_lo <= k and k + max(n_steps, 1) <= g.n_hi):
        raise WindowBoundsError(
            f"walk over times [{k}, {k + n_steps}) needs window levels in "
            f"[{g.n_lo}, {g.n_hi})")
    r = n_steps - 1  # last level whose cells are read is k + n_steps - 1
    if g.kind == "cone":
        slack = (k - g.n_lo) + g.r0 - int(np.abs(x - np.asarray(g.center)).sum())
        if slack < 0:
            raise WindowBoundsError(
                f"start {x.tolist()} at time {k} lies outside the window cone")
    else:
        lo, hi = np.asarray(g.lo), np.asarray(g.hi)
        if np.any(x - r < lo) or np.any(x + r > hi):
            raise WindowBoundsError(
                f"reachable ball of radius {r} around {x.tolist()} exceeds the "
                f"window box [{g.lo}, {g.hi}]")


def simulate_quenched(env: EnvWindow, start, n_steps: int, replicas: int,
                      seed: int) -> PathEnsemble:
    """replicas i.i.d. walks under the quenched measure P^omega_{k,x}.

    Step t of replica r uses the uniform keyed by (seed, r, t); cells are
    read through the window's site-keyed scheme, so output is identical
    however the replicas are batched.
    """
    k, x = int(start[0]), np.asarray(start[1], dtype=np.int64)
    _check_cone_coverage(env, k, x, n_steps)
    steps = np.zeros((replicas, n_steps), dtype=np.uint8)
    if replicas == 0 or n_steps == 0:
        return PathEnsemble(k, x, steps[:, :n_steps], np.ones(replicas),
                            {"seed": seed, "mode": "quenched"})
    d = env.d
    moves = StepSet(d).steps
    pos = np.tile(x, (replicas, 1))
    rep = np.arange(replicas)
    for t in range(n_steps):
        cells = env.cells_at(k + t, pos)
        cum = np.cumsum(cells, axis=1)
        u = seeds.uniform01(seed, seeds.STREAM_WALK_STEP, rep, t)
        idx = (u[:, None] >= cum).sum(axis=1).clip(max=2 * d - 1)
        steps[:, t] = idx
        pos += moves[idx]
    return PathEnsemble(k, x, steps, np.ones(replicas),
                        {"seed": seed, "mode": "quenched"})


def quenched_path_prob(env: EnvWindow, path: Path) -> float:
    """Product of realized cell probabilities along the path (1.0 for the
    empty path). Raises WindowBoundsError if the path leaves the window."""
    p = 1.0
    pos = path.positions()
    for t, z in enumerate(path.steps):
        cell = env.cell(path.start_time + t, pos[t])
        p *= float(cell[z])
    return p


# ---------------------------------------------------------------------------
# Exact averaged laws
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class MarginalLaw:
    """Dense exact law of X_n under the averaged measure, on the cube
    [-n, n]^d (positions outside have probability zero)."""

    d: int
    n: int
    cube: np.ndarray  # shape (2n+1,)*d, entry at x + n

    def prob(self, x) -> float:
        idx = tuple(np.asarray(x, dtype=np.int64) + self.n)
        if any(i < 0 or i > 2 * self.n for i in idx):
            return 0.0
        return float(self.cube[idx])

    def total(self) -> float:
        return float(self.cube.sum())

    def support_axis(self) -> np.ndarray:
        return np.arange(-self.n, self.n + 1)

    def mean(self) -> np.ndarray:
        ax = self.support_axis().astype(np.float64)
        out = np.empty(self.d)
        for k in range(self.d):
            shape = [1] * self.d
            shape[k] = 2 * self.n + 1
            out[k] = float((self.cube * ax.reshape(shape)).sum())
        return out

    def mgf(self, theta) -> float:
        theta = np.asarray(theta, dtype=np.float64)
        ax = self.support_axis().astype(np.float64)
        acc = self.cube
        for k in range(self.d):
            shape = [1] * self.d
            shape[k] = 2 * self.n + 1
            acc = acc * np.exp(theta[k] * ax).reshape(shape)
        return float(acc.sum())

    def region_prob(self, center, radius: float, norm: str = "l2") -> float:
        """Probability of the closed ball around center (lattice units).
        Accumulates per-axis distances by broadcasting, so the only full-size
        temporary is one float64 cube."""
        center = np.asarray(center, dtype=np.float64)
        acc = np.zeros((1,) * self.d)
        for k in range(self.d):
            shape = [1] * self.d
            shape[k] = 2 * self.n + 1
            along = np.abs(self.support_axis() - center[k]).reshape(shape)
            if norm == "l2":
                acc = acc + along ** 2
            elif norm == "l1":
                acc = acc + along
            elif norm == "linf":
                acc = np.maximum(acc, along)
            else:
                raise ValueError(f"unknown norm {norm!r}")
        cutoff = radius ** 2 if norm == "l2" else radius
        return float(self.cube[acc <= cutoff].sum())


def averaged_marginal(dist: EnvDistribution, n: int,
                      max_bytes: int = 6 * 2 ** 30) -> MarginalLaw:
    """The exact law of X_n under the averaged measure by n-fold lattice
    convolution of q. Needs two (2n+1)^d cubes; raises ResourceLimitError
    with the required size when that exceeds max_bytes."""
    d = dist.d
    side = 2 * n + 1
    need = 2 * side ** d * 8
    if need > max_bytes:
        raise ResourceLimitError(
            f"dense marginal at n={n}, d={d} needs {need} bytes "
            f"(two cubes of side {side}); cap is {max_bytes}")
    q = dist.mean_kernel()
    cube = np.zeros((side,) * d)
    cube[(n,) * d] = 1.0
    steps = StepSet(d).steps
    for _ in range(n):
        nxt = np.zeros_like(cube)
        for zi, z in enumerate(steps):
            src = [slice(None)] * d
            dst = [slice(None)] * d
            k = int(np.nonzero(z)[0][0])
            if z[k] > 0:
                src[k], dst[k] = slice(0, side - 1), slice(1, side)
            else:
                src[k], dst[k] = slice(1, side), slice(0, side - 1)
            nxt[tuple(dst)] += q[zi] * cube[tuple(src)]
        cube = nxt
    return MarginalLaw(d, n, cube)


def _compositions(total: int, parts: int) -> np.ndarray:
    """All nonnegative integer vectors of the given length summing to total,
    as a (C, parts) array."""
    if parts == 1:
        return np.array([[total]], dtype=np.int64)
    rows = []
    for first in range(total + 1):
        rest = _compositions(total - first, parts - 1)
        rows.append(np.column_stack(
            [np.full(len(rest), first, dtype=np.int64), rest]))
    return np.concatenate(rows, axis=0)


def averaged_point_prob(dist: EnvDistribution, n: int, x,
                        max_terms: int = 50_000_000) -> float:
    """P(X_n = x) in closed form: a sum over the per-axis step-count vectors
    of multinomial weights, evaluated in log space. Independent of, and
    equal to, the dense convolution."""
    d = dist.d
    x = np.asarray(x, dtype=np.int64)
    q = dist.mean_kernel()
    qp, qm = np.log(q[0::2]), np.log(q[1::2])
    absx = np.abs(x)
    spare = n - int(absx.sum())
    if spare < 0 or spare % 2 != 0:
        return 0.0
    S = spare // 2
    n_comp = 1
    for j in range(1, d):
        n_comp = n_comp * (S + j) // j
    if n_comp > max_terms:
        raise ResourceLimitError(
            f"point probability at n={n}, x={x.tolist()} needs {n_comp} "
            f"composition terms; cap is {max_terms}")
    t = _compositions(S, d)                      # (C, d)
    a = t + np.maximum(x, 0)                     # forward step counts
    b = t + np.maximum(-x, 0)                    # backward step counts
    logw = (gammaln(n + 1)
            - gammaln(a + 1.0).sum(axis=1) - gammaln(b + 1.0).sum(axis=1)
            + (a * qp).sum(axis=1) + (b * qm).sum(axis=1))
    return float(np.exp(logsumexp(logw)))


def averaged_region_prob(dist: EnvDistribution, n: int, center, radius: float,
                         norm: str = "l2") -> float:
    """P(|X_n - center| <= radius) summed from exact point probabilities;
    usable at horizons where the dense cube would not fit in memory."""
    d = dist.d
    center = np.asarray(center, dtype=np.float64)
    r_int = int(np.floor(radius))
    axes = [np.arange(int(np.ceil(c - radius)), int(np.floor(c + radius)) + 1)
            for c in center]
    grids = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1).astype(np.int64)
    delta = pts - center
    if norm == "l2":
        keep = (delta ** 2).sum(axis=1) <= radius ** 2
    elif norm == "l1":
        keep = np.abs(delta).sum(axis=1) <= radius
    elif norm == "linf":
        keep = np.abs(delta).max(axis=1) <= radius
    else:
        raise ValueError(f"unknown norm {norm!r}")
    del r_int
    total = 0.0
    for x in pts[keep]:
        total += averaged_point_prob(dist, n, x)
    return total


@dataclass(frozen=True)
class MgfCheck:
    value: float
    expected: float

    @property
    def rel_error(self) -> float:
        return abs(self.value - self.expected) / abs(self.expected)


def averaged_mgf_check(dist: EnvDistribution, theta, n: int,
                       max_bytes: int = 6 * 2 ** 30) -> MgfCheck:
    """E[e^{<theta, X_n>}] from the exact marginal, paired with phi(theta)^n
    which it must reproduce to relative 1e-10."""
    law = averaged_marginal(dist, n, max_bytes=max_bytes)
    return MgfCheck(value=law.mgf(theta),
                    expected=phi(dist.mean_kernel(), theta) ** n)
