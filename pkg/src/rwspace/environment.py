"""Space-time product environments.

An environment assigns to every (time, site) cell an independent random
probability vector over the 2d nearest-neighbor steps, with a uniform
ellipticity floor c > 0 on every component. Three laws are provided:

* ``Deterministic(q)``     -- every cell equals the fixed vector q;
* ``FiniteSupport(atoms)`` -- a finite mixture, which is what every exact
  enumeration oracle in this package needs;
* ``DirichletCells(alpha)``-- cells are c + (1 - 2dc) * Dirichlet(alpha).
  The floor is imposed by construction (affine squeeze toward the uniform
  corner), not by rejection, so sampling is O(1) per cell. The squeezed law
  is *not* the plain Dirichlet; its mean and second moments below are the
  closed forms of the squeezed law.

Cells are sampled by a site-keyed counter scheme: the cell at (n, x) is a
pure function of (master seed, n, x), independent of the window shape that
happens to contain it. Windows can therefore be regenerated, reshaped, or
shared across workers without coordination, and the shift maps T_{m,y} act
on windows by pure coordinate relabeling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import gammaincinv

from . import seeds
from .errors import ConfigError, WindowBoundsError
from .lattice import StepSet, l1_ball, lookup_rows, sort_sites

PROB_SUM_TOL = 1e-12


def validate_prob_vector(weights: np.ndarray, c: float, what: str = "probability vector") -> np.ndarray:
    """Check simplex membership (within 1e-12) and the ellipticity floor."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1:
        raise ConfigError(f"{what}: expected 1-d weights, got shape {w.shape}")
    if abs(w.sum() - 1.0) > PROB_SUM_TOL:
        raise ConfigError(f"{what}: weights sum to {w.sum()!r}, not 1")
    if np.any(w < c - 1e-15):
        raise ConfigError(f"{what}: min weight {w.min()!r} below ellipticity floor {c}")
    return w


class EnvDistribution:
    """Common law interface: mean kernel, cell second moments, site-keyed
    sampling, and the JSON spec round trip."""

    kind: str

    def __init__(self, step_set: StepSet, c: float):
        if not (0.0 < c <= 1.0 / step_set.count):
            raise ConfigError(f"ellipticity c={c} outside (0, 1/{step_set.count}]")
        self.step_set = step_set
        self.c = float(c)

    @property
    def d(self) -> int:
        return self.step_set.d

    def mean_kernel(self) -> np.ndarray:
        """q(z) = E[pi_{0,1}(0,z)], one entry per canonical step."""
        raise NotImplementedError

    def second_moment(self) -> np.ndarray:
        """(2d, 2d) matrix E[pi_{0,1}(0,x) pi_{0,1}(0,y)] over step pairs."""
        raise NotImplementedError

    def sample_cells(self, seed, n, sites: np.ndarray) -> np.ndarray:
        """Cells at the given absolute coordinates.

        seed: int or uint64 array (broadcast as leading axes, e.g. one seed
        per environment replica). n: int or (S,) array. sites: (S, d).
        Returns (..., S, 2d) float64 rows on the simplex with floor c.
        """
        raise NotImplementedError

    # -- JSON spec ---------------------------------------------------------

    def to_spec(self) -> dict:
        raise NotImplementedError

    @staticmethod
    def from_spec(spec: dict) -> "EnvDistribution":
        try:
            d = int(spec["d"])
            kind = spec["kind"]
            c = float(spec["c"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad environment spec: {exc}") from exc
        allowed = {"deterministic": {"d", "kind", "c", "q"},
                   "finite": {"d", "kind", "c", "atoms"},
                   "dirichlet": {"d", "kind", "c", "alpha"}}
        if kind not in allowed:
            raise ConfigError(f"unknown environment kind {kind!r}")
        extra = set(spec) - allowed[kind]
        if extra:
            raise ConfigError(f"unknown keys in environment spec: {sorted(extra)}")
        ss = StepSet(d)
        try:
            if kind == "deterministic":
                return Deterministic(ss, c, spec["q"])
            if kind == "finite":
                atoms = [(a["weights"], a["prob"]) for a in spec["atoms"]]
                return FiniteSupport(ss, c, atoms)
            return DirichletCells(ss, c, spec["alpha"])
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad environment spec: {exc}") from exc


class Deterministic(EnvDistribution):
    kind = "deterministic"

    def __init__(self, step_set: StepSet, c: float, q):
        super().__init__(step_set, c)
        self.q = validate_prob_vector(q, c, "deterministic q")

    def mean_kernel(self) -> np.ndarray:
        return self.q.copy()

    def second_moment(self) -> np.ndarray:
        return np.outer(self.q, self.q)

    def sample_cells(self, seed, n, sites) -> np.ndarray:
        S = np.atleast_2d(sites).shape[0]
        sshape = seed.shape if isinstance(seed, np.ndarray) else ()
        shape = np.broadcast_shapes(sshape, np.shape(n), (S,))
        return np.broadcast_to(self.q, shape + (self.step_set.count,)).copy()

    def to_spec(self) -> dict:
        return {"d": self.d, "kind": self.kind, "c": self.c, "q": self.q.tolist()}


class FiniteSupport(EnvDistribution):
    kind = "finite"

    def __init__(self, step_set: StepSet, c: float, atoms):
        super().__init__(step_set, c)
        vecs, probs = [], []
        for w, p in atoms:
            vecs.append(validate_prob_vector(w, c, "finite-support atom"))
            probs.append(float(p))
        self.atoms = np.array(vecs, dtype=np.float64)
        self.probs = np.array(probs, dtype=np.float64)
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > PROB_SUM_TOL:
            raise ConfigError(f"mixture probabilities sum to {self.probs.sum()!r}, not 1")
        self._cum = np.cumsum(self.probs)
        self._cum[-1] = 1.0  # guard searchsorted against rounding

    @property
    def n_atoms(self) -> int:
        return len(self.probs)

    def mean_kernel(self) -> np.ndarray:
        return self.probs @ self.atoms

    def second_moment(self) -> np.ndarray:
        return np.einsum("a,ax,ay->xy", self.probs, self.atoms, self.atoms)

    def sample_atom_indices(self, seed, n, sites) -> np.ndarray:
        sites = np.atleast_2d(np.asarray(sites, dtype=np.int64))
        coords = [sites[:, k] for k in range(self.d)]
        u = seeds.uniform01(seed, seeds.STREAM_ENV_CELL, n, *coords, 0)
        return np.searchsorted(self._cum, u, side="right").clip(max=self.n_atoms - 1)

    def sample_cells(self, seed, n, sites) -> np.ndarray:
        return self.atoms[self.sample_atom_indices(seed, n, sites)]

    def to_spec(self) -> dict:
        return {"d": self.d, "kind": self.kind, "c": self.c,
                "atoms": [{"weights": w.tolist(), "prob": float(p)}
                          for w, p in zip(self.atoms, self.probs)]}


class DirichletCells(EnvDistribution):
    kind = "dirichlet"

    def __init__(self, step_set: StepSet, c: float, alpha):
        super().__init__(step_set, c)
        self.alpha = np.asarray(alpha, dtype=np.float64)
        if self.alpha.shape != (step_set.count,) or np.any(self.alpha <= 0):
            raise ConfigError(
                f"dirichlet needs {step_set.count} positive concentration "
                f"parameters, got {np.asarray(alpha).tolist()}")
        self._scale = 1.0 - step_set.count * self.c  # weight left after the floor

    def mean_kernel(self) -> np.ndarray:
        return self.c + self._scale * self.alpha / self.alpha.sum()

    def second_moment(self) -> np.ndarray:
        a0 = self.alpha.sum()
        ab = self.alpha / a0
        # E[w_x w_y] for w ~ Dirichlet(alpha)
        eww = np.outer(ab, ab) * (a0 / (a0 + 1.0)) + np.diag(ab) / (a0 + 1.0)
        s = self._scale
        return self.c ** 2 + self.c * s * (ab[:, None] + ab[None, :]) + s * s * eww

    def sample_cells(self, seed, n, sites) -> np.ndarray:
        sites = np.atleast_2d(np.asarray(sites, dtype=np.int64))
        coord_words = [n] + [sites[:, k] for k in range(self.d)]
        gam = []
        for j in range(self.step_set.count):
            u = seeds.uniform01(seed, seeds.STREAM_ENV_CELL, *coord_words, j)
            u = np.clip(u, 1e-18, 1.0 - 1e-16)
            gam.append(gammaincinv(self.alpha[j], u))
        g = np.stack(gam, axis=-1)
        w = g / g.sum(axis=-1, keepdims=True)
        return self.c + self._scale * w

    def to_spec(self) -> dict:
        return {"d": self.d, "kind": self.kind, "c": self.c, "alpha": self.alpha.tolist()}


def mean_kernel(dist: EnvDistribution) -> np.ndarray:
    return dist.mean_kernel()


def load_env_spec(path) -> EnvDistribution:
    with open(path) as fh:
        try:
            spec = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"environment spec {path}: {exc}") from exc
    return EnvDistribution.from_spec(spec)


# ---------------------------------------------------------------------------
# Window geometry and realized windows
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WindowGeometry:
    """Per-level site sets for times n_lo <= n < n_hi.

    The default construction is a cone: level n holds the L1 ball of radius
    (n - n_lo) + r0 around center, which contains every site a nearest-
    neighbor walk started in the radius-r0 base can reach.
    """

    n_lo: int
    n_hi: int
    d: int
    kind: str
    center: tuple = ()
    r0: int = 0
    lo: tuple = ()
    hi: tuple = ()

    def level_sites(self, n: int) -> np.ndarray:
        if not self.n_lo <= n < self.n_hi:
            raise WindowBoundsError(
                f"level {n} outside window time range [{self.n_lo}, {self.n_hi})")
        if self.kind == "cone":
            return l1_ball(self.d, (n - self.n_lo) + self.r0,
                           np.asarray(self.center, dtype=np.int64))
        lo = np.asarray(self.lo, dtype=np.int64)
        hi = np.asarray(self.hi, dtype=np.int64)
        grids = np.meshgrid(*[np.arange(a, b + 1, dtype=np.int64)
                              for a, b in zip(lo, hi)], indexing="ij")
        pts = np.stack([g.ravel() for g in grids], axis=1)
        return sort_sites(pts, self.d)[0]

    def contains_time(self, n: int) -> bool:
        return self.n_lo <= n < self.n_hi

    def contains_sites(self, n: int, sites: np.ndarray) -> np.ndarray:
        """Vectorized membership of (S, d) sites in level n (False if the
        time itself is out of range)."""
        sites = np.atleast_2d(np.asarray(sites, dtype=np.int64))
        if not self.contains_time(n):
            return np.zeros(sites.shape[0], dtype=bool)
        if self.kind == "cone":
            r = (n - self.n_lo) + self.r0
            return np.abs(sites - np.asarray(self.center, dtype=np.int64)).sum(axis=1) <= r
        lo = np.asarray(self.lo, dtype=np.int64)
        hi = np.asarray(self.hi, dtype=np.int64)
        return np.all((sites >= lo) & (sites <= hi), axis=1)

    def shifted(self, m: int, y: np.ndarray) -> "WindowGeometry":
        y = np.asarray(y, dtype=np.int64)
        if self.kind == "cone":
            return WindowGeometry(self.n_lo - m, self.n_hi - m, self.d, "cone",
                                  tuple((np.asarray(self.center) - y).tolist()),
                                  self.r0)
        return WindowGeometry(self.n_lo - m, self.n_hi - m, self.d, "box",
                              lo=tuple((np.asarray(self.lo) - y).tolist()),
                              hi=tuple((np.asarray(self.hi) - y).tolist()))

    def to_spec(self) -> dict:
        out = {"n_lo": self.n_lo, "n_hi": self.n_hi, "d": self.d, "kind": self.kind}
        if self.kind == "cone":
            out["center"] = list(self.center)
            out["r0"] = self.r0
        else:
            out["lo"] = list(self.lo)
            out["hi"] = list(self.hi)
        return out

    @staticmethod
    def from_spec(spec: dict) -> "WindowGeometry":
        if spec["kind"] == "cone":
            return cone_geometry(spec["n_lo"], spec["n_hi"], spec["center"],
                                 spec["r0"], d=spec["d"])
        return box_geometry(spec["n_lo"], spec["n_hi"], spec["lo"], spec["hi"])


def cone_geometry(n_lo: int, n_hi: int, center, r0: int = 0, d: Optional[int] = None) -> WindowGeometry:
    center = tuple(int(v) for v in np.atleast_1d(center))
    d = len(center) if d is None else d
    if n_hi <= n_lo:
        raise ConfigError(f"empty window: n_lo={n_lo}, n_hi={n_hi}")
    return WindowGeometry(int(n_lo), int(n_hi), d, "cone", center, int(r0))


def box_geometry(n_lo: int, n_hi: int, lo, hi) -> WindowGeometry:
    lo = tuple(int(v) for v in np.atleast_1d(lo))
    hi = tuple(int(v) for v in np.atleast_1d(hi))
    if n_hi <= n_lo or any(a > b for a, b in zip(lo, hi)):
        raise ConfigError(f"empty window: [{n_lo},{n_hi}) x [{lo},{hi}]")
    return WindowGeometry(int(n_lo), int(n_hi), len(lo), "box", lo=lo, hi=hi)


@dataclass(eq=False)
class EnvWindow:
    """A realized environment restricted to a finite space-time window.

    Cells are generated on first access, one level at a time, from the
    site-keyed counter scheme; ``shift_m``/``shift_y`` record the cumulative
    T_{m,y} relabeling so shifted windows read the same underlying cells.
    Immutable after construction apart from the level cache.
    """

    dist: EnvDistribution
    master_seed: int
    geometry: WindowGeometry
    shift_m: int = 0
    shift_y: np.ndarray = None
    _levels: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.shift_y is None:
            self.shift_y = np.zeros(self.dist.d, dtype=np.int64)
        self.shift_y = np.asarray(self.shift_y, dtype=np.int64)

    @property
    def d(self) -> int:
        return self.dist.d

    @property
    def n_lo(self) -> int:
        return self.geometry.n_lo

    @property
    def n_hi(self) -> int:
        return self.geometry.n_hi

    def _level(self, n: int):
        got = self._levels.get(n)
        if got is None:
            sites = self.geometry.level_sites(n)
            sites, keys = sort_sites(sites, self.d)
            cells = self.dist.sample_cells(self.master_seed,
                                           n + self.shift_m,
                                           sites + self.shift_y)
            got = (sites, keys, cells)
            self._levels[n] = got
        return got

    def level_sites(self, n: int) -> np.ndarray:
        return self._level(n)[0]

    def level_cells(self, n: int) -> np.ndarray:
        return self._level(n)[2]

    def lookup(self, n: int, sites, missing: str = "raise") -> np.ndarray:
        """Row indices of sites within level n (see lattice.lookup_rows)."""
        _, keys, _ = self._level(n)
        return lookup_rows(keys, np.atleast_2d(np.asarray(sites, dtype=np.int64)),
                           self.d, missing=missing)

    def cell(self, n: int, x) -> np.ndarray:
        """The probability vector at (n, x); WindowBoundsError if outside."""
        if not self.geometry.contains_time(n):
            raise WindowBoundsError(
                f"time {n} outside window [{self.n_lo}, {self.n_hi})")
        sites, keys, cells = self._level(n)
        row = lookup_rows(keys, np.atleast_2d(np.asarray(x, dtype=np.int64)), self.d)
        return cells[int(row[0])]

    def cells_at(self, n: int, sites, check: bool = True) -> np.ndarray:
        """Cells for an (S, d) batch of sites at level n.

        Reads the materialized level when present; otherwise samples the
        requested coordinates directly, which yields the identical values
        because cells are pure functions of (seed, absolute coordinates).
        """
        sites = np.atleast_2d(np.asarray(sites, dtype=np.int64))
        if check:
            ok = self.geometry.contains_sites(n, sites)
            if not np.all(ok):
                bad = sites[np.nonzero(~ok)[0][0]]
                raise WindowBoundsError(
                    f"cell ({n}, {bad.tolist()}) outside the window")
        cached = self._levels.get(n)
        if cached is not None:
            _, keys, cells = cached
            return cells[lookup_rows(keys, sites, self.d)]
        return self.dist.sample_cells(self.master_seed, n + self.shift_m,
                                      sites + self.shift_y)

    def shift(self, m: int, y) -> "EnvWindow":
        """T_{m,y}: the result's cell at (n, x) is this window's at (n+m, x+y)."""
        y = np.asarray(y, dtype=np.int64)
        return EnvWindow(self.dist, self.master_seed,
                         self.geometry.shifted(m, y),
                         self.shift_m + m, self.shift_y + y)

    def materialize(self) -> "EnvWindow":
        for n in range(self.n_lo, self.n_hi):
            self._level(n)
        return self


def sample_window(dist: EnvDistribution, geometry: WindowGeometry,
                  master_seed: int) -> EnvWindow:
    """Realize dist on the window. Lazy: cells appear on first access and
    depend only on (master_seed, absolute coordinates)."""
    if geometry.d != dist.d:
        raise ConfigError(f"geometry d={geometry.d} vs distribution d={dist.d}")
    return EnvWindow(dist, int(master_seed), geometry)


def shift(env: EnvWindow, m: int, y) -> EnvWindow:
    return env.shift(m, y)


# ---------------------------------------------------------------------------
# Persistence: bit-exact binary (npz) and a readable JSON form
# ---------------------------------------------------------------------------

def save_window(env: EnvWindow, path) -> None:
    """Write the window with realized cells to an npz container. Arrays
    round-trip bit-exactly; the header carries dist spec, step order,
    geometry, and seed provenance."""
    env.materialize()
    header = {
        "format": "rwspace-env-window",
        "version": 1,
        "dist": env.dist.to_spec(),
        "step_order": env.dist.step_set.steps.tolist(),
        "geometry": env.geometry.to_spec(),
        "master_seed": env.master_seed,
        "shift_m": env.shift_m,
        "shift_y": env.shift_y.tolist(),
    }
    arrays = {"header_json": np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)}
    for n in range(env.n_lo, env.n_hi):
        sites, _, cells = env._level(n)
        arrays[f"sites_{n}"] = sites
        arrays[f"cells_{n}"] = cells
    with open(path, "wb") as fh:  # file object: savez must not append .npz
        np.savez(fh, **arrays)


def load_window(path) -> EnvWindow:
    with np.load(path) as data:
        header = json.loads(bytes(data["header_json"]).decode())
        if header.get("format") != "rwspace-env-window":
            raise ConfigError(f"{path} is not a window file")
        dist = EnvDistribution.from_spec(header["dist"])
        geometry = WindowGeometry.from_spec(header["geometry"])
        env = EnvWindow(dist, header["master_seed"], geometry,
                        header["shift_m"], np.asarray(header["shift_y"]))
        for n in range(env.n_lo, env.n_hi):
            sites = data[f"sites_{n}"]
            keys = sort_sites(sites, env.d)[1]
            env._levels[n] = (sites, keys, data[f"cells_{n}"])
    return env
