"""The conditioned environment measure and its exact oracles.

For a velocity xi strictly inside the unit L1 ball with dual tilt theta,
the conditioned measure assigns to every cylinder function f (one depending
on environment levels -N..M around the walker and on the next K steps) the
value

    integral f  =  E[ e^{<theta, X_L> - L log phi} f(shifted env, next steps) ],
    L = N + M + K + 1,

under the averaged path measure. Because a nearest-neighbor path visits
each space-time cell at most once, the expectation factorizes over cells,
and for finite-support environment laws it reduces to a finite weighted sum
over (step sequence, cell assignment) pairs. This module evaluates that sum
exactly, which powers three oracles: invariance of the value under raising
N, M or K (well-definedness), invariance under the path shift (stationarity
of the induced environment chain), and the vanishing derivative at zero of
the tilted cumulant zeta (the inequality engine behind the conditional
decay of empirical averages).

The same machinery estimates conditional probabilities P(A | D) at Monte
Carlo scale: proposals use the exponential tilt (the proof's own change of
measure), under which the velocity-conditioning event D is no longer rare;
in quenched mode the proposal is a Doob chain confined to a tube around the
target ray, whose normalization is exact by construction.
"""

from __future__ import annotations

import ast
import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import seeds
from .environment import (Deterministic, EnvDistribution, EnvWindow,
                          FiniteSupport, box_geometry, sample_window)
from .errors import (ConfigError, DomainError, EstimateUndefinedError,
                     ResourceLimitError)
from .harmonic import _backward_levels, _tilt_exponents
from .lattice import StepSet, l1_ball, sort_sites
from .rate import log_phi, solve_theta, tilted_step_law
from .walks import averaged_region_prob

__all__ = [
    "CylinderFunction", "CellView", "MuMeasureValue",
    "constant_function", "step_indicator", "cell_weight", "product_function",
    "function_from_expression", "parse_function_spec",
    "mu_exact", "welldefined_check", "stationarity_check", "mu_marginal",
    "mu_via_htransform", "zeta_diagnostic", "conditioned_empirics",
    "markov_structure_check",
]


class CellView:
    """Read-only access to environment cells for cylinder evaluators.

    Backed either by an explicit {(level, site): weights} mapping (exact
    enumeration) or by a window plus offsets (sampled environments). Reads
    outside the declared cell set of the owning function are a contract
    violation and surface as ConfigError.
    """

    def __init__(self, mapping=None, window=None, time_offset=0, space_offset=None):
        self._mapping = mapping
        self._window = window
        self._time_offset = time_offset
        self._space_offset = space_offset

    def cell(self, level: int, site) -> np.ndarray:
        site_t = tuple(int(v) for v in np.atleast_1d(site))
        if self._mapping is not None:
            try:
                return self._mapping[(level, site_t)]
            except KeyError:
                raise ConfigError(
                    f"evaluator read cell ({level}, {site_t}) outside its "
                    f"declared cell set") from None
        x = np.asarray(site_t, dtype=np.int64) + self._space_offset
        return self._window.cells_at(self._time_offset + level, x[None, :])[0]


class CylinderFunction:
    """A bounded function of (environment, future steps) depending on
    declared cells (levels -N..M, finitely many relative sites) and on the
    first K steps only."""

    def __init__(self, d: int, N: int, M: int, K: int, cells, evaluator,
                 bound: float, name: str = "", steps_batch=None,
                 cells_for=None):
        if min(N, M, K) < 0:
            raise ConfigError("cylinder indices N, M, K must be nonnegative")
        self.d = d
        self.N = int(N)
        self.M = int(M)
        self.K = int(K)
        self.cells = [(int(lv), tuple(int(v) for v in site)) for lv, site in cells]
        for lv, site in self.cells:
            if not (-self.N <= lv <= self.M):
                raise ConfigError(
                    f"declared cell level {lv} outside [-{self.N}, {self.M}]")
        self.evaluator = evaluator
        self.bound = float(bound)
        self.name = name or "cylinder"
        self._steps_batch = steps_batch
        self._cells_for = cells_for

    def cells_for(self, steps) -> list:
        """Declared cells given the realized first K steps (static for all
        built-ins; composed functions may localize around the path)."""
        if self._cells_for is not None:
            return self._cells_for(steps)
        return self.cells

    @property
    def steps_only(self) -> bool:
        return self._cells_for is None and len(self.cells) == 0

    def __call__(self, view: CellView, steps) -> float:
        return float(self.evaluator(view, np.asarray(steps, dtype=np.int64)))

    def steps_batch(self, steps_matrix: np.ndarray) -> np.ndarray:
        """Vectorized values over (R, >=K) step-index rows; only for
        steps-only functions."""
        if not self.steps_only:
            raise ConfigError(f"{self.name} reads cells; no steps-only batch")
        if self._steps_batch is not None:
            return self._steps_batch(steps_matrix)
        empty = CellView(mapping={})
        return np.array([self(empty, row[: self.K]) for row in steps_matrix])

    def with_indices(self, N=None, M=None, K=None) -> "CylinderFunction":
        """The same function viewed as a larger cylinder (measurability
        nests), used by the well-definedness oracle."""
        return CylinderFunction(
            self.d, self.N if N is None else N, self.M if M is None else M,
            self.K if K is None else K, self.cells, self.evaluator, self.bound,
            name=self.name, steps_batch=self._steps_batch,
            cells_for=self._cells_for)


# ---------------------------------------------------------------------------
# Built-in cylinder functions
# ---------------------------------------------------------------------------

def constant_function(d: int, value: float) -> CylinderFunction:
    return CylinderFunction(d, 0, 0, 0, [], lambda view, steps: value,
                            bound=abs(value) if value else 1.0,
                            name=f"const[{value}]",
                            steps_batch=lambda m: np.full(m.shape[0], value))


def _parse_step(d: int, spec) -> int:
    """Canonical step index from '+e1' / '-e2' / index / vector."""
    ss = StepSet(d)
    if isinstance(spec, (int, np.integer)):
        if not 0 <= spec < 2 * d:
            raise ConfigError(f"step index {spec} outside 0..{2 * d - 1}")
        return int(spec)
    if isinstance(spec, str):
        s = spec.strip()
        if s and s[0] in "+-" and s[1:].startswith("e"):
            axis = int(s[2:]) - 1
            if not 0 <= axis < d:
                raise ConfigError(f"step {spec!r} names axis outside 1..{d}")
            return 2 * axis + (0 if s[0] == "+" else 1)
        raise ConfigError(f"cannot parse step {spec!r}")
    return ss.index_of(spec)


def step_indicator(d: int, step, position: int = 1) -> CylinderFunction:
    """1{z_position = step}. Indicator of one future step."""
    zi = _parse_step(d, step)
    i = int(position)
    if i < 1:
        raise ConfigError("step position is 1-based")

    def ev(view, steps):
        return 1.0 if int(steps[i - 1]) == zi else 0.0

    return CylinderFunction(
        d, 0, 0, i, [], ev, bound=1.0, name=f"step[{i}]=={zi}",
        steps_batch=lambda m: (m[:, i - 1] == zi).astype(np.float64))


def cell_weight(d: int, level: int, site, step) -> CylinderFunction:
    """The environment weight toward `step` in the cell at (level, site)
    relative to the walker. A bounded functional of finitely many cells."""
    zi = _parse_step(d, step)
    site_t = tuple(int(v) for v in np.atleast_1d(site))

    def ev(view, steps):
        return float(view.cell(level, site_t)[zi])

    return CylinderFunction(d, max(0, -level), max(0, level), 0,
                            [(level, site_t)], ev, bound=1.0,
                            name=f"cell[{level},{site_t}][{zi}]")


def product_function(f: CylinderFunction, g: CylinderFunction) -> CylinderFunction:
    if f.d != g.d:
        raise ConfigError("product of cylinder functions in different dimensions")
    sb = None
    if f.steps_only and g.steps_only:
        sb = lambda m: f.steps_batch(m) * g.steps_batch(m)
    K = max(f.K, g.K)
    dynamic = f._cells_for is not None or g._cells_for is not None
    if dynamic:
        def cells_for(steps_idx):
            return sorted(set(f.cells_for(steps_idx[: f.K]))
                          | set(g.cells_for(steps_idx[: g.K])))
        cells = []
    else:
        cells_for = None
        cells = sorted(set(f.cells) | set(g.cells))

    def ev(view, steps):
        return f.evaluator(view, steps) * g.evaluator(view, steps)

    return CylinderFunction(f.d, max(f.N, g.N), max(f.M, g.M), K,
                            cells, ev, bound=f.bound * g.bound,
                            name=f"({f.name})*({g.name})", steps_batch=sb,
                            cells_for=cells_for)


# ---------------------------------------------------------------------------
# Expression-defined functions: cell(i, (x,...), z) and step(i) atoms
# ---------------------------------------------------------------------------

_ALLOWED_BINOPS = {ast.Add: np.add, ast.Sub: np.subtract, ast.Mult: np.multiply,
                   ast.Div: np.divide, ast.Pow: np.power}
_ALLOWED_CMPOPS = {ast.Eq: np.equal, ast.NotEq: np.not_equal, ast.Lt: np.less,
                   ast.LtE: np.less_equal, ast.Gt: np.greater,
                   ast.GtE: np.greater_equal}


def function_from_expression(d: int, expr: str, bound: float = 1.0) -> CylinderFunction:
    """Build a cylinder function from a small arithmetic expression.

    Atoms: ``step(i)`` is the canonical index (0..2d-1) of the i-th future
    step (1-based); ``cell(l, (x1,...,xd), z)`` is the weight toward
    canonical step z in the cell at level l and relative site (x1,...).
    Operators: + - * / ** and comparisons (== != < <= > >=, giving 0/1).
    N, M, K and the declared cell set are inferred from the atoms; the
    caller supplies the bound.
    """
    try:
        tree = ast.parse(expr, mode="eval")
    except SyntaxError as exc:
        raise ConfigError(f"bad function expression: {exc}") from exc
    cells: set = set()
    kmax = 0

    def scan(node):
        nonlocal kmax
        if isinstance(node, ast.Expression):
            scan(node.body)
        elif isinstance(node, ast.BinOp) and type(node.op) in _ALLOWED_BINOPS:
            scan(node.left)
            scan(node.right)
        elif isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub):
            scan(node.operand)
        elif isinstance(node, ast.Compare) and len(node.ops) == 1 \
                and type(node.ops[0]) in _ALLOWED_CMPOPS:
            scan(node.left)
            scan(node.comparators[0])
        elif isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            pass
        elif isinstance(node, ast.Call) and isinstance(node.func, ast.Name):
            args = node.args
            if node.func.id == "step":
                if len(args) != 1:
                    raise ConfigError("step() takes one argument")
                i = _const_int(args[0])
                if i < 1:
                    raise ConfigError("step positions are 1-based")
                kmax = max(kmax, i)
            elif node.func.id == "cell":
                if len(args) != 3:
                    raise ConfigError("cell() takes (level, site, step)")
                lv = _const_int(args[0])
                site = _const_site(args[1], d)
                z = _const_int(args[2])
                if not 0 <= z < 2 * d:
                    raise ConfigError(f"cell step index {z} outside 0..{2 * d - 1}")
                cells.add((lv, site))
            else:
                raise ConfigError(f"unknown function {node.func.id!r} in expression")
        else:
            raise ConfigError(
                f"disallowed syntax in expression: {ast.dump(node)[:60]}")

    scan(tree)
    N = max([0] + [-lv for lv, _ in cells])
    M = max([0] + [lv for lv, _ in cells])

    def ev(view, steps):
        def run(node):
            if isinstance(node, ast.Expression):
                return run(node.body)
            if isinstance(node, ast.BinOp):
                return _ALLOWED_BINOPS[type(node.op)](run(node.left), run(node.right))
            if isinstance(node, ast.UnaryOp):
                return -run(node.operand)
            if isinstance(node, ast.Compare):
                return float(_ALLOWED_CMPOPS[type(node.ops[0])](
                    run(node.left), run(node.comparators[0])))
            if isinstance(node, ast.Constant):
                return float(node.value)
            if isinstance(node, ast.Call):
                if node.func.id == "step":
                    return float(steps[_const_int(node.args[0]) - 1])
                lv = _const_int(node.args[0])
                site = _const_site(node.args[1], d)
                z = _const_int(node.args[2])
                return float(view.cell(lv, site)[z])
            raise ConfigError("unreachable expression node")
        return run(tree)

    return CylinderFunction(d, N, M, kmax, sorted(cells), ev, bound=bound,
                            name=f"expr[{expr}]")


def _const_int(node) -> int:
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub):
        return -_const_int(node.operand)
    if isinstance(node, ast.Constant) and isinstance(node.value, int):
        return node.value
    raise ConfigError("expression arguments must be integer literals")


def _const_site(node, d: int) -> tuple:
    if isinstance(node, ast.Tuple):
        vals = tuple(_const_int(el) for el in node.elts)
    else:
        vals = (_const_int(node),)
    if len(vals) != d:
        raise ConfigError(f"site {vals} must have {d} coordinates")
    return vals


def parse_function_spec(d: int, spec: str, bound: float = 1.0) -> CylinderFunction:
    """CLI-facing parser: 'builtin:step-indicator:+e1[:POS]',
    'builtin:cell-weight:LEVEL:x1,x2,..:STEP', 'builtin:constant:VALUE',
    or 'expr:EXPRESSION'."""
    parts = spec.split(":")
    if parts[0] == "builtin":
        if parts[1] == "step-indicator":
            pos = int(parts[3]) if len(parts) > 3 else 1
            return step_indicator(d, parts[2], pos)
        if parts[1] == "cell-weight":
            site = tuple(int(v) for v in parts[3].split(","))
            return cell_weight(d, int(parts[2]), site, parts[4])
        if parts[1] == "constant":
            return constant_function(d, float(parts[2]))
        raise ConfigError(f"unknown builtin {parts[1]!r}")
    if parts[0] == "expr":
        return function_from_expression(d, spec[len("expr:"):], bound=bound)
    raise ConfigError(f"cannot parse function spec {spec!r}")


# ---------------------------------------------------------------------------
# Exact enumeration core
# ---------------------------------------------------------------------------

def _atoms_of(dist: EnvDistribution):
    if isinstance(dist, FiniteSupport):
        return dist.atoms, dist.probs
    if isinstance(dist, Deterministic):
        return dist.q[None, :], np.ones(1)
    raise ConfigError(
        f"exact enumeration needs a finite-support environment law, "
        f"got kind {dist.kind!r}")


@dataclass(frozen=True)
class MuTerms:
    """Aggregated exact enumeration: distinct f values with their total
    tilted weights. Weights sum to 1 up to rounding (the tilt normalizes)."""

    values: np.ndarray
    weights: np.ndarray
    L: int
    theta: np.ndarray
    n_terms: int

    @property
    def integral(self) -> float:
        return float(self.weights @ self.values)

    @property
    def weight_total(self) -> float:
        return float(self.weights.sum())


def mu_terms(dist: EnvDistribution, xi, f: CylinderFunction,
             nmk=None, term_cap: int = 50_000_000) -> MuTerms:
    """Exact expansion of the defining expectation over (path, assignment)
    pairs, aggregated by f value.

    The walk visits each cell once, so the environment expectation
    factorizes: cells read by f are enumerated over the law's atoms, cells
    merely stepped through contribute their mean q(z), and all remaining
    cells integrate out to 1.
    """
    d = dist.d
    atoms, probs = _atoms_of(dist)
    A = len(probs)
    q = dist.mean_kernel()
    theta = solve_theta(q, xi).theta
    lp = log_phi(q, theta)
    N, M, K = (f.N, f.M, f.K) if nmk is None else nmk
    if N < f.N or M < f.M or K < f.K:
        raise ConfigError("cylinder indices may only be raised, never lowered")
    L = N + M + K + 1
    steps = StepSet(d).steps
    two_d = 2 * d

    n_paths = two_d ** L
    # K-step suffix classes share their cell geometry and f values
    suffixes = list(itertools.product(range(two_d), repeat=K))
    total_terms = 0
    suffix_info = []
    for suf in suffixes:
        cells = f.cells_for(np.asarray(suf, dtype=np.int64))
        total_terms += A ** len(cells)
        suffix_info.append(cells)
    if n_paths * max(1, max((A ** len(c) for c in suffix_info), default=1)) > term_cap:
        raise ResourceLimitError(
            f"enumeration needs up to "
            f"{n_paths * max(A ** len(c) for c in suffix_info)} terms "
            f"(paths {n_paths}); cap is {term_cap}")

    # all step sequences, positions, and tilted path weights, vectorized
    grids = np.meshgrid(*([np.arange(two_d)] * L), indexing="ij")
    zs = np.stack([g.ravel() for g in grids], axis=1)        # (P, L)
    moves = steps[zs]                                        # (P, L, d)
    pos = np.concatenate([np.zeros((len(zs), 1, d), dtype=np.int64),
                          np.cumsum(moves, axis=1)], axis=1)  # (P, L+1, d)
    disp = pos[:, L].astype(np.float64)
    w_tilt = np.exp(disp @ theta - L * lp)                   # e^{<theta,X_L>-L log phi}
    q_of = q[zs]                                             # (P, L) mean factors

    suffix_key = np.zeros(len(zs), dtype=np.int64)
    for j in range(K):
        suffix_key = suffix_key * two_d + zs[:, N + j]

    values_out, weights_out = [], []
    for key, suf in enumerate(suffixes):
        sel = np.nonzero(suffix_key == key)[0] if K > 0 else np.arange(len(zs))
        cells = suffix_info[key]
        S = len(cells)
        cell_slot = {c: s for s, c in enumerate(cells)}
        assign = np.array(list(itertools.product(range(A), repeat=S)),
                          dtype=np.int64).reshape(A ** S, S)
        p_assign = probs[assign].prod(axis=1) if S else np.ones(1)
        # f value per assignment (independent of everything else)
        fvals = np.empty(A ** S)
        steps_arg = np.asarray(suf, dtype=np.int64)
        for a_i in range(A ** S):
            mapping = {cells[s]: atoms[assign[a_i, s]] for s in range(S)}
            fvals[a_i] = f.evaluator(CellView(mapping=mapping), steps_arg)
        if np.any(np.abs(fvals) > f.bound + 1e-9):
            raise ConfigError(
                f"{f.name}: value exceeds declared bound {f.bound}")
        wvec = np.zeros(A ** S)
        for p in sel:
            xN = pos[p, N]
            w = w_tilt[p]
            factor = np.ones(A ** S)
            for i in range(L):
                rel = (i - N, tuple((pos[p, i] - xN).tolist()))
                slot = cell_slot.get(rel)
                if slot is None:
                    w *= q_of[p, i]
                else:
                    factor = factor * atoms[assign[:, slot], zs[p, i]]
            wvec += w * p_assign * factor
        values_out.append(fvals)
        weights_out.append(wvec)

    values = np.concatenate(values_out)
    weights = np.concatenate(weights_out)
    # aggregate identical f values so downstream reweighting stays tiny
    uniq, inv = np.unique(values, return_inverse=True)
    agg = np.zeros(len(uniq))
    np.add.at(agg, inv, weights)
    return MuTerms(values=uniq, weights=agg, L=L, theta=theta,
                   n_terms=int(total_terms))


@dataclass(frozen=True)
class MuMeasureValue:
    """A computed integral of f against the conditioned measure."""

    value: float
    method: str
    error: float
    meta: dict = field(default_factory=dict)


def mu_exact(dist: EnvDistribution, xi, f: CylinderFunction,
             nmk=None, term_cap: int = 50_000_000) -> MuMeasureValue:
    """Exact value of the conditioned integral by full enumeration
    (finite-support environments)."""
    t = mu_terms(dist, xi, f, nmk=nmk, term_cap=term_cap)
    return MuMeasureValue(value=t.integral, method="exact-enumeration",
                          error=0.0,
                          meta={"L": t.L, "weight_total": t.weight_total,
                                "n_terms": t.n_terms})


@dataclass(frozen=True)
class DeviationReport:
    """Outcome of an exact invariance oracle: every evaluation and the
    worst pairwise deviation, which must vanish to rounding."""

    values: dict
    max_deviation: float
    tolerance: float = 1e-12

    @property
    def ok(self) -> bool:
        return self.max_deviation <= self.tolerance


def welldefined_check(dist: EnvDistribution, xi, f: CylinderFunction,
                      term_cap: int = 50_000_000) -> DeviationReport:
    """The defining expectation must not move when any of N, M, K is raised
    by one: four independent enumerations, compared pairwise."""
    base = (f.N, f.M, f.K)
    runs = {"base": base,
            "N+1": (f.N + 1, f.M, f.K),
            "M+1": (f.N, f.M + 1, f.K),
            "K+1": (f.N, f.M, f.K + 1)}
    values = {label: mu_exact(dist, xi, f, nmk=nmk, term_cap=term_cap).value
              for label, nmk in runs.items()}
    vals = list(values.values())
    dev = max(abs(a - b) for a in vals for b in vals)
    return DeviationReport(values=values, max_deviation=dev)


def shift_compose(f: CylinderFunction) -> CylinderFunction:
    """f composed with the path shift: (omega, z) -> f(T_{1,z_1} omega,
    (z_2, z_3, ...)). A cylinder function with M and K raised by one."""
    d = f.d
    steps = StepSet(d).steps

    def cells_for(steps_idx):
        z1 = steps[int(steps_idx[0])]
        return [(lv + 1, tuple((np.asarray(site) + z1).tolist()))
                for lv, site in f.cells_for(np.asarray(steps_idx[1:]))]

    def ev(view, steps_idx):
        z1 = steps[int(steps_idx[0])]

        class _Shifted:
            def cell(self, level, site):
                return view.cell(level + 1,
                                 tuple((np.asarray(site) + z1).tolist()))

        return f.evaluator(_Shifted(), np.asarray(steps_idx[1:]))

    return CylinderFunction(d, max(f.N - 1, 0), f.M + 1, f.K + 1, [],
                            ev, bound=f.bound, name=f"({f.name})oS",
                            cells_for=cells_for)


def stationarity_check(dist: EnvDistribution, xi, f: CylinderFunction,
                       term_cap: int = 50_000_000) -> DeviationReport:
    """Invariance of the conditioned integral under the path shift: the
    value of f after one step of the environment chain equals the value of
    f, each side an independent exact enumeration."""
    direct = mu_exact(dist, xi, f, term_cap=term_cap).value
    shifted = mu_exact(dist, xi, shift_compose(f), term_cap=term_cap).value
    return DeviationReport(values={"f": direct, "f_o_shift": shifted},
                           max_deviation=abs(direct - shifted))


def mu_marginal(dist: EnvDistribution, xi, h_evaluator, N: int, M: int,
                cells, bound: float = 1.0) -> MuMeasureValue:
    """Integral of an environment-only functional h against the one-state
    marginal of the conditioned process (the projection that forgets the
    step sequence)."""
    d = dist.d
    f = CylinderFunction(d, N, M, 0, cells,
                         lambda view, steps: h_evaluator(view),
                         bound=bound, name="marginal")
    return mu_exact(dist, xi, f)


def probe_cylinder(f: CylinderFunction, dist: EnvDistribution, seed: int = 0,
                   trials: int = 8) -> None:
    """Measurability probe: evaluating f must be insensitive to steps past
    K and must never read cells outside the declared set (the enumeration
    views raise on such reads). Raises ConfigError on violation."""
    rng_words = np.arange(trials)
    for t in range(trials):
        steps_long = (seeds.hash_words(seed, seeds.STREAM_GENERIC, rng_words[t],
                                       np.arange(f.K + 2))
                      % np.uint64(2 * f.d)).astype(np.int64)
        cells = f.cells_for(steps_long[: f.K])
        mapping = {}
        for j, (lv, site) in enumerate(cells):
            w = dist.sample_cells(seed + 17 * t + j, lv, np.atleast_2d(site))[0]
            mapping[(lv, site)] = np.atleast_2d(w)[0] if w.ndim > 1 else w
        view = CellView(mapping=mapping)
        base = f.evaluator(view, steps_long[: f.K])
        variants = [steps_long[: f.K + 1].copy(), steps_long[: f.K + 1].copy()]
        variants[1][f.K] = (variants[1][f.K] + 1) % (2 * f.d)
        for longer in variants:
            again = f.evaluator(view, longer)
            if not math.isclose(float(base), float(again), rel_tol=0, abs_tol=0):
                raise ConfigError(
                    f"{f.name}: value changed when steps past K were perturbed")


# ---------------------------------------------------------------------------
# The tilted-cumulant diagnostic zeta
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class ZetaReport:
    """zeta(z) = (1/L) log E[e^{<theta,X_L> - L log phi + L z F}] where F is
    the centered cylinder value; zeta(0) = 0 by tilt normalization and
    zeta'(0) = 0 precisely because the centering constant is the
    conditioned integral."""

    mu: float
    L: int
    z_grid: np.ndarray
    zeta_values: np.ndarray
    zeta_zero: float
    derivative_at_zero: float
    refinement: dict          # h -> |zeta(h)| / h
    convex_ok: bool


def zeta_diagnostic(dist: EnvDistribution, xi, f: CylinderFunction,
                    z_grid=None, fd_step: float = 1e-5,
                    refine_steps=(1e-2, 1e-3, 1e-4),
                    term_cap: int = 50_000_000) -> ZetaReport:
    terms = mu_terms(dist, xi, f, term_cap=term_cap)
    mu = terms.integral
    L = terms.L
    centered = terms.values - mu
    logw = np.log(terms.weights)

    def zeta(z):
        z = np.atleast_1d(np.asarray(z, dtype=np.float64))
        expo = logw[None, :] + L * z[:, None] * centered[None, :]
        m = expo.max(axis=1)
        return (m + np.log(np.exp(expo - m[:, None]).sum(axis=1))) / L

    if z_grid is None:
        z_grid = np.linspace(-1.0, 1.0, 21)
    z_grid = np.asarray(z_grid, dtype=np.float64)
    vals = zeta(z_grid)
    second = np.diff(vals, 2) if len(vals) >= 3 else np.array([])
    deriv = float((zeta(fd_step) - zeta(-fd_step))[0] / (2 * fd_step))
    refinement = {float(h): float(abs(zeta(h)[0]) / h) for h in refine_steps}
    return ZetaReport(mu=mu, L=L, z_grid=z_grid, zeta_values=vals,
                      zeta_zero=float(zeta(0.0)[0]),
                      derivative_at_zero=deriv, refinement=refinement,
                      convex_ok=bool(np.all(second >= -1e-10)))


# ---------------------------------------------------------------------------
# The h-transform route to the conditioned integral
# ---------------------------------------------------------------------------

def mu_via_htransform(dist: EnvDistribution, xi, f: CylinderFunction,
                      horizon: int, env_replicas: int = 200,
                      seed: int = 0) -> MuMeasureValue:
    """Estimate the conditioned integral as an environment average of
    u_H(omega) times the Doob-walk expectation of f, with the finite-horizon
    field standing in for the limiting harmonic function. Exact per
    environment (the inner expectation is an enumeration over the
    transformed kernel); the reported error is the environment-sampling
    standard error plus no allowance for the horizon bias, which the
    well-definedness cases quantify separately."""
    from .harmonic import compute_u, doob_kernel
    from .environment import cone_geometry

    d = dist.d
    N, M, K = f.N, f.M, f.K
    if horizon < N + K:
        raise ConfigError(f"horizon {horizon} must cover N + K = {N + K}")
    max_b = max([0] + [int(np.abs(np.asarray(s)).sum()) for _, s in f.cells])
    r0 = N + max_b
    n_hi = max(horizon, N + M) + 1
    steps = StepSet(d).steps
    two_d = 2 * d
    paths = list(itertools.product(range(two_d), repeat=N + K))
    env_seeds = seeds.derive_seed_array(seed, seeds.STREAM_ENV_REPLICA,
                                        np.arange(env_replicas))
    samples = np.empty(env_replicas)
    if isinstance(dist, Deterministic):
        env_replicas = 1
        samples = np.empty(1)
    for r in range(len(samples)):
        env = sample_window(dist, cone_geometry(0, n_hi, (0,) * d, r0=r0),
                            int(env_seeds[r]))
        fld = compute_u(env, solve_theta(dist.mean_kernel(), xi).theta,
                        horizon, base=(0, np.zeros(d, dtype=np.int64)), r0=r0)
        kern = doob_kernel(fld)
        acc = 0.0
        for p in paths:
            w = 1.0
            pos = np.zeros(d, dtype=np.int64)
            for t, zi in enumerate(p):
                w *= float(kern.row(t, pos)[zi])
                pos = pos + steps[zi]
            x_N = np.zeros(d, dtype=np.int64)
            for zi in p[:N]:
                x_N = x_N + steps[zi]
            view = CellView(window=env, time_offset=N, space_offset=x_N)
            acc += w * f.evaluator(view, np.asarray(p[N:], dtype=np.int64))
        samples[r] = np.exp(fld.log_value(0, np.zeros(d, dtype=np.int64))) * acc
    err = (float(samples.std(ddof=1) / np.sqrt(len(samples)))
           if len(samples) > 1 else 0.0)
    return MuMeasureValue(value=float(samples.mean()), method="h-transform",
                          error=err,
                          meta={"horizon": horizon, "env_replicas": len(samples)})


# ---------------------------------------------------------------------------
# Conditional probabilities of the empirical-average event given the
# velocity event
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class EmpiricsEntry:
    n: int
    replicas: int
    d_hits: int
    ad_hits: int
    p_d: float
    p_d_stderr: float
    p_ad: float
    p_ad_stderr: float

    @property
    def p_a_given_d(self) -> float:
        return self.p_ad / self.p_d if self.p_d > 0 else float("nan")

    @property
    def log_rate(self) -> float:
        """(1/n) log P(A | D); -inf when no A-and-D hits occurred."""
        if self.p_ad == 0.0:
            return float("-inf")
        return math.log(self.p_a_given_d) / self.n

    def to_dict(self) -> dict:
        return {"n": self.n, "replicas": self.replicas, "d_hits": self.d_hits,
                "ad_hits": self.ad_hits, "p_d": self.p_d,
                "p_d_stderr": self.p_d_stderr, "p_ad": self.p_ad,
                "p_ad_stderr": self.p_ad_stderr,
                "p_a_given_d": self.p_a_given_d, "log_rate": self.log_rate}


@dataclass(eq=False)
class EmpiricsReport:
    mode: str
    xi: np.ndarray
    theta: np.ndarray
    eps: float
    delta: float
    center: float
    center_error: float
    norm: str
    entries: list
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "xi": self.xi.tolist(),
                "theta": self.theta.tolist(), "eps": self.eps,
                "delta": self.delta, "center": self.center,
                "center_error": self.center_error, "norm": self.norm,
                "entries": [e.to_dict() for e in self.entries],
                "notes": self.notes}


def _center_of(dist: EnvDistribution, xi, f: CylinderFunction,
               center, seed: int) -> tuple[float, float]:
    if center is not None:
        return (center, 0.0) if np.isscalar(center) else (center[0], center[1])
    try:
        return mu_exact(dist, xi, f, term_cap=2_000_000).value, 0.0
    except (ResourceLimitError, ConfigError):
        est = mu_via_htransform(dist, xi, f, horizon=f.N + f.K + 8,
                                env_replicas=200, seed=seed)
        return est.value, est.error


def _f_value_matrix(f: CylinderFunction, steps_mat: np.ndarray, n: int,
                    cell_atom_index=None, atoms=None) -> np.ndarray:
    """Raw f values at shifts j = 0..n-1.

    Steps-only functions slide a vectorized window. Functions reading just
    the walker's own cell (level 0, relative origin) use a per-atom value
    table; anything richer falls back to a small-scale loop.
    """
    R, n_tot = steps_mat.shape
    out = np.empty((R, n))
    if f.steps_only:
        for j in range(n):
            out[:, j] = f.steps_batch(steps_mat[:, j: j + f.K])
        return out
    if cell_atom_index is not None and f.cells == [(0, (0,) * f.d)]:
        two_d = 2 * f.d
        suffixes = list(itertools.product(range(two_d), repeat=f.K))
        table = np.empty((len(atoms), len(suffixes)))
        for a in range(len(atoms)):
            view = CellView(mapping={(0, (0,) * f.d): atoms[a]})
            for s, suf in enumerate(suffixes):
                table[a, s] = f.evaluator(view, np.asarray(suf, dtype=np.int64))
        key = np.zeros((R, n), dtype=np.int64)
        for i in range(f.K):
            key = key * two_d + steps_mat[:, i: i + n]
        for j in range(n):
            out[:, j] = table[cell_atom_index[:, j], key[:, j]]
        return out
    raise ConfigError(
        f"{f.name}: empirics support steps-only functions and functions of "
        f"the walker's own cell; richer cell sets need the exact oracles")


def conditioned_empirics(mode: str, env, xi, f: CylinderFunction, eps: float,
                         delta: float, n_grid, replicas: int, seed: int,
                         center=None, norm: str = "l2",
                         tube_radius: int | None = None) -> EmpiricsReport:
    """Estimate P(A | D): A is the event that the running average of the
    centered cylinder values deviates from the conditioned integral by more
    than eps; D is the event that the empirical velocity sits within delta
    of xi.

    mode "averaged": paths are sampled under the exponential tilt (their
    averaged marginal is the q^theta walk) and environment cells along the
    path under the matching size bias, so weighted estimates are unbiased
    for the averaged measure. mode "quenched": one fixed environment; the
    proposal is the Doob chain of a finite-horizon field confined to a tube
    around the target ray (exactly normalized by construction), and
    estimates are for the quenched probabilities restricted to in-tube
    paths -- the tube radius is part of the report.
    """
    if mode not in ("averaged", "quenched"):
        raise ConfigError(f"unknown mode {mode!r}")
    if isinstance(env, EnvWindow):
        dist, fixed_env = env.dist, env
    else:
        dist, fixed_env = env, None
    d = dist.d
    xi = np.asarray(xi, dtype=np.float64)
    q = dist.mean_kernel()
    sol = solve_theta(q, xi)
    theta, lp = sol.theta, sol.log_phi
    center_val, center_err = _center_of(dist, xi, f, center, seed)
    if eps <= 2.0 * center_err:
        warnings.warn("center error is of the order of eps; the A event is "
                      "not resolved", stacklevel=2)
    n_grid = sorted(int(n) for n in n_grid)
    entries = []
    notes = {"center_method": "exact" if center_err == 0.0 else "h-transform"}
    for n in n_grid:
        n_tot = n + max(f.K, f.M, 1)
        sub_seed = seeds.derive_seed(seed, seeds.STREAM_GENERIC, n)
        if mode == "averaged":
            steps_mat, disp_n, disp_tot, cell_idx, atoms = _sample_averaged_tilted(
                dist, theta, n, n_tot, replicas, sub_seed, f)
            log_w = -(disp_tot @ theta) + n_tot * lp
        else:
            steps_mat, disp_n, disp_tot, cell_idx, atoms, log_u0, r_used = \
                _sample_quenched_tube(dist, fixed_env, theta, lp, xi, n, n_tot,
                                      replicas, sub_seed, f, tube_radius, delta)
            log_w = -(disp_tot @ theta) + n_tot * lp + log_u0
            notes["tube_radius"] = r_used
        w = np.exp(log_w)
        fvals = _f_value_matrix(f, steps_mat, n, cell_idx, atoms)
        mean_f = fvals.mean(axis=1)
        a_ind = np.abs(mean_f - center_val) > eps
        vel_err = disp_n / n - xi
        if norm == "l2":
            dist_to_xi = np.sqrt((vel_err ** 2).sum(axis=1))
        elif norm == "l1":
            dist_to_xi = np.abs(vel_err).sum(axis=1)
        elif norm == "linf":
            dist_to_xi = np.abs(vel_err).max(axis=1)
        else:
            raise ConfigError(f"unknown norm {norm!r}")
        d_ind = dist_to_xi <= delta
        if not d_ind.any():
            raise EstimateUndefinedError(
                f"no proposal paths hit the velocity event at n={n}; "
                f"increase delta or replicas")
        wd = w * d_ind
        wad = w * (d_ind & a_ind)
        R = replicas
        entries.append(EmpiricsEntry(
            n=n, replicas=R, d_hits=int(d_ind.sum()),
            ad_hits=int((d_ind & a_ind).sum()),
            p_d=float(wd.mean()), p_d_stderr=float(wd.std(ddof=1) / np.sqrt(R)),
            p_ad=float(wad.mean()),
            p_ad_stderr=float(wad.std(ddof=1) / np.sqrt(R))))
    return EmpiricsReport(mode=mode, xi=xi, theta=theta, eps=eps, delta=delta,
                          center=center_val, center_error=center_err,
                          norm=norm, entries=entries, notes=notes)


def _sample_averaged_tilted(dist, theta, n, n_tot, replicas, seed, f):
    """Tilted joint sampling for the averaged measure: i.i.d. q^theta steps;
    when f reads the walker's cell, visited cells are drawn size-biased by
    the step actually taken (the exact conditional law under the tilt)."""
    d = dist.d
    steps = StepSet(d).steps
    qt = tilted_step_law(dist.mean_kernel(), theta)
    cum = np.cumsum(qt)
    cum[-1] = 1.0
    rep = np.arange(replicas)
    steps_mat = np.empty((replicas, n_tot), dtype=np.int64)
    for t in range(n_tot):
        u = seeds.uniform01(seed, seeds.STREAM_WALK_STEP, rep, t)
        steps_mat[:, t] = np.searchsorted(cum, u, side="right").clip(max=2 * d - 1)
    moves = steps[steps_mat]
    disp = np.cumsum(moves, axis=1)
    disp_n = disp[:, n - 1].astype(np.float64) if n > 0 else np.zeros((replicas, d))
    disp_tot = disp[:, -1].astype(np.float64)
    cell_idx = None
    atoms = None
    if not f.steps_only:
        atoms, probs = _atoms_of(dist)
        q = dist.mean_kernel()
        # size-biased atom law given the observed step: p_a v_a(z) / q(z)
        biased_cum = np.cumsum(probs[None, :] * atoms.T / q[:, None], axis=1)
        biased_cum[:, -1] = 1.0
        cell_idx = np.empty((replicas, n), dtype=np.int64)
        for j in range(n):
            u = seeds.uniform01(seed, seeds.STREAM_ENV_CELL, rep, j, 1)
            row = steps_mat[:, j]
            cell_idx[:, j] = np.array(
                [np.searchsorted(biased_cum[z], uu, side="right")
                 for z, uu in zip(row, u)]).clip(max=len(probs) - 1)
    return steps_mat, disp_n, disp_tot, cell_idx, atoms


def _sample_quenched_tube(dist, fixed_env, theta, lp, xi, n, n_tot, replicas,
                          seed, f, tube_radius, delta):
    """Doob-chain proposal in one fixed environment, confined to an L1 tube
    around the ray t -> t*xi. The harmonic table treats sites outside the
    tube as absorbing (u = 0), which makes the transformed rows sum to one
    exactly and keeps every sampled path inside."""
    d = dist.d
    steps = StepSet(d).steps
    two_d = 2 * d
    m = tilted_step_law(dist.mean_kernel(), theta)
    var = (m[0::2] + m[1::2]) - (m[0::2] - m[1::2]) ** 2
    if tube_radius is None:
        tube_radius = int(np.ceil(n * delta + 4.0 * np.sqrt(n_tot * var.max()) + 2))
    ball = l1_ball(d, tube_radius)
    if len(ball) * (n_tot + 1) > 60_000_000:
        raise ResourceLimitError(
            f"tube of radius {tube_radius} over {n_tot + 1} levels holds "
            f"{len(ball) * (n_tot + 1)} sites; pass a smaller tube_radius")
    centers = np.rint(np.arange(n_tot + 1)[:, None] * xi[None, :]).astype(np.int64)
    if fixed_env is None:
        pad = tube_radius + 1
        lo = centers.min(axis=0) - pad
        hi = centers.max(axis=0) + pad
        fixed_env = sample_window(
            dist, box_geometry(0, n_tot + 1, lo.tolist(), hi.tolist()),
            master_seed=seeds.derive_seed(seed, seeds.STREAM_ENV_REPLICA, 0))
    levels = []
    for t in range(n_tot + 1):
        sites = ball + centers[t]
        keys = sort_sites(sites, d)[1]
        levels.append((t, sites, keys))
    log_u = _backward_levels(theta, lp, levels,
                             lambda t, s: fixed_env.cells_at(t, s), d,
                             log_mode=True, kill_missing=True)
    from .lattice import lookup_rows
    x0 = np.zeros(d, dtype=np.int64)
    i0 = int(lookup_rows(levels[0][2], x0[None, :], d)[0])
    log_u0 = float(log_u[0][i0])
    if not np.isfinite(log_u0):
        raise EstimateUndefinedError(
            "the tube start has zero harmonic mass; widen tube_radius")
    tilts = _tilt_exponents(theta, lp, d)
    rep = np.arange(replicas)
    pos = np.zeros((replicas, d), dtype=np.int64)
    steps_mat = np.empty((replicas, n_tot), dtype=np.int64)
    cur_log_u = np.full(replicas, log_u0)
    for t in range(n_tot):
        _, sites1, keys1 = levels[t + 1]
        cells = fixed_env.cells_at(t, pos)
        rows = np.empty((replicas, two_d))
        nxt_log = np.empty((replicas, two_d))
        for zi in range(two_d):
            idx = lookup_rows(keys1, pos + steps[zi], d, missing="mask")
            ok = idx >= 0
            lu = np.where(ok, log_u[t + 1][np.where(ok, idx, 0)], -np.inf)
            nxt_log[:, zi] = lu
            rows[:, zi] = np.where(ok, cells[:, zi] * np.exp(tilts[zi] + lu - cur_log_u), 0.0)
        cum = np.cumsum(rows, axis=1)
        u = seeds.uniform01(seed, seeds.STREAM_WALK_STEP, rep, t)
        idx_step = (u[:, None] >= cum * (1.0 / cum[:, -1][:, None])).sum(axis=1) \
            .clip(max=two_d - 1)
        steps_mat[:, t] = idx_step
        cur_log_u = nxt_log[rep, idx_step]
        pos = pos + steps[idx_step]
    moves = steps[steps_mat]
    disp = np.cumsum(moves, axis=1)
    disp_n = disp[:, n - 1].astype(np.float64)
    disp_tot = disp[:, -1].astype(np.float64)
    cell_idx = None
    atoms = None
    if not f.steps_only:
        atoms, _ = _atoms_of(dist)
        pos_j = np.concatenate([np.zeros((replicas, 1, d), dtype=np.int64),
                                disp[:, : n - 1]], axis=1) if n > 1 else \
            np.zeros((replicas, 1, d), dtype=np.int64)
        cell_idx = np.empty((replicas, n), dtype=np.int64)
        for j in range(n):
            cells_j = fixed_env.cells_at(j, pos_j[:, j])
            # identify the realized atom: nearest support vector
            dists = np.abs(cells_j[:, None, :] - atoms[None, :, :]).sum(axis=2)
            cell_idx[:, j] = np.argmin(dists, axis=1)
    return steps_mat, disp_n, disp_tot, cell_idx, atoms, log_u0, tube_radius


# ---------------------------------------------------------------------------
# Markov structure of the conditioned process
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class MarkovCheckReport:
    lhs: float
    horizons: list
    rhs: list
    deviations: list

    def to_dict(self) -> dict:
        return {"lhs": self.lhs, "horizons": list(self.horizons),
                "rhs": list(self.rhs), "deviations": list(self.deviations)}


def _u_table(d, theta, lp, cval, horizon):
    """u values on the cone {(t, x): 0 <= t <= horizon, |x|_1 <= t}."""
    steps = StepSet(d).steps
    two_d = 2 * d
    tilts = _tilt_exponents(theta, lp, d)
    table = {(horizon, tuple(s)): 1.0 for s in l1_ball(d, horizon)}
    for t in range(horizon - 1, -1, -1):
        for s in l1_ball(d, t):
            st = tuple(s)
            w = cval(t, st)
            table[(t, st)] = float(sum(
                w[zi] * np.exp(tilts[zi]) * table[(t + 1, tuple(np.asarray(st) + steps[zi]))]
                for zi in range(two_d)))
    return table


def doob_inner_expectation(d, theta, lp, cval, g: CylinderFunction,
                           horizon: int) -> float:
    """E^{theta, omega', horizon}[g(omega', next steps)]: enumerate g's step
    paths under the transformed kernel built from the horizon-limited
    harmonic table of the environment described by cval."""
    if g.N != 0:
        raise ConfigError("the chained function g must be forward-looking (N=0)")
    if horizon < g.K:
        raise ConfigError(f"horizon {horizon} must cover g's {g.K} steps")
    steps = StepSet(d).steps
    two_d = 2 * d
    tilts = _tilt_exponents(theta, lp, d)
    table = _u_table(d, theta, lp, cval, horizon)
    acc = 0.0
    for p in itertools.product(range(two_d), repeat=g.K):
        weight = 1.0
        pos = np.zeros(d, dtype=np.int64)
        for t, zi in enumerate(p):
            w = cval(t, tuple(pos))
            num = w[zi] * np.exp(tilts[zi]) * table[(t + 1, tuple(pos + steps[zi]))]
            weight *= num / table[(t, tuple(pos))]
            pos = pos + steps[zi]
        view = _CvalView(cval)
        acc += weight * g.evaluator(view, np.asarray(p, dtype=np.int64))
    return acc


class _CvalView:
    def __init__(self, cval):
        self._cval = cval

    def cell(self, level, site):
        return self._cval(level, tuple(int(v) for v in np.atleast_1d(site)))


def markov_structure_check(dist: EnvDistribution, xi, f: CylinderFunction,
                           g: CylinderFunction, horizons,
                           observed_horizon: int | None = None,
                           term_cap: int = 50_000_000) -> MarkovCheckReport:
    """Exact check that the conditioned process is Markov with the
    transformed kernel: the integral of f times g-after-f's-steps must match
    the integral of f times the kernel-composed inner expectation of g,
    where the inner expectation runs the transformed chain built from the
    horizon-H harmonic table of the reached environment.

    The match is exact to rounding at *every* horizon, not merely in the
    limit: inside the conditioned integral the outer tilted path sum cancels
    the table's denominator and every cell the table never read integrates
    to harmonic mass one (the mean-one martingale property), the same
    cancellation that makes the defining expectation well defined. The
    horizons argument therefore produces a row of near-zero deviations
    rather than a decaying sequence; it is kept so the invariance is
    checked at several table depths. Enumeration over the observed cone
    limits feasible depths (each cone cell multiplies the assignment count
    by the number of atoms): up to ~4 in d = 1 and ~2 in d = 3.
    """
    if g.N != 0:
        raise ConfigError("the chained function g must be forward-looking (N=0)")
    d = dist.d
    K = f.K
    q = dist.mean_kernel()
    sol = solve_theta(q, xi)
    theta, lp = sol.theta, sol.log_phi
    g_shift = g
    for _ in range(K):
        g_shift = shift_compose(g_shift)
    lhs = mu_exact(dist, xi, product_function(f, g_shift),
                   term_cap=term_cap).value
    steps = StepSet(d).steps
    horizons = sorted(int(h) for h in horizons)
    h_obs = max(horizons) if observed_horizon is None else int(observed_horizon)
    if h_obs < max(horizons):
        raise ConfigError("observed_horizon must cover the largest horizon")
    cone_cells = [(t, tuple(s)) for t in range(h_obs) for s in l1_ball(d, t)]

    def cells_for(steps_idx):
        shift = np.zeros(d, dtype=np.int64)
        for zi in steps_idx[:K]:
            shift = shift + steps[int(zi)]
        out = set(f.cells_for(steps_idx[:K]))
        for lv, s in cone_cells:
            out.add((K + lv, tuple(np.asarray(s) + shift)))
        for lv, s in g.cells:
            out.add((K + lv, tuple(np.asarray(s) + shift)))
        return sorted(out)

    rhs_vals, devs = [], []
    for H in horizons:
        memo = {}

        def ev(view, steps_idx, _H=H, _memo=memo):
            shift = np.zeros(d, dtype=np.int64)
            for zi in steps_idx[:K]:
                shift = shift + steps[int(zi)]

            def cval(level, site):
                return view.cell(K + level, tuple(np.asarray(site) + shift))

            key = tuple(float(v) for lv, s in cone_cells if lv < _H
                        for v in cval(lv, s))
            key += tuple(float(v) for lv, s in g.cells for v in cval(lv, s))
            got = _memo.get(key)
            if got is None:
                got = doob_inner_expectation(d, theta, lp, cval, g, _H)
                _memo[key] = got
            return f.evaluator(view, steps_idx) * got

        composed = CylinderFunction(
            d, f.N, max(f.M, K + h_obs), K, [], ev,
            bound=f.bound * g.bound * 4.0,
            name=f"{f.name}*doob[{g.name},H={H}]", cells_for=cells_for)
        rhs = mu_exact(dist, xi, composed, term_cap=term_cap).value
        rhs_vals.append(rhs)
        devs.append(abs(rhs - lhs))
    return MarkovCheckReport(lhs=lhs, horizons=list(horizons), rhs=rhs_vals,
                             deviations=devs)
