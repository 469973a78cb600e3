"""Experiment runner: strict configs, deterministic seeds, atomic outputs.

Every run is described by a config (CLI flags or a JSON file with an
explicit version field and no unknown keys), dispatches to one module
operation, and produces a RunReport whose non-timing content is a pure
function of the config: all randomness flows from the master seed through
counter-based streams, and worker count only affects wall time. Reports and
side outputs are written to a temp file and renamed, so interrupted runs
leave nothing partial behind.

Exit codes: 0 ok, 2 config error, 3 resource limit, 4 numeric
non-convergence, 1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .collisions import collision_series, criterion_eta
from .conditioned import (conditioned_empirics, mu_exact, mu_via_htransform,
                          parse_function_spec)
from .environment import (EnvDistribution, cone_geometry, load_env_spec,
                          sample_window)
from .errors import (ConfigError, EstimateUndefinedError, NonConvergenceError,
                     ResourceLimitError, RwspaceError)
from .harmonic import compute_u, doob_kernel, simulate_tilted
from .rate import rate_function, solve_theta, velocity_lln
from .walks import PathEnsemble, simulate_quenched

CONFIG_VERSION = 1


@dataclass
class ExperimentConfig:
    """One experiment: a subcommand plus its parameters. Strict: unknown
    keys are rejected, round trips are lossless, and the resolved form is
    embedded in every report."""

    subcommand: str
    params: dict
    seed: int = 0
    workers: int = 1
    out_dir: str = "."
    version: int = CONFIG_VERSION

    def to_dict(self) -> dict:
        return {"version": self.version, "subcommand": self.subcommand,
                "seed": self.seed, "workers": self.workers,
                "out_dir": self.out_dir, "params": self.params}

    @staticmethod
    def from_dict(doc: dict) -> "ExperimentConfig":
        required = {"version", "subcommand", "params"}
        allowed = required | {"seed", "workers", "out_dir"}
        missing = required - set(doc)
        if missing:
            raise ConfigError(f"config missing keys: {sorted(missing)}")
        extra = set(doc) - allowed
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        if doc["version"] != CONFIG_VERSION:
            raise ConfigError(
                f"config version {doc['version']} unsupported "
                f"(expected {CONFIG_VERSION})")
        return ExperimentConfig(subcommand=doc["subcommand"],
                                params=dict(doc["params"]),
                                seed=int(doc.get("seed", 0)),
                                workers=int(doc.get("workers", 1)),
                                out_dir=doc.get("out_dir", "."))

    @staticmethod
    def load(path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} line {exc.lineno}: {exc.msg}") from exc
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return ExperimentConfig.from_dict(doc)


@dataclass
class RunReport:
    config: ExperimentConfig
    results: dict
    tables: dict = field(default_factory=dict)  # name -> (header, rows)
    timing: dict = field(default_factory=dict)
    software_version: str = ""

    def to_dict(self) -> dict:
        return {"config": self.config.to_dict(),
                "software_version": self.software_version or __version__,
                "results": self.results,
                "tables": {k: {"header": h, "rows": r}
                           for k, (h, r) in self.tables.items()},
                "timing": self.timing}


def atomic_write_text(path: str, text: str) -> None:
    """Write via temp file + rename so readers never see partial output."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".rwspace-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(x) -> str:
    if isinstance(x, float):
        return format(x, ".17g")
    return str(x)


def emit_plot_data(report: RunReport, selector: str) -> str:
    """Render one tabular section as RFC-4180 CSV with 17-significant-digit
    floats."""
    if selector not in report.tables:
        raise ConfigError(
            f"unknown table {selector!r}; available: {sorted(report.tables)}")
    header, rows = report.tables[selector]
    buf = io.StringIO()
    writer = csv.writer(buf, quoting=csv.QUOTE_MINIMAL, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _parse_vector(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",")], dtype=np.float64)
    except ValueError as exc:
        raise ConfigError(f"cannot parse vector {text!r}: {exc}") from exc


def _env_from_params(params: dict) -> EnvDistribution:
    if "env" not in params:
        raise ConfigError("missing 'env' (path to an environment spec JSON)")
    return load_env_spec(params["env"])


# ---------------------------------------------------------------------------
# Subcommand implementations (each returns results dict + tables)
# ---------------------------------------------------------------------------

def _run_rate(params, seed, workers):
    dist = _env_from_params(params)
    xi = _parse_vector(params["xi"])
    sol = solve_theta(dist.mean_kernel(), xi)
    return sol.to_dict(), {}


def _rate_curve_point(args):
    q, xi_list = args
    out = []
    for xi in xi_list:
        val = rate_function(q, np.asarray(xi))
        if np.isfinite(val):
            sol = solve_theta(q, np.asarray(xi))
            out.append((xi, sol.theta.tolist(), sol.rate))
        else:
            out.append((xi, [float("nan")] * (len(q) // 2), float("inf")))
    return out


def _run_rate_curve(params, seed, workers):
    dist = _env_from_params(params)
    q = dist.mean_kernel()
    d = dist.d
    axis = int(params.get("axis", 1))
    if not 1 <= axis <= d:
        raise ConfigError(f"axis {axis} outside 1..{d}")
    samples = int(params.get("samples", 101))
    lo = float(params.get("lo", -0.95))
    hi = float(params.get("hi", 0.95))
    xs = np.linspace(lo, hi, samples)
    xi_list = []
    for x in xs:
        xi = [0.0] * d
        xi[axis - 1] = float(x)
        xi_list.append(xi)
    chunks = [xi_list[i::workers] for i in range(workers)] if workers > 1 else [xi_list]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_rate_curve_point, [(q, ch) for ch in chunks]))
    else:
        parts = [_rate_curve_point((q, xi_list))]
    by_xi = {}
    for part in parts:
        for xi, theta, rate in part:
            by_xi[tuple(xi)] = (theta, rate)
    rows = []
    for xi in xi_list:
        theta, rate = by_xi[tuple(xi)]
        rows.append([xi[axis - 1]] + theta + [rate])
    header = ["xi"] + [f"theta_{k+1}" for k in range(d)] + ["rate"]
    return ({"axis": axis, "samples": samples, "xi_o": velocity_lln(q).tolist()},
            {"rate-curve": (header, rows)})


def _run_simulate(params, seed, workers):
    dist = _env_from_params(params)
    mode = params.get("mode", "quenched")
    n = int(params["n"])
    replicas = int(params["replicas"])
    d = dist.d
    if mode == "averaged":
        # the averaged path marginal is the classical q walk
        from .environment import Deterministic
        from .lattice import StepSet
        dist = Deterministic(StepSet(d), dist.c, dist.mean_kernel())
    elif mode != "quenched":
        raise ConfigError(f"unknown simulate mode {mode!r}")
    env = sample_window(dist, cone_geometry(0, n + 1, (0,) * d), seed)
    ens = simulate_quenched(env, (0, (0,) * d), n, replicas, seed=seed)
    ends = ens.endpoints()
    results = {"mode": mode, "n": n, "replicas": replicas,
               "mean_velocity": (ends.mean(axis=0) / max(n, 1)).tolist(),
               "out": params.get("out")}
    if params.get("out"):
        ens.save_jsonl(params["out"])
    rows = [[i] + ends[i].tolist() + [float(ens.weights[i])]
            for i in range(min(len(ens), int(params.get("table_rows", 100))))]
    header = ["replica"] + [f"x{k+1}" for k in range(d)] + ["weight"]
    return results, {"endpoints": (header, rows)}


def _run_htransform(params, seed, workers):
    dist = _env_from_params(params)
    theta = _parse_vector(params["theta"])
    N = int(params["N"])
    d = dist.d
    r0 = int(params.get("r0", 0))
    env = sample_window(dist, cone_geometry(0, N + 1, (0,) * d, r0=r0), seed)
    fld = compute_u(env, theta, N, base=(0, (0,) * d), r0=r0)
    out = params.get("out")
    if out:
        save_field(fld, out)
    u00 = fld.value(0, (0,) * d)
    return ({"theta": theta.tolist(), "N": N, "u_origin": u00,
             "log_phi": fld.log_phi, "out": out}, {})


def _run_tilted_sim(params, seed, workers):
    fld = load_field(params["field"])
    n = int(params["n"])
    replicas = int(params["replicas"])
    kern = doob_kernel(fld)
    ens = simulate_tilted(kern, (fld.n0, fld.x0), n, replicas, seed=seed)
    ends = ens.endpoints()
    results = {"n": n, "replicas": replicas,
               "mean_velocity": ((ends - fld.x0).mean(axis=0) / n).tolist(),
               "weight_mean": float(ens.weights.mean()),
               "out": params.get("out")}
    if params.get("out"):
        ens.save_jsonl(params["out"])
    return results, {}


def _criterion_point(args):
    spec, theta, k_max = args
    dist = EnvDistribution.from_spec(spec)
    s = collision_series(dist, np.asarray(theta), k_max=k_max)
    return {"theta": list(theta), "radius": float(np.linalg.norm(theta)),
            "B_truncated": s.B_truncated, "tail_bound": s.tail_bound,
            "B_upper": s.B_upper, "C_inf_lower": s.C_inf_lower,
            "verdict": bool(s.B_upper < 1.0)}


def _run_intersection(params, seed, workers):
    dist = _env_from_params(params)
    k_max = int(params.get("kmax", 64))
    grid_spec = params.get("theta_grid", "0:0.05:0.01")
    lo, hi, step = (float(v) for v in grid_spec.split(":"))
    radii = np.arange(lo, hi + step / 2, step)
    axis = int(params.get("axis", 1))
    thetas = []
    for r in radii:
        t = [0.0] * dist.d
        t[axis - 1] = float(r)
        thetas.append(t)
    if dist.d < 3:
        rep = criterion_eta(dist, [np.asarray(t) for t in thetas], k_max=k_max)
        return rep.to_dict(), {"intersection": (
            ["theta", "B", "tail", "C_inf", "verdict"], [])}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(_criterion_point,
                                    [(dist.to_spec(), t, k_max) for t in thetas]))
    else:
        entries = [_criterion_point((dist.to_spec(), t, k_max)) for t in thetas]
    eta_bar = 0.0
    for radius in sorted({e["radius"] for e in entries}):
        if all(e["verdict"] for e in entries if e["radius"] <= radius):
            eta_bar = radius
        else:
            break
    rows = [[e["radius"], e["B_truncated"], e["tail_bound"], e["C_inf_lower"],
             str(e["verdict"])] for e in entries]
    return ({"applicable": True, "eta_bar": eta_bar, "entries": entries},
            {"intersection": (["theta", "B", "tail", "C_inf", "verdict"], rows)})


def _run_mu(params, seed, workers):
    dist = _env_from_params(params)
    xi = _parse_vector(params["xi"])
    f = parse_function_spec(dist.d, params["f"],
                            bound=float(params.get("f_bound", 1.0)))
    nmk = params.get("NMK")
    if nmk:
        N, M, K = (int(v) for v in str(nmk).split(","))
        f = f.with_indices(N=max(N, f.N), M=max(M, f.M), K=max(K, f.K))
    method = params.get("method", "exact")
    if method == "exact":
        val = mu_exact(dist, xi, f)
    elif method == "htransform":
        val = mu_via_htransform(dist, xi, f,
                                horizon=int(params.get("horizon", f.N + f.K + 8)),
                                env_replicas=int(params.get("env_replicas", 200)),
                                seed=seed)
    else:
        raise ConfigError(f"unknown mu method {method!r}")
    return ({"value": val.value, "method": val.method, "error": val.error,
             "meta": val.meta, "f": params["f"]}, {})


def _run_condition(params, seed, workers):
    dist = _env_from_params(params)
    xi = _parse_vector(params["xi"])
    f = parse_function_spec(dist.d, params.get("f", "builtin:step-indicator:+e1"),
                            bound=float(params.get("f_bound", 1.0)))
    n_grid = [int(v) for v in str(params["n_grid"]).split(",")]
    rep = conditioned_empirics(
        mode=params.get("mode", "averaged"), env=dist, xi=xi, f=f,
        eps=float(params["eps"]), delta=float(params["delta"]),
        n_grid=n_grid, replicas=int(params.get("replicas", 100_000)),
        seed=seed, norm=params.get("norm", "l2"),
        tube_radius=(int(params["tube_radius"]) if "tube_radius" in params
                     else None))
    doc = rep.to_dict()
    rows = [[e["n"], e["p_d"], e["p_ad"], e["p_a_given_d"], e["log_rate"]]
            for e in doc["entries"]]
    return doc, {"condition": (
        ["n", "P_D", "P_AD", "P_A_given_D", "log_rate_per_n"], rows)}


_SUBCOMMANDS = {
    "rate": _run_rate,
    "rate-curve": _run_rate_curve,
    "simulate": _run_simulate,
    "htransform": _run_htransform,
    "tilted-sim": _run_tilted_sim,
    "intersection": _run_intersection,
    "mu": _run_mu,
    "condition": _run_condition,
}


def run(config: ExperimentConfig) -> RunReport:
    """Dispatch one experiment and assemble its report. Pure given the
    config (timing aside); side outputs are written atomically."""
    if config.subcommand not in _SUBCOMMANDS:
        raise ConfigError(f"unknown subcommand {config.subcommand!r}; "
                          f"available: {sorted(_SUBCOMMANDS)}")
    t0 = time.time()
    results, tables = _SUBCOMMANDS[config.subcommand](
        dict(config.params), config.seed, max(1, config.workers))
    report = RunReport(config=config, results=results, tables=tables,
                       timing={"wall_seconds": time.time() - t0},
                       software_version=__version__)
    return report


# ---------------------------------------------------------------------------
# Field persistence (binary, bit-exact round trip)
# ---------------------------------------------------------------------------

def save_field(fld, path) -> None:
    """Harmonic field to npz: header (d, theta, horizon, cone geometry, env
    provenance) + per-level f64 log-u arrays. Bit-exact round trip."""
    header = {"format": "rwspace-harmonic-field", "version": 1,
              "d": fld.d, "theta": fld.theta.tolist(), "n0": fld.n0,
              "N": fld.N, "x0": fld.x0.tolist(), "r0": fld.r0,
              "log_phi": fld.log_phi, "log_space": fld.log_space,
              "dist": fld.env.dist.to_spec(),
              "env_seed": fld.env.master_seed,
              "env_geometry": fld.env.geometry.to_spec(),
              "env_shift_m": fld.env.shift_m,
              "env_shift_y": fld.env.shift_y.tolist()}
    arrays = {"header_json": np.frombuffer(json.dumps(header).encode(),
                                           dtype=np.uint8)}
    for n in range(fld.n0, fld.N + 1):
        sites, _, log_u = fld._levels[n]
        arrays[f"sites_{n}"] = sites
        arrays[f"logu_{n}"] = log_u
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_field(path):
    from .environment import EnvWindow, WindowGeometry
    from .harmonic import HarmonicField
    from .lattice import sort_sites
    with np.load(path) as data:
        header = json.loads(bytes(data["header_json"]).decode())
        if header.get("format") != "rwspace-harmonic-field":
            raise ConfigError(f"{path} is not a harmonic field file")
        dist = EnvDistribution.from_spec(header["dist"])
        env = EnvWindow(dist, header["env_seed"],
                        WindowGeometry.from_spec(header["env_geometry"]),
                        header["env_shift_m"], np.asarray(header["env_shift_y"]))
        fld = HarmonicField(env=env, theta=np.asarray(header["theta"]),
                            n0=header["n0"], N=header["N"],
                            x0=np.asarray(header["x0"], dtype=np.int64),
                            r0=header["r0"], log_phi=header["log_phi"],
                            log_space=header["log_space"])
        for n in range(fld.n0, fld.N + 1):
            sites = data[f"sites_{n}"]
            keys = sort_sites(sites, fld.d)[1]
            fld._levels[n] = (sites, keys, data[f"logu_{n}"])
    return fld


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS,
                        help="JSON config file (overrides subcommand flags)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--workers", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out-dir", dest="out_dir", default=argparse.SUPPRESS)
    p = argparse.ArgumentParser(
        prog="rwspace", parents=[common],
        description="Random walk in a space-time product environment: rate "
                    "functions, h-transforms, collision bounds, conditioned "
                    "measures.")
    sub = p.add_subparsers(dest="subcommand")

    def add(name, *flags):
        sp = sub.add_parser(name, parents=[common])
        for flag, kw in flags:
            sp.add_argument(flag, **kw)
        return sp

    add("rate", ("--env", {"required": True}), ("--xi", {"required": True}),
        ("--out", {}))
    add("rate-curve", ("--env", {"required": True}),
        ("--axis", {"type": int, "default": 1}),
        ("--samples", {"type": int, "default": 101}),
        ("--lo", {"type": float, "default": -0.95}),
        ("--hi", {"type": float, "default": 0.95}), ("--out", {}))
    add("simulate", ("--env", {"required": True}),
        ("--mode", {"default": "quenched", "choices": ["quenched", "averaged"]}),
        ("--n", {"type": int, "required": True}),
        ("--replicas", {"type": int, "required": True}), ("--out", {}))
    add("htransform", ("--env", {"required": True}),
        ("--theta", {"required": True}), ("--N", {"type": int, "required": True}),
        ("--r0", {"type": int, "default": 0}), ("--out", {}))
    add("tilted-sim", ("--field", {"required": True}),
        ("--n", {"type": int, "required": True}),
        ("--replicas", {"type": int, "required": True}), ("--out", {}))
    add("intersection", ("--env", {"required": True}),
        ("--theta-grid", {"dest": "theta_grid", "default": "0:0.05:0.01"}),
        ("--axis", {"type": int, "default": 1}),
        ("--kmax", {"type": int, "default": 64}),
        ("--method", {"default": "exact", "choices": ["exact"]}), ("--out", {}))
    add("mu", ("--env", {"required": True}), ("--xi", {"required": True}),
        ("--f", {"required": True}), ("--NMK", {}),
        ("--method", {"default": "exact", "choices": ["exact", "htransform"]}),
        ("--f-bound", {"dest": "f_bound", "type": float, "default": 1.0}),
        ("--horizon", {"type": int}), ("--env-replicas", {"dest": "env_replicas",
                                                          "type": int}),
        ("--out", {}))
    add("condition", ("--env", {"required": True}), ("--xi", {"required": True}),
        ("--mode", {"default": "averaged", "choices": ["averaged", "quenched"]}),
        ("--f", {"default": "builtin:step-indicator:+e1"}),
        ("--f-bound", {"dest": "f_bound", "type": float, "default": 1.0}),
        ("--eps", {"type": float, "required": True}),
        ("--delta", {"type": float, "required": True}),
        ("--n-grid", {"dest": "n_grid", "required": True}),
        ("--replicas", {"type": int, "default": 100_000}),
        ("--norm", {"default": "l2", "choices": ["l1", "l2", "linf"]}),
        ("--tube-radius", {"dest": "tube_radius", "type": int}), ("--out", {}))
    rp = sub.add_parser("report", parents=[common])
    rp.add_argument("--in", dest="infile", required=True)
    rp.add_argument("--selector", required=True)
    rp.add_argument("--out")
    return p


def _config_from_args(args) -> ExperimentConfig:
    skip = {"config", "seed", "workers", "out_dir", "subcommand", "out"}
    params = {k: v for k, v in vars(args).items()
              if k not in skip and v is not None}
    if getattr(args, "out", None):
        params["out"] = args.out
    return ExperimentConfig(subcommand=args.subcommand, params=params,
                            seed=getattr(args, "seed", 0),
                            workers=getattr(args, "workers", 1),
                            out_dir=getattr(args, "out_dir", "."))


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.subcommand == "report":
            with open(args.infile) as fh:
                doc = json.load(fh)
            report = RunReport(
                config=ExperimentConfig.from_dict(doc["config"]),
                results=doc["results"],
                tables={k: (v["header"], v["rows"])
                        for k, v in doc.get("tables", {}).items()},
                timing=doc.get("timing", {}),
                software_version=doc.get("software_version", ""))
            csv_text = emit_plot_data(report, args.selector)
            if args.out:
                atomic_write_text(args.out, csv_text)
            else:
                sys.stdout.write(csv_text)
            return 0
        if getattr(args, "config", None):
            config = ExperimentConfig.load(args.config)
            if hasattr(args, "seed"):
                config.seed = args.seed
            if hasattr(args, "workers"):
                config.workers = args.workers
        else:
            if not args.subcommand:
                raise ConfigError("no subcommand given (and no --config)")
            config = _config_from_args(args)
        report = run(config)
        text = json.dumps(report.to_dict(), indent=2, sort_keys=True)
        out_path = os.path.join(config.out_dir,
                                f"{config.subcommand}-report.json")
        atomic_write_text(out_path, text)
        sys.stdout.write(text + "\n")
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ResourceLimitError as exc:
        print(f"resource error: {exc}", file=sys.stderr)
        return 3
    except (NonConvergenceError, EstimateUndefinedError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4
    except RwspaceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
