"""Command-line front end: ``run``, ``barrier-check``, ``legendre-test``, ``export``.

Run configuration is an INI file with a single ``[run]`` section of
``key = value`` lines; command-line flags override the file.  Exit codes:
0 when every check passes, 1 on a verification failure, 2 on a
configuration error, 3 when the solver does not converge.  The
environment variable ``MA_FORGE_THREADS`` caps the worker count.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

__all__ = ["RunConfig", "ConfigError", "read_config", "write_config", "read_segments", "main",
           "execute", "export_run", "load_run"]

log = logging.getLogger("ma_forge")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3
MODES = ("polytope", "y-graph", "barrier-check", "legendre-test")
PARALLEL = ("gauss-seidel", "jacobi")
DEFAULT_EPS = {"polytope": 1.0, "y-graph": 0.1}
SCHEMA_PATH = Path(__file__).with_name("report_schema.json")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Everything needed to reproduce a run.

    ``eps``, ``eps_tilde``, ``r0`` and ``m`` left as ``None`` take the
    pipeline defaults (``r0`` is then aligned with the grid when the
    segment directions allow it).
    """

    mode: str = "polytope"
    n: int = 3
    preset: str | None = "tetrahedron"
    vertices: str | None = None
    segments: str | None = None
    R: float = 4.0
    m: int | None = None
    eps: float | None = None
    eps_tilde: float | None = None
    r0: float | None = None
    out: str = "ma_forge_out"
    parallel: str = "gauss-seidel"
    tol_r: float = 1e-7
    max_sweeps: int = 20000
    seed: int = 0

    def validate(self) -> "RunConfig":
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.parallel not in PARALLEL:
            raise ConfigError(f"parallel must be one of {PARALLEL}, got {self.parallel!r}")
        if self.n < 1:
            raise ConfigError("n must be positive")
        if self.m is not None and (self.m < 3 or self.m % 2 == 0):
            raise ConfigError("m must be odd and at least 3")
        if self.R <= 0:
            raise ConfigError("R must be positive")
        if self.mode == "polytope" and not (self.preset or self.vertices):
            raise ConfigError("polytope mode needs a preset or a vertex file")
        if self.mode == "y-graph" and not self.segments:
            raise ConfigError("y-graph mode needs a segment file")
        return self


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name: str, text: str):
    kind = _TYPES[name]
    if text.strip().lower() in ("", "none"):
        if "None" in kind:
            return None
        raise ConfigError(f"{name} may not be empty")
    try:
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {text!r}") from exc
    return text.strip()


def read_config(path) -> RunConfig:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(str(exc)) from exc
    if not parser.has_section("run"):
        raise ConfigError("missing [run] section")
    values = {}
    for key, text in parser.items("run"):
        if key not in _TYPES:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _coerce(key, text)
    return RunConfig(**values).validate()


def write_config(path, cfg: RunConfig) -> None:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    parser["run"] = {k: ("none" if v is None else repr(v) if isinstance(v, float) else str(v))
                     for k, v in asdict(cfg).items()}
    with open(path, "w") as fh:
        parser.write(fh)


def read_segments(path) -> np.ndarray:
    """Segment file: one segment per line, either ``x1 .. xn`` (far endpoint,
    common vertex at the origin) or ``a1 .. an b1 .. bn``.  ``#`` starts a comment.
    """
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                rows.append([float(t) for t in line.replace(",", " ").split()])
    if not rows or len({len(r) for r in rows}) != 1:
        raise ConfigError(f"{path}: need rows of equal length")
    A = np.array(rows)
    return A


# ---------------------------------------------------------------------------
# runs


def _threads():
    value = os.environ.get("MA_FORGE_THREADS")
    if not value:
        return
    try:
        k = max(1, int(value))
    except ValueError:
        raise ConfigError(f"MA_FORGE_THREADS must be an integer, got {value!r}")
    import numba

    numba.set_num_threads(min(k, numba.config.NUMBA_NUM_THREADS))


def _segments_for(cfg: RunConfig) -> np.ndarray:
    A = read_segments(cfg.segments)
    if A.shape[1] == cfg.n:
        return A
    if A.shape[1] == 2 * cfg.n:
        return A.reshape(-1, 2, cfg.n)
    raise ConfigError(f"segment rows have {A.shape[1]} entries, expected {cfg.n} or {2 * cfg.n}")


def solve_from_config(cfg: RunConfig):
    """Run the configured pipeline; returns the solve result."""
    from .geometry import catalog, read_polytope
    from .grid import TensorGrid
    from .obstacle import default_m, lattice_r0, polytope_pipeline, y_pipeline

    m = cfg.m or default_m(cfg.n)
    if cfg.mode == "polytope":
        try:
            omega = read_polytope(cfg.vertices) if cfg.vertices else catalog(cfg.preset, cfg.n)
        except (KeyError, ValueError, OSError) as exc:
            raise ConfigError(str(exc)) from exc
        eps = DEFAULT_EPS["polytope"] if cfg.eps is None else cfg.eps
        return polytope_pipeline(omega, cfg.n, cfg.R, m, eps, mode=cfg.parallel, tol_r=cfg.tol_r,
                                 max_sweeps=cfg.max_sweeps)
    segs = _segments_for(cfg)
    far = segs[:, 1] - segs[:, 0] if segs.ndim == 3 else segs
    r0 = cfg.r0 if cfg.r0 is not None else lattice_r0(far, TensorGrid(cfg.n, cfg.R, m).h)
    eps = DEFAULT_EPS["y-graph"] if cfg.eps is None else cfg.eps
    from .analysis import contact_set, y_topology

    def topology(res):
        try:
            return y_topology(contact_set(res))[0]
        except ValueError:
            return False

    return y_pipeline(segs, cfg.n, cfg.R, m, eps, cfg.eps_tilde, r0, mode=cfg.parallel, tol_r=cfg.tol_r,
                      max_sweeps=cfg.max_sweeps, verify=topology)


def _expectations(cfg: RunConfig, result) -> dict:
    if cfg.mode != "polytope":
        return {}
    omega = result.extra["omega"]
    exp = {"components": omega.num_vertices}
    if cfg.n >= 3 and omega.d == cfg.n and omega.num_vertices == cfg.n + 1:
        exp["pairwise_meet"] = True
    return exp


def execute(cfg: RunConfig) -> int:
    """Solve, verify and export; returns the exit code."""
    from .analysis import verify_run
    from .obstacle import ConvergenceError

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(out / "config.ini", cfg)
    t0 = time.perf_counter()
    try:
        result = solve_from_config(cfg)
    except ConvergenceError as exc:
        _write_json(out / "manifest.json", {"config": asdict(cfg), "error": str(exc),
                                            "residual_history": exc.history})
        log.error("%s", exc)
        return EXIT_SOLVER
    except RuntimeError as exc:
        _write_json(out / "manifest.json", {"config": asdict(cfg), "error": str(exc)})
        log.error("%s", exc)
        return EXIT_VERIFY
    report, _ = verify_run(result, rng=np.random.default_rng(cfg.seed), expect=_expectations(cfg, result))
    _save_state(out, result)
    export_run(result, out, ("csv", "vtk", "json"), report=report)
    manifest = {"config": asdict(cfg), "params": result.params, "iterations": result.iterations,
                "residual": result.residual, "residual_history": result.history,
                "seconds": time.perf_counter() - t0,
                "checks": {c.name: c.passed for c in report.checks}}
    _write_json(out / "manifest.json", manifest)
    print(report.summary())
    return EXIT_OK if report.passed else EXIT_VERIFY


def _write_json(path, data):
    from .analysis import _jsonable

    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, default=_jsonable)
        fh.write("\n")


def _save_state(out: Path, result) -> None:
    np.savez_compressed(out / "state.npz", u_star=result.u_star.values, psi=result.psi.values,
                        lower=result.lower, upper=result.upper, pinned=result.spec.pinned,
                        history=np.asarray(result.history))
    _write_json(out / "params.json", {k: v for k, v in result.params.items() if k != "attempts"})


def load_run(directory):
    """Rebuild a solve result from the files written by ``run``."""
    from .geometry import catalog, read_polytope, y_obstacle_affines
    from .grid import ScalarField, TensorGrid
    from .obstacle import ObstacleProblemSpec, SolveResult, YObstacle

    d = Path(directory)
    cfg = read_config(d / "config.ini")
    with open(d / "params.json") as fh:
        params = json.load(fh)
    st = np.load(d / "state.npz")
    grid = TensorGrid(params["n"], params["R"], params["m"])
    spec = ObstacleProblemSpec(grid, st["psi"], st["lower"], np.maximum(st["upper"], st["psi"]),
                               tol_r=cfg.tol_r, max_sweeps=cfg.max_sweeps, mode=cfg.parallel,
                               pinned=st["pinned"])
    res = SolveResult(ScalarField(grid, st["u_star"], st["pinned"]), ScalarField(grid, st["psi"]),
                      len(st["history"]), float(st["history"][-1]), list(st["history"]), params, spec,
                      st["lower"], st["upper"])
    from .barriers import W_profile

    res.extra["W"] = W_profile(grid.n, grid.radius())
    if params["pipeline"] == "polytope":
        res.extra["omega"] = read_polytope(cfg.vertices) if cfg.vertices else catalog(cfg.preset, cfg.n)
    else:
        segs = _segments_for(cfg)
        far = segs[:, 1] - segs[:, 0] if segs.ndim == 3 else segs
        obs = YObstacle(y_obstacle_affines(far, params["delta"], params["r0"]), params["delta"],
                        params["eps"], params["eps_tilde"], params["r0"], far)
        res.extra.update({"obstacle": obs, "segments": far})
    return res


def export_run(result, out, formats=("csv", "vtk", "json"), report=None) -> list:
    """Write the node table (CSV), the VTK volume (3D only) and the JSON report."""
    from .analysis import contact_set, fan_of
    from .grid import write_csv, write_vtk
    from .legendre import DualGrid, build_solution

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    grid = result.grid
    written = []
    cols = None
    if "csv" in formats or "vtk" in formats:
        u = build_solution(result, DualGrid(grid), refine=True)
        try:
            contact = contact_set(result).mask
        except ValueError:
            contact = result.gap() <= result.contact_tolerance()
        levels, _ = fan_of(result).classify(grid.points())
        cols = {"u_star": result.u_star.values, "u": u.values, "psi": result.psi.values,
                "contact": contact.astype(float), "stratum": np.asarray(levels, dtype=float)}
    if "csv" in formats:
        write_csv(out / "field.csv", grid, cols)
        written.append(out / "field.csv")
    if "vtk" in formats and grid.n == 3:
        write_vtk(out / "field.vtk", grid, cols)
        written.append(out / "field.vtk")
    if "json" in formats:
        if report is None:
            from .analysis import verify_run

            report, _ = verify_run(result)
        report.to_json(out / "report.json")
        written.append(out / "report.json")
    return written


# ---------------------------------------------------------------------------
# self-checks


BARRIERS = {"w31": (3, 1), "w41": (4, 1), "W2": (2, None), "W3": (3, None), "W4": (4, None)}


def barrier_check(names, samples: int, seed: int, out=None, tol: float = 0.02) -> int:
    from .barriers import BarrierParams, barrier_samples, check_barrier_determinant

    rng = np.random.default_rng(seed)
    rows = []
    worst_all = 0.0
    for name in names:
        n, k = BARRIERS[name]
        params = None if k is None else BarrierParams(n, k)
        pts = barrier_samples(params, n, samples, rng)
        worst, rr = check_barrier_determinant(params, n, pts, return_rows=True)
        worst_all = max(worst_all, worst)
        print(f"{name}: max relative error {worst:.3e} over {samples} samples")
        rows += [(name, " ".join(f"{c:.12g}" for c in p), e, f, r) for p, e, f, r in rr]
    if out:
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["barrier", "point", "analytic_det", "fd_det", "rel_err"])
            w.writerows(rows)
    return EXIT_OK if worst_all <= tol else EXIT_VERIFY


def legendre_test(n: int, m: int, samples: int, seed: int) -> int:
    from .grid import ScalarField, TensorGrid
    from .legendre import DualGrid, legendre_brute, legendre_nd

    rng = np.random.default_rng(seed)
    grid = TensorGrid(n, 1.0, m)
    X = grid.points()
    A = rng.standard_normal((n, n))
    vals = 0.5 * np.einsum("ij,jk,ik->i", X, A @ A.T + np.eye(n), X) + 0.3 * np.abs(X).sum(axis=1)
    f = ScalarField(grid, vals.reshape(grid.shape))
    dual = DualGrid.covering(f)
    fast = legendre_nd(f, dual)
    brute = legendre_brute(f, dual)
    err = float(np.max(np.abs(fast.values - brute.values)))
    scale = float(np.max(np.abs(brute.values)))
    # Fenchel-Young on random node pairs
    i = rng.integers(0, grid.size, samples)
    j = rng.integers(0, dual.grid.size, samples)
    fy = f.values.ravel()[i] + fast.values.ravel()[j] - np.einsum("ij,ij->i", X[i], dual.grid.points()[j])
    ok = err <= 1e-12 * max(scale, 1.0) and fy.min() >= -1e-12 * max(scale, 1.0)
    print(f"brute-force agreement {err:.3e}; Fenchel-Young min {fy.min():.3e}")
    return EXIT_OK if ok else EXIT_VERIFY


# ---------------------------------------------------------------------------
# argument handling


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ma-forge", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="solve, verify and export one configuration")
    r.add_argument("--config", help="INI file with a [run] section")
    r.add_argument("--mode", choices=MODES)
    r.add_argument("--n", type=int)
    r.add_argument("--preset")
    r.add_argument("--vertices", help="polytope file (n d V E header, then vertices)")
    r.add_argument("--segments", help="segment file for y-graph mode")
    r.add_argument("--R", type=float)
    r.add_argument("--m", type=int)
    r.add_argument("--eps", type=float)
    r.add_argument("--eps-tilde", dest="eps_tilde", type=float)
    r.add_argument("--r0", type=float)
    r.add_argument("--out")
    r.add_argument("--parallel", choices=PARALLEL)
    r.add_argument("--tol-r", dest="tol_r", type=float)
    r.add_argument("--max-sweeps", dest="max_sweeps", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--write-config", help="write the merged configuration and exit")

    b = sub.add_parser("barrier-check", help="finite-difference check of the barrier identities")
    b.add_argument("--barrier", action="append", choices=sorted(BARRIERS))
    b.add_argument("--samples", type=int, default=200)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", help="CSV file for the per-sample rows")

    t = sub.add_parser("legendre-test", help="compare the fast conjugate with brute force")
    t.add_argument("--n", type=int, default=3)
    t.add_argument("--m", type=int, default=33)
    t.add_argument("--samples", type=int, default=10000)
    t.add_argument("--seed", type=int, default=0)

    e = sub.add_parser("export", help="re-export the artifacts of a finished run")
    e.add_argument("run_dir")
    e.add_argument("--formats", default="csv,vtk,json")
    e.add_argument("--out")
    return p


def _merged_config(args) -> RunConfig:
    cfg = read_config(args.config) if args.config else RunConfig()
    for f in fields(RunConfig):
        val = getattr(args, f.name, None)
        if val is not None:
            setattr(cfg, f.name, val)
    if args.mode == "y-graph" and args.preset is None and not args.config:
        cfg.preset = None
    return cfg.validate()


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _threads()
        if args.command == "run":
            cfg = _merged_config(args)
            if args.write_config:
                write_config(args.write_config, cfg)
                return EXIT_OK
            if cfg.mode == "barrier-check":
                Path(cfg.out).mkdir(parents=True, exist_ok=True)
                return barrier_check(sorted(BARRIERS), 200, cfg.seed, Path(cfg.out) / "barriers.csv")
            if cfg.mode == "legendre-test":
                return legendre_test(cfg.n, cfg.m or 33, 10000, cfg.seed)
            return execute(cfg)
        if args.command == "barrier-check":
            return barrier_check(args.barrier or sorted(BARRIERS), args.samples, args.seed, args.out)
        if args.command == "legendre-test":
            return legendre_test(args.n, args.m, args.samples, args.seed)
        if args.command == "export":
            res = load_run(args.run_dir)
            formats = tuple(s.strip() for s in args.formats.split(",") if s.strip())
            for path in export_run(res, args.out or args.run_dir, formats):
                print(path)
            return EXIT_OK
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
