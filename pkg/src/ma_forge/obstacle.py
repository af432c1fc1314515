"""Obstacle problem for the wide-stencil Monge-Ampere scheme.

The discrete problem: find ``u >= psi`` with ``ma_h(u) <= 1`` at every
interior node and ``ma_h(u) = 1`` wherever ``u > psi``, with ``u`` pinned
to the boundary data on a border layer as wide as the stencil reach.
It is solved by projected Gauss-Seidel sweeps
``u <- max(psi, min(u, local_solve(u)))`` started from a supersolution.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .barriers import W_profile
from .geometry import AffineFunction, Polytope, support_values, y_obstacle_affines
from .grid import ScalarField, TensorGrid
from .ma_operator import MAConfig, Stencil, ma_h_field

__all__ = [
    "ObstacleProblemSpec",
    "SolveResult",
    "ConvergenceError",
    "local_solve",
    "solve_obstacle",
    "polytope_pipeline",
    "y_pipeline",
    "default_m",
    "select_delta",
    "YObstacle",
    "lattice_r0",
]

log = logging.getLogger(__name__)

DEFAULT_M = {1: 257, 2: 129, 3: 65, 4: 33}


def default_m(n: int) -> int:
    return DEFAULT_M[n]


class ConvergenceError(RuntimeError):
    """Sweeps did not reach the update tolerance; carries the residual history."""

    def __init__(self, msg, history):
        super().__init__(msg)
        self.history = history


@dataclass
class ObstacleProblemSpec:
    """Discrete obstacle problem on a box with Dirichlet data on a border layer.

    ``boundary`` is a full-grid array whose values on the pinned layer are
    the boundary data (other entries are ignored).  ``init`` must lie
    above ``psi``; it should be a discrete supersolution for the sweep
    sequence to be monotone.
    """

    grid: TensorGrid
    psi: np.ndarray
    boundary: np.ndarray
    init: np.ndarray
    tol_r: float = 1e-7
    max_sweeps: int = 20000
    mode: str = "gauss-seidel"
    cfg: MAConfig = field(default_factory=MAConfig)
    pinned: np.ndarray | None = None

    def __post_init__(self):
        shape = self.grid.shape
        self.psi = np.asarray(self.psi, dtype=float).reshape(shape)
        self.boundary = np.asarray(self.boundary, dtype=float).reshape(shape)
        self.init = np.asarray(self.init, dtype=float).reshape(shape)
        if self.mode not in ("gauss-seidel", "jacobi"):
            raise ValueError(f"unknown sweep mode {self.mode!r}")
        if self.pinned is None:
            reach = Stencil.for_grid(self.grid, self.cfg).reach
            self.pinned = self.grid.border_mask(reach)
        if np.any(self.boundary[self.pinned] < self.psi[self.pinned]):
            raise ValueError("boundary data below the obstacle")


@dataclass
class SolveResult:
    u_star: ScalarField
    psi: ScalarField
    iterations: int
    residual: float
    history: list
    params: dict
    spec: ObstacleProblemSpec
    lower: np.ndarray | None = None  # boundary-data function on the whole grid
    upper: np.ndarray | None = None  # supersolution the sweeps started from
    extra: dict = field(default_factory=dict)

    @property
    def grid(self) -> TensorGrid:
        return self.u_star.grid

    def gap(self) -> np.ndarray:
        return self.u_star.values - self.psi.values

    def contact_tolerance(self) -> float:
        return max(10.0 * self.spec.tol_r, self.grid.h**2)

    def fixed_point_residual(self) -> float:
        """``max |u - max(psi, local_solve(u))|`` over free nodes (update units)."""
        st = Stencil.for_grid(self.grid, self.spec.cfg)
        nodes = np.flatnonzero(~self.spec.pinned.ravel())
        u = np.ascontiguousarray(self.u_star.values.ravel())
        c = _kernels.local_solve_nodes(u, nodes, st.offs, st.Ks, st.Ks ** (1.0 / self.grid.n))
        target = np.maximum(self.psi.values.ravel()[nodes], c)
        return float(np.max(np.abs(u[nodes] - target))) if nodes.size else 0.0

    def operator_range(self):
        """Min/max of ``ma_h`` over detached free nodes and max over all free nodes."""
        M = ma_h_field(self.u_star, self.spec.cfg)
        free = ~self.spec.pinned
        detached = free & (self.gap() > self.contact_tolerance())
        return float(np.min(M[detached])), float(np.max(M[detached])), float(np.max(M[free]))


def _colored(grid: TensorGrid, nodes: np.ndarray):
    """Nodes grouped by coordinate parity.

    Every frame direction has an odd entry, so a stencil never joins two
    nodes of the same colour.
    """
    idx = np.array(np.unravel_index(nodes, grid.shape))
    color = (2 ** np.arange(grid.n)) @ (idx % 2)
    order = np.argsort(color, kind="stable")
    ptr = np.searchsorted(color[order], np.arange(2**grid.n + 1))
    return nodes[order], ptr


def local_solve(f: ScalarField, node, cfg: MAConfig | None = None) -> float:
    """Centre value making the frame-minimum operator equal to one at ``node``."""
    cfg = cfg or MAConfig()
    st = Stencil.for_grid(f.grid, cfg)
    node = tuple(int(i) for i in node)
    if any(i < st.reach or i >= f.grid.m - st.reach for i in node):
        raise IndexError(f"stencil leaves the grid at node {node}")
    flat = int(np.ravel_multi_index(node, f.grid.shape))
    c, _ = _kernels.local_solve(
        np.ascontiguousarray(f.values.ravel()), flat, st.offs, st.Ks, st.Ks ** (1.0 / f.grid.n), 0
    )
    if not np.isfinite(c):
        raise ArithmeticError("no admissible root for the local equation")
    return float(c)


def solve_obstacle(spec: ObstacleProblemSpec, monotone: bool = True, check_monotone: bool = False) -> SolveResult:
    """Projected sweeps until the largest update falls below ``spec.tol_r``.

    With ``monotone`` each update is ``min(u, local_solve(u))`` projected
    onto ``u >= psi``; the iterates then never increase.  Should the
    limit fail the operator check (possible when ``init`` is not a
    discrete supersolution), the sweeps continue without the ``min``.

    Raises
    ------
    ConvergenceError
        If ``spec.max_sweeps`` sweeps do not reach the tolerance.
    """
    grid = spec.grid
    st = Stencil.for_grid(grid, spec.cfg)
    if np.any(spec.init < spec.psi - 1e-12):
        raise ValueError("initial field lies below the obstacle")
    u = np.ascontiguousarray(spec.init.ravel().copy())
    pinned = spec.pinned.ravel()
    u[pinned] = spec.boundary.ravel()[pinned]
    psi = np.ascontiguousarray(spec.psi.ravel())
    nodes = np.flatnonzero(~pinned)
    Krs = st.Ks ** (1.0 / grid.n)
    if spec.mode == "gauss-seidel":
        order, ptr = _colored(grid, nodes)
    else:
        order, ptr = nodes, None
    hints = np.zeros(order.size, dtype=np.int64)

    def sweep(mono):
        if spec.mode == "gauss-seidel":
            return _kernels.sweep_gs(u, psi, order, ptr, st.offs, st.Ks, Krs, hints, mono)
        return _kernels.sweep_jacobi(u, psi, order, st.offs, st.Ks, Krs, hints, mono)

    history = []
    t0 = time.perf_counter()
    mono = monotone
    it = 0
    while True:
        prev = u.copy() if check_monotone else None
        d = sweep(mono)
        it += 1
        history.append(d)
        if check_monotone and mono and np.any(u > prev):
            raise AssertionError(f"sweep {it} increased the iterate")
        if d < spec.tol_r:
            if mono and monotone:
                res = SolveResult(ScalarField(grid, u.reshape(grid.shape)), ScalarField(grid, spec.psi),
                                  it, d, history, {}, spec)
                if res.fixed_point_residual() <= 10 * spec.tol_r:
                    break
                log.warning("monotone sweeps stalled above a subsolution; continuing without min")
                mono = False
                continue
            break
        if it >= spec.max_sweeps:
            raise ConvergenceError(f"no convergence in {it} sweeps (last update {d:.3e})", history)
    log.info("obstacle solve: %d sweeps, last update %.3e, %.1fs", it, d, time.perf_counter() - t0)
    u_field = ScalarField(grid, u.reshape(grid.shape), spec.pinned.copy())
    return SolveResult(u_field, ScalarField(grid, spec.psi.copy(), spec.pinned.copy()), it, d, history,
                       {"mode": spec.mode, "monotone": monotone, "seconds": time.perf_counter() - t0}, spec)


def select_delta(W: np.ndarray, eps: float, Pstar: np.ndarray, safety: float = 0.9) -> float:
    """``safety * min (W + eps) / P*`` over nodes with ``P* > 0``."""
    pos = Pstar > 0
    if not np.any(pos):
        return 1.0
    return float(safety * np.min((W[pos] + eps) / Pstar[pos]))


def polytope_pipeline(omega: Polytope, n: int | None = None, R: float = 4.0, m: int | None = None,
                      eps: float = 1.0, mode: str = "gauss-seidel", tol_r: float = 1e-7,
                      max_sweeps: int = 20000, cfg: MAConfig | None = None) -> SolveResult:
    """Global obstacle problem with obstacle ``delta * P*`` on ``[-R, R]^n``.

    Boundary data ``W_n - 1``, initial supersolution ``W_n + eps`` and
    ``delta = 0.9 * min (W_n + eps) / P*`` over the grid.

    Raises
    ------
    ValueError
        If the selected ``delta`` is not positive.
    """
    n = omega.n if n is None else n
    if n != omega.n:
        raise ValueError("polytope lives in a different dimension")
    m = default_m(n) if m is None else m
    grid = TensorGrid(n, R, m)
    cfg = cfg or MAConfig()
    W = W_profile(n, grid.radius())
    Pstar = support_values(omega, grid.points()).reshape(grid.shape)
    delta = select_delta(W, eps, Pstar)
    if not delta > 0:
        raise ValueError("delta <= 0: eps too small for this grid")
    psi = delta * Pstar
    spec = ObstacleProblemSpec(grid, psi, W - 1.0, np.maximum(W + eps, psi), tol_r=tol_r,
                               max_sweeps=max_sweeps, mode=mode, cfg=cfg)
    res = solve_obstacle(spec)
    res.params.update({"pipeline": "polytope", "delta": delta, "eps": eps, "eps_tilde": eps,
                       "R": R, "m": m, "n": n})
    res.lower = W - 1.0
    res.upper = W + eps
    res.extra["omega"] = omega
    res.extra["W"] = W
    return res


@dataclass
class YObstacle:
    """Pieces of ``phi = max(W - eps, 0, L_1, ..., L_M)`` sampled on a grid."""

    affines: list[AffineFunction]
    delta: float
    eps: float
    eps_tilde: float
    r0: float
    segments: np.ndarray

    def pieces(self, X: np.ndarray, W: np.ndarray) -> np.ndarray:
        """Stack of piece values: index 0 is ``W - eps``, 1 is ``0``, then the ``L_i``."""
        vals = [W - self.eps, np.zeros_like(W)]
        vals += [L(X).reshape(W.shape) for L in self.affines]
        return np.stack(vals)


def lattice_r0(segments, h: float, target: float = 0.2, lo: float = 0.1, hi: float = 0.25) -> float:
    """Cap parameter ``r0`` putting every hyperplane ``{L_i = 0}`` through grid nodes.

    The plane of segment ``g`` is ``{g.x = |g| (1 - r0)}``.  When ``g`` is
    a multiple of an integer vector ``a`` and all ``|a|`` agree, nodes lie
    on it iff ``(1 - r0) |a|`` is a multiple of ``h``.  Returns the
    admissible ``r0`` in ``[lo, hi)`` closest to ``target``, or ``target``
    when the directions are not of that form.
    """
    segs = np.asarray(segments, dtype=float)
    norms = []
    for g in segs:
        nz = np.abs(g[np.abs(g) > 1e-12])
        a = g / nz.min()
        if not np.allclose(a, np.round(a), atol=1e-9):
            return target
        norms.append(float(np.linalg.norm(np.round(a))))
    if not np.allclose(norms, norms[0]):
        return target
    step = h / norms[0]
    ks = np.arange(int((1 - hi) / step), int((1 - lo) / step) + 2)
    cand = [1.0 - k * step for k in ks if lo <= 1.0 - k * step < hi]
    if not cand:
        return target
    return float(min(cand, key=lambda r: abs(r - target)))


def _y_delta(segs, W, X, eps_tilde, r0, safety=0.9):
    norms = np.linalg.norm(segs, axis=1)
    best = np.inf
    for g, nrm in zip(segs, norms):
        lin = (X @ g - nrm * (1.0 - r0)).reshape(W.shape)
        pos = lin > 0
        if np.any(pos):
            best = min(best, float(np.min((W[pos] + eps_tilde) / lin[pos])))
    return safety * best


def _y_disjoint(obs: YObstacle, X, W) -> bool:
    Ls = np.stack([L(X).reshape(W.shape) for L in obs.affines])
    floor = np.maximum(W - obs.eps, 0.0)
    own = Ls >= floor[None]
    if np.any(own.sum(axis=0) > 1):
        return False
    caps = (Ls >= 0) & (W <= obs.eps)[None]
    return not np.any(caps.sum(axis=0) > 1)


def y_pipeline(segments, n: int = 3, R: float = 4.0, m: int | None = None, eps: float = 0.1,
               eps_tilde: float | None = None, r0: float = 0.2, mode: str = "gauss-seidel",
               tol_r: float = 1e-7, max_sweeps: int = 20000, retries: int = 4, verify=None,
               cfg: MAConfig | None = None) -> SolveResult:
    """Obstacle and boundary data ``phi = max(W_n - eps, 0, L_1..L_M)``.

    ``delta`` is ``0.9`` times the largest value keeping ``max L_i < W_n +
    eps_tilde`` on the grid, halved until the pieces ``{phi = L_i}`` are
    pairwise disjoint.  ``verify(result) -> bool`` checks the contact
    topology; on failure ``eps`` and ``eps_tilde`` are halved and the solve
    repeated, at most ``retries`` times.

    Raises
    ------
    RuntimeError
        When the retries are exhausted.
    """
    segs = np.asarray(segments, dtype=float)
    if segs.ndim == 3:
        segs = segs[:, 1, :] - segs[:, 0, :]
    if segs.shape[1] != n:
        raise ValueError("segments live in a different dimension")
    eps_tilde = eps if eps_tilde is None else eps_tilde
    m = default_m(n) if m is None else m
    grid = TensorGrid(n, R, m)
    cfg = cfg or MAConfig()
    W = W_profile(n, grid.radius())
    X = grid.points()
    attempts = []
    for attempt in range(retries + 1):
        delta = _y_delta(segs, W, X, eps_tilde, r0)
        for _ in range(30):
            obs = YObstacle(y_obstacle_affines(segs, delta, r0), delta, eps, eps_tilde, r0, segs)
            if _y_disjoint(obs, X, W):
                break
            delta *= 0.5
        else:
            raise RuntimeError("could not separate the obstacle pieces")
        phi = obs.pieces(X, W).max(axis=0)
        spec = ObstacleProblemSpec(grid, phi, phi, np.maximum(W + eps_tilde, phi), tol_r=tol_r,
                                   max_sweeps=max_sweeps, mode=mode, cfg=cfg)
        res = solve_obstacle(spec)
        res.params.update({"pipeline": "y-graph", "delta": delta, "eps": eps, "eps_tilde": eps_tilde,
                           "r0": r0, "R": R, "m": m, "n": n, "attempt": attempt})
        res.lower = phi
        res.upper = W + eps_tilde
        res.extra.update({"obstacle": obs, "W": W, "segments": segs})
        attempts.append(res.params.copy())
        if verify is None or verify(res):
            res.params["attempts"] = attempts
            return res
        log.warning("contact topology check failed (eps=%.4g); halving eps", eps)
        eps *= 0.5
        eps_tilde *= 0.5
    raise RuntimeError(f"contact topology not reached after {retries} retries")
