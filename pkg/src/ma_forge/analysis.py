"""Post-processing of obstacle-problem runs.

The contact set of a run is split by the affine pieces of the
piecewise-linear obstacle ``P* = max_i (G_i . x - b_i)``: the piece
``i`` owns the contact nodes where it attains the maximum.  For a
polytope run the pieces are the vertices of ``delta * Omega``; for a
Y-graph run they are ``0`` and the ``L_i``.  The strata of ``P*`` are the
sets of nodes with a common active set of pieces, and a stratum whose
active gradients span an affine space of dimension ``j`` has level
``n - j``.

Everything here operates on a finished :class:`SolveResult` and on
the singular solution ``u`` obtained by conjugation.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage
from scipy.optimize import curve_fit

from .geometry import Polytope, classify_field, symmetry_orbits
from .grid import ScalarField, TensorGrid
from .legendre import DualGrid, build_solution, max_forward_slope
from .ma_operator import MAConfig, Stencil, ma_h_field, ma_measure

__all__ = [
    "Check",
    "VerificationReport",
    "PieceFan",
    "ContactComponent",
    "ContactSet",
    "ContactBoundaryError",
    "fan_of",
    "contact_set",
    "dirac_coefficients",
    "singular_segments",
    "conjugate_at",
    "solution_window",
    "singular_set_report",
    "mass_accounting",
    "asymptotic_fit",
    "sublevel_volume_check",
    "tilted_cuts",
    "subgradient_dims",
    "subgradient_dim_check",
    "boundary_points",
    "y_topology",
    "verify_run",
]


class ContactBoundaryError(ValueError):
    """Contact reaches the border of the box: the domain is too small."""


# ---------------------------------------------------------------------------
# reports


@dataclass
class Check:
    name: str
    value: float
    threshold: float
    passed: bool
    detail: str = ""


@dataclass
class VerificationReport:
    """Named checks with measured value, threshold and outcome."""

    checks: list = field(default_factory=list)
    manifest: dict = field(default_factory=dict)

    def add(self, name: str, value, threshold, passed, detail: str = "") -> Check:
        if any(c.name == name for c in self.checks):
            raise ValueError(f"duplicate check {name!r}")
        c = Check(name, _num(value), _num(threshold), bool(passed), detail)
        self.checks.append(c)
        return c

    def __getitem__(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "checks": [asdict(c) for c in self.checks],
                "manifest": self.manifest}

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, default=_jsonable)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_dict(cls, data: dict) -> "VerificationReport":
        return cls([Check(**c) for c in data["checks"]], dict(data.get("manifest", {})))

    def summary(self) -> str:
        lines = []
        for c in self.checks:
            tag = "PASS" if c.passed else "FAIL"
            lines.append(f"{tag}  {c.name:<32s} value={c.value:.6g}  threshold={c.threshold:.6g}"
                         + (f"  ({c.detail})" if c.detail else ""))
        return "\n".join(lines)


def _num(x):
    x = float(x)
    return x if math.isfinite(x) else (1e308 if x > 0 else -1e308 if x < 0 else 0.0)


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    return str(o)


# ---------------------------------------------------------------------------
# piecewise-linear obstacle structure


@dataclass
class PieceFan:
    """Affine pieces ``G_i . x - b_i`` of the obstacle and their strata.

    ``faces`` are the active sets (tuples of piece indices) that carry a
    stratum; ``levels[k]`` is ``n`` minus the dimension of the affine hull
    of the active gradients.
    """

    G: np.ndarray
    b: np.ndarray
    faces: list
    levels: list
    polytope: Polytope | None = None
    declared: int = -1  # faces predicted by the construction; later ones are found on the grid

    def __post_init__(self):
        if self.declared < 0:
            self.declared = len(self.faces)

    @property
    def n(self) -> int:
        return self.G.shape[1]

    def values(self, X: np.ndarray) -> np.ndarray:
        return X @ self.G.T - self.b

    def tie_tol(self, X: np.ndarray) -> float:
        scale = (np.max(np.abs(X)) + 1.0) * (np.max(np.abs(self.G)) + 1.0) + np.max(np.abs(self.b))
        return 1e-9 * scale

    def active(self, X: np.ndarray) -> np.ndarray:
        vals = self.values(X)
        return vals >= vals.max(axis=1, keepdims=True) - self.tie_tol(X)

    def classify(self, X: np.ndarray):
        """Level and face index of every point."""
        if self.polytope is not None:
            return classify_field(self.polytope, X)
        act = self.active(X)
        lookup = {f: i for i, f in enumerate(self.faces)}
        face_id = np.empty(len(X), dtype=np.int64)
        for key in np.unique(act, axis=0):
            f = tuple(np.flatnonzero(key))
            if f not in lookup:
                lookup[f] = len(self.faces)
                self.faces.append(f)
                self.levels.append(self.n - _affine_rank(self.G[list(f)]))
            face_id[np.all(act == key, axis=1)] = lookup[f]
        return np.asarray(self.levels)[face_id], face_id

    def span(self, face: int) -> np.ndarray:
        """Orthonormal basis (rows) of the linear span of the stratum."""
        pts = self.G[list(self.faces[face])]
        D = pts[1:] - pts[0] if len(pts) > 1 else np.zeros((1, self.n))
        _, s, vt = np.linalg.svd(np.vstack([D, np.zeros((1, self.n))]))
        r = int(np.sum(s > 1e-9 * max(s.max(), 1e-300)))
        return vt[r:]

    def segments(self) -> np.ndarray:
        """Segments of the singular graph in slope space, shape ``(S, 2, n)``."""
        if self.polytope is not None:
            edges = self.polytope.edges
        else:
            edges = [f for f, lv in zip(self.faces, self.levels) if len(f) == 2 and lv == self.n - 1]
        if not edges:
            return np.empty((0, 2, self.n))
        return np.stack([[self.G[i], self.G[j]] for i, j in edges])


def _affine_rank(pts: np.ndarray) -> int:
    if len(pts) < 2:
        return 0
    return int(np.linalg.matrix_rank(pts[1:] - pts[0], tol=1e-9 * max(np.abs(pts).max(), 1.0)))


def fan_of(result) -> PieceFan:
    """Obstacle pieces of a polytope or Y-graph run."""
    p = result.params
    if p.get("pipeline") == "y-graph":
        obs = result.extra["obstacle"]
        n = obs.segments.shape[1]
        G = np.vstack([np.zeros(n)] + [L.slope for L in obs.affines])
        b = np.array([0.0] + [L.offset for L in obs.affines])
        M = len(obs.affines)
        faces = [(0,)] + [(i,) for i in range(1, M + 1)] + [(0, i) for i in range(1, M + 1)]
        levels = [n] * (M + 1) + [n - 1] * M
        return PieceFan(G, b, faces, levels)
    omega = result.extra["omega"]
    delta = p["delta"]
    levels = [omega.n - d for d in omega.face_dims]
    return PieceFan(delta * omega.vertices, np.zeros(omega.num_vertices), list(omega.faces), levels, omega)


# ---------------------------------------------------------------------------
# contact set


@dataclass
class ContactComponent:
    owner: int  # obstacle piece (vertex index for polytope runs)
    nodes: np.ndarray  # flat node indices
    levels: tuple
    faces: tuple
    interior_faces: tuple  # strata holding a 2h-ball of this component
    volume: float


@dataclass
class ContactSet:
    """Contact nodes of a run, split into connected pieces per owner.

    A node belongs to every piece that is active there, so components of
    neighbouring pieces share the nodes on their common stratum.
    """

    grid: TensorGrid
    mask: np.ndarray
    tol_c: float
    fan: PieceFan
    owners: np.ndarray  # (pieces, *grid.shape) boolean
    levels: np.ndarray
    face_id: np.ndarray
    components: list

    @property
    def count(self) -> int:
        return len(self.components)

    @property
    def volume(self) -> float:
        return float(np.count_nonzero(self.mask) * self.grid.cell_volume)

    def shared(self, i: int, j: int) -> np.ndarray:
        return np.intersect1d(self.components[i].nodes, self.components[j].nodes)

    def meets(self, i: int, j: int) -> bool:
        return self.shared(i, j).size > 0

    def meeting_faces(self, i: int, j: int) -> set:
        return set(np.unique(self.face_id.ravel()[self.shared(i, j)]).tolist())

    def low_strata_distance(self) -> float:
        """Lattice-path distance (in steps) from the contact to strata of level ``<= n/2``.

        Infinite when no node of the grid lies on such a stratum.
        """
        n = self.grid.n
        low = self.levels <= n / 2
        if not np.any(low):
            return math.inf
        if not np.any(self.mask):
            return math.inf
        dist = ndimage.distance_transform_cdt(~low, metric="taxicab")
        return float(dist[self.mask].min())

    def low_strata_count(self) -> int:
        return int(np.count_nonzero(self.mask & (self.levels <= self.grid.n / 2)))


def _ball_footprint(n: int, span: np.ndarray, radius: int = 2) -> np.ndarray:
    """Lattice offsets within ``radius`` steps lying in the span of a stratum."""
    rng = np.arange(-radius, radius + 1)
    offs = np.array(np.meshgrid(*([rng] * n), indexing="ij")).reshape(n, -1).T
    keep = np.linalg.norm(offs, axis=1) <= radius + 1e-12
    if len(span) < n:
        resid = offs - (offs @ span.T) @ span
        keep &= np.linalg.norm(resid, axis=1) < 1e-9
    fp = np.zeros((2 * radius + 1,) * n, dtype=bool)
    fp[tuple((offs[keep] + radius).T)] = True
    return fp


def contact_set(result, omega: Polytope | None = None, tol_c: float | None = None,
                fan: PieceFan | None = None) -> ContactSet:
    """Contact nodes, their strata and per-owner connected components.

    Components use face adjacency.  For each stratum a component touches,
    it is checked whether the component holds a contact ball of radius
    ``2h`` within that stratum (lattice offsets in the stratum's span).
    For Y-graph runs only contact with the pieces of ``max(0, L_i)`` is
    counted; the outer piece ``W - eps`` is the boundary data itself.

    Raises
    ------
    ContactBoundaryError
        If a counted contact node lies within ``2h`` of the box boundary.
    """
    grid = result.grid
    n = grid.n
    if fan is None:
        fan = fan_of(result)
        if omega is not None and fan.polytope is not None and omega is not fan.polytope:
            fan = PieceFan(result.params["delta"] * omega.vertices, np.zeros(omega.num_vertices),
                           list(omega.faces), [omega.n - d for d in omega.face_dims], omega)
    tol_c = result.contact_tolerance() if tol_c is None else tol_c
    X = grid.points()
    mask = result.gap() <= tol_c
    vals = fan.values(X)
    pmax = vals.max(axis=1).reshape(grid.shape)
    if result.params.get("pipeline") == "y-graph":
        obs = result.extra["obstacle"]
        mask &= pmax >= result.extra["W"] - obs.eps
    if np.any(mask & grid.border_mask(3)):
        raise ContactBoundaryError("contact within 2h of the box boundary")
    mask &= ~result.spec.pinned
    levels, face_id = fan.classify(X)
    levels = levels.reshape(grid.shape)
    face_id = face_id.reshape(grid.shape)
    owners = fan.active(X).T.reshape((len(fan.G),) + grid.shape) & mask[None]
    structure = ndimage.generate_binary_structure(n, 1)
    footprints = {}
    comps = []
    for q in range(len(fan.G)):
        lab, nc = ndimage.label(owners[q], structure=structure)
        for c in range(1, nc + 1):
            cm = lab == c
            fids = np.unique(face_id[cm])
            interior = []
            for f in fids:
                if f not in footprints:
                    footprints[f] = _ball_footprint(n, fan.span(int(f)))
                sub = cm & (face_id == f)
                if ndimage.binary_erosion(sub, structure=footprints[f], border_value=0).any():
                    interior.append(int(f))
            comps.append(ContactComponent(
                owner=q, nodes=np.flatnonzero(cm.ravel()),
                levels=tuple(sorted(set(np.unique(levels[cm]).tolist()))),
                faces=tuple(int(f) for f in fids), interior_faces=tuple(interior),
                volume=float(np.count_nonzero(cm) * grid.cell_volume)))
    return ContactSet(grid, mask, tol_c, fan, owners, levels, face_id, comps)


def dirac_coefficients(K: ContactSet, omega: Polytope | None = None) -> dict:
    """Mass ``a_q`` per obstacle piece: contact volume in the piece's normal cone.

    A node shared by several pieces is split evenly among them.
    """
    share = K.owners.sum(axis=0)
    w = np.where(share > 0, 1.0 / np.maximum(share, 1), 0.0)
    out = {}
    for q in range(K.owners.shape[0]):
        out[q] = float(np.sum(w[K.owners[q]]) * K.grid.cell_volume)
    return out


# ---------------------------------------------------------------------------
# the singular solution u


def singular_segments(result) -> np.ndarray:
    return fan_of(result).segments()


def conjugate_at(u_star: ScalarField, P, chunk: int = 256) -> np.ndarray:
    """Exact discrete conjugate ``max_x (p.x - u*(x))`` at arbitrary slopes."""
    X = u_star.grid.points()
    v = u_star.values.ravel()
    P = np.atleast_2d(np.asarray(P, dtype=float))
    out = np.empty(len(P))
    for s in range(0, len(P), chunk):
        out[s:s + chunk] = np.max(P[s:s + chunk] @ X.T - v[None, :], axis=1)
    return out


def solution_window(result, margin: float = 1.0, h: float | None = None):
    """Refined conjugate ``u`` on a slope box around the obstacle gradients.

    Returns ``(u, argmax)``; the box has half-width ``max|G_i| + margin``
    plus two cells and spacing ``h`` (the primal spacing by default).
    """
    fan = fan_of(result)
    grid = result.grid
    h = grid.h if h is None else h
    a = float(np.max(np.linalg.norm(fan.G, axis=1))) + margin + 2 * h
    m = 2 * int(math.ceil(a / h)) + 1
    dual = DualGrid.box(grid.n, (m - 1) * h / 2, m)
    return build_solution(result, dual, return_argmax=True, refine=True)


def _segment_distance(P: np.ndarray, segs: np.ndarray, points: np.ndarray) -> np.ndarray:
    dist = np.full(len(P), np.inf)
    for A, B in segs:
        AB = B - A
        t = np.clip((P - A) @ AB / max(AB @ AB, 1e-300), 0.0, 1.0)
        dist = np.minimum(dist, np.linalg.norm(P - (A + t[:, None] * AB), axis=1))
    for q in points:
        dist = np.minimum(dist, np.linalg.norm(P - q, axis=1))
    return dist


def singular_set_report(result, window=None, samples: int = 17, cfg: MAConfig | None = None) -> dict:
    """Zero level or affine residual on the singular graph, Laplacian profile, operator away from it.

    Keys: ``mode``; ``zero_level`` (max ``|u|`` on the graph, polytope
    runs) or ``affine_residual`` (max over segments of the deviation from
    the best affine fit, Y runs); ``lip`` and ``h``; ``profile`` (list of
    ``(d, max dist*lap_h u)`` over shells ``dist in [d, 2d]``) with
    ``profile_ratio``; ``ma_max_dev`` and ``ma_count`` for ``ma_h(u)``
    outside the ``4h``-neighbourhood of the graph.
    """
    fan = fan_of(result)
    u_star = result.u_star
    segs = fan.segments()
    y_mode = result.params.get("pipeline") == "y-graph"
    pts_nodes = fan.G if len(segs) == 0 else np.empty((0, fan.n))
    t = np.linspace(0.0, 1.0, samples)
    rep = {"mode": "y-graph" if y_mode else "polytope", "h": result.grid.h}
    if y_mode:
        worst = 0.0
        for A, B in segs:
            P = A + t[:, None] * (B - A)
            vals = conjugate_at(u_star, P)
            coef = np.polyfit(t, vals, 1)
            worst = max(worst, float(np.max(np.abs(np.polyval(coef, t) - vals))))
        rep["affine_residual"] = worst
    else:
        P = [pts_nodes] + [A + t[:, None] * (B - A) for A, B in segs]
        rep["zero_level"] = float(np.max(np.abs(conjugate_at(u_star, np.vstack(P)))))
    u, arg = window if window is not None else solution_window(result)
    dg = u.grid
    hp = dg.h
    rep["lip"] = max_forward_slope(u)
    dist = _segment_distance(dg.points(), segs, pts_nodes).reshape(dg.shape)
    # slopes attained at primal nodes next to the pinned layer are not trusted
    reach = Stencil.for_grid(result.grid, cfg).reach
    trusted = ~result.grid.border_mask(reach + 1).ravel()[arg.ravel()].reshape(dg.shape)
    lap = np.full(dg.shape, np.nan)
    core = tuple(slice(1, -1) for _ in range(dg.n))
    acc = np.zeros(tuple(s - 2 for s in dg.shape))
    for ax in range(dg.n):
        sl_p = list(core)
        sl_m = list(core)
        sl_p[ax] = slice(2, None)
        sl_m[ax] = slice(0, -2)
        acc += u.values[tuple(sl_p)] - 2 * u.values[core] + u.values[tuple(sl_m)]
    lap[core] = acc / hp**2
    extent = min((np.linalg.norm(B - A) for A, B in segs), default=2.0)
    profile = []
    d = 2 * hp
    while d <= max(extent / 2, 4 * hp):
        sel = trusted & (dist >= d) & (dist < 2 * d) & np.isfinite(lap)
        if np.any(sel):
            profile.append((d, float(np.max(dist[sel] * lap[sel]))))
        d *= 2
    rep["profile"] = profile
    vals = [v for _, v in profile if v > 0]
    rep["profile_ratio"] = float(max(vals) / min(vals)) if vals else math.inf
    M = ma_h_field(u, cfg)
    away = trusted & np.isfinite(M) & (dist >= 4 * hp)
    dev = np.abs(M[away] - 1.0)
    rep["ma_max_dev"] = float(dev.max()) if dev.size else math.inf
    rep["ma_q95_dev"] = float(np.quantile(dev, 0.95)) if dev.size else math.inf
    rep["ma_count"] = int(dev.size)
    return rep


def mass_accounting(result, K: ContactSet, window=None, margin: float = 0.5) -> dict:
    """Compare ``|du(B)|`` for a slope ball ``B`` around the graph with ``|B| + sum a_q``.

    Returns the measured and predicted masses and the error relative to
    ``sum a_q``.
    """
    fan = K.fan
    u, _ = window if window is not None else solution_window(result)
    n = u.grid.n
    rad = float(np.max(np.linalg.norm(fan.G, axis=1))) + margin
    if rad > u.grid.R - 2 * u.grid.h:
        raise ValueError("slope window too small for the accounting ball")
    region = np.linalg.norm(u.grid.points(), axis=1).reshape(u.grid.shape) <= rad
    measured = ma_measure(u, region, dual=DualGrid(result.grid))
    # the ball's own volume, counted on the slope lattice to match the region
    ball = float(np.count_nonzero(region) * u.grid.cell_volume)
    total = sum(dirac_coefficients(K).values())
    return {"measured": measured, "ball": ball, "dirac_total": total,
            "ball_exact": math.pi ** (n / 2) / math.gamma(n / 2 + 1) * rad**n,
            "rel_error": abs(measured - ball - total) / max(total, 1e-300)}


def y_topology(K: ContactSet) -> tuple[bool, str]:
    """One central and one external component per segment, meeting as a star.

    The central piece (owner 0) must meet every external piece across
    their common hyperplane; external pieces must be pairwise disjoint
    and not even face-adjacent.
    """
    n = K.grid.n
    by_owner = {}
    for i, c in enumerate(K.components):
        by_owner.setdefault(c.owner, []).append(i)
    M = len(K.fan.G) - 1
    counts = [len(by_owner.get(q, [])) for q in range(M + 1)]
    if counts != [1] * (M + 1):
        return False, f"components per piece {counts}"
    central = by_owner[0][0]
    for q in range(1, M + 1):
        j = by_owner[q][0]
        if not any(K.fan.levels[f] == n - 1 for f in K.meeting_faces(central, j)):
            return False, f"central set does not meet external set {q}"
    st = ndimage.generate_binary_structure(n, 1)
    for q in range(1, M + 1):
        for r in range(q + 1, M + 1):
            a = K.owners[q]
            if np.any(ndimage.binary_dilation(a, structure=st) & K.owners[r]):
                return False, f"external sets {q} and {r} touch"
    return True, f"1 central + {M} external"


# ---------------------------------------------------------------------------
# asymptotics and propagation checks


def asymptotic_fit(u: ScalarField, lo: float = 0.6, hi: float = 0.9, bins: int = 24,
                   floor: float = 1e-10, exclude=None) -> dict:
    """Fit ``u - |x|^2/2 = kappa + A |x|^s`` on the annulus ``[lo R, hi R]``.

    The fit is a joint nonlinear least-squares fit of ``(kappa, A, s)`` to
    shell averages.  When the tail is below ``floor`` the exponent is not
    determined and ``indeterminate`` is set.

    Raises
    ------
    ValueError
        If ``exclude`` (a boolean mask, e.g. contact or its preimages)
        meets the annulus.
    """
    g = u.grid
    if g.n < 3:
        raise ValueError("the tail exponent is only defined for n >= 3")
    r = g.radius().ravel()
    sel = (r >= lo * g.R) & (r <= hi * g.R)
    if exclude is not None and np.any(np.asarray(exclude).ravel() & sel):
        raise ValueError("annulus contaminated")
    x = r[sel]
    y = u.values.ravel()[sel] - 0.5 * x**2
    edges = np.linspace(lo * g.R, hi * g.R, bins + 1)
    b = np.clip(np.digitize(x, edges) - 1, 0, bins - 1)
    cnt = np.bincount(b, minlength=bins)
    ok = cnt > 0
    xb = (np.bincount(b, x, minlength=bins)[ok] / cnt[ok])
    yb = (np.bincount(b, y, minlength=bins)[ok] / cnt[ok])
    kappa0 = float(np.median(yb))
    if np.ptp(yb) <= floor:
        return {"kappa": kappa0, "slope": math.nan, "amplitude": 0.0, "indeterminate": True, "residual": 0.0}
    p0 = (float(yb[-1]), float((yb[0] - yb[-1]) * xb[0]), -1.0)
    try:
        p, _ = curve_fit(lambda t, k, A, s: k + A * t**s, xb, yb, p0=p0, maxfev=20000)
    except RuntimeError:
        return {"kappa": kappa0, "slope": math.nan, "amplitude": math.nan, "indeterminate": True,
                "residual": math.nan}
    res = float(np.max(np.abs(yb - (p[0] + p[1] * xb ** p[2]))))
    return {"kappa": float(p[0]), "amplitude": float(p[1]), "slope": float(p[2]),
            "indeterminate": False, "residual": res}


def sublevel_volume_check(f: ScalarField, cuts, c: float | None = None, relax: float = 10.0,
                          return_ratios: bool = False):
    """Volume lower bound ``|{f < l}| >= c |min (f - l)|^{n/2}`` on each cut.

    ``c`` defaults to the paraboloid value ``omega_n 2^{n/2}`` (exact for
    ``|x|^2/2``), and the bound is relaxed by ``relax``.

    Raises
    ------
    ValueError
        If a sublevel set touches the grid boundary.
    """
    g = f.grid
    n = g.n
    if c is None:
        c = math.pi ** (n / 2) / math.gamma(n / 2 + 1) * 2 ** (n / 2)
    X = g.points()
    border = g.border_mask(1)
    ratios = []
    for cut in cuts:
        diff = f.values - np.asarray(cut(X)).reshape(g.shape)
        below = diff < 0
        if np.any(below & border):
            raise ValueError("sublevel set touches the boundary")
        depth = -float(diff.min())
        if depth <= 0:
            continue
        vol = np.count_nonzero(below) * g.cell_volume
        ratios.append(vol / depth ** (n / 2))
    ok = all(r >= c / relax for r in ratios)
    return (ok, ratios) if return_ratios else ok


@dataclass(frozen=True)
class _Cut:
    slope: np.ndarray
    offset: float

    def __call__(self, X):
        return np.asarray(X) @ self.slope + self.offset


def boundary_points(K: ContactSet) -> np.ndarray:
    """Flat indices of contact nodes with a non-contact face neighbour."""
    st = ndimage.generate_binary_structure(K.grid.n, 1)
    edge = K.mask & ~ndimage.binary_erosion(K.mask, structure=st, border_value=0)
    return np.flatnonzero(edge.ravel())


def tilted_cuts(result, K: ContactSet, count: int, rng, depth=(0.02, 0.2), tilt: float = 0.05):
    """Affine cuts touching ``u*`` from above near random contact-boundary nodes.

    Each cut is the tangent plane at a boundary node of the contact set
    (central-difference slope plus a random tilt) lifted by a random
    depth; cuts whose sublevel set reaches the border are redrawn.
    """
    g = result.grid
    v = result.u_star.values
    nodes = boundary_points(K)
    if nodes.size == 0:
        return []
    border = g.border_mask(1)
    X = g.points()
    cuts = []
    tries = 0
    while len(cuts) < count and tries < 50 * count:
        tries += 1
        j = int(rng.choice(nodes))
        idx = np.array(np.unravel_index(j, g.shape))
        grad = np.empty(g.n)
        for a in range(g.n):
            e = np.zeros(g.n, dtype=int)
            e[a] = 1
            grad[a] = (v[tuple(idx + e)] - v[tuple(idx - e)]) / (2 * g.h)
        slope = grad + tilt * rng.standard_normal(g.n)
        x0 = g.coordinate(idx)
        cut = _Cut(slope, float(v[tuple(idx)] - slope @ x0 + rng.uniform(*depth)))
        below = (v - cut(X).reshape(g.shape)) < 0
        if not np.any(below & border):
            cuts.append(cut)
    return cuts


_SUB_DIRS = {}


def _lattice_dirs(n: int) -> np.ndarray:
    """Primitive directions with entries in {-1, 0, 1}, one per line."""
    if n not in _SUB_DIRS:
        pts = np.array(np.meshgrid(*([[-1, 0, 1]] * n), indexing="ij")).reshape(n, -1).T
        keep = [p for p in pts if np.any(p) and tuple(p) > tuple(-p)]
        _SUB_DIRS[n] = np.array(keep)
    return _SUB_DIRS[n]


def subgradient_dims(u_star: ScalarField, points, tau_slope: float, reach: int = 4) -> np.ndarray:
    """Estimated dimension of the subgradient at each node.

    Along every lattice direction ``e`` the jump ``J_e`` between the
    forward and backward difference quotients is the width of the
    subgradient in direction ``e`` plus a curvature term ``h|e| D_ee u``.
    The curvature is read off second differences ``reach`` steps away on
    both sides and subtracted.  For a convex set with second-moment form
    ``S`` the squared widths behave like ``e.S.e``; ``S`` is fitted by
    least squares and the dimension is the number of its eigenvalues
    above ``tau_slope**2``.
    """
    g = u_star.grid
    v = u_star.values
    E = _lattice_dirs(g.n)
    lens = np.linalg.norm(E, axis=1)
    iu = np.triu_indices(g.n)
    # design: e.S.e for symmetric S parametrised by its upper triangle
    A = np.array([[(1.0 if i == j else 2.0) * e[i] * e[j] for i, j in zip(*iu)] for e in E / lens[:, None]])

    def at(idx):
        return v[tuple(idx)]

    out = []
    for node in points:
        idx = np.array(np.unravel_index(int(node), g.shape)) if np.isscalar(node) else np.asarray(node)
        if np.any(idx < reach + 1) or np.any(idx >= g.m - reach - 1):
            raise IndexError(f"node {tuple(idx)} is too close to the border")
        c = at(idx)
        J = np.empty(len(E))
        for k, (e, L) in enumerate(zip(E, lens)):
            step = g.h * L
            jump = (at(idx + e) - 2 * c + at(idx - e)) / step
            curv = 0.0
            for side in (reach, -reach):
                x = idx + side * e
                curv += (at(x + e) - 2 * at(x) + at(x - e)) / step
            J[k] = max(jump - 0.5 * curv, 0.0)
        coef, *_ = np.linalg.lstsq(A, J**2, rcond=None)
        S = np.zeros((g.n, g.n))
        S[iu] = coef
        S = S + S.T - np.diag(np.diag(S))
        out.append(int(np.sum(np.linalg.eigvalsh(S) > tau_slope**2)))
    return np.array(out, dtype=int)


def subgradient_dim_check(u_star: ScalarField, points, tau_slope: float):
    """Dimensions per point and whether all stay below ``n/2``."""
    dims = subgradient_dims(u_star, points, tau_slope)
    limit = (u_star.grid.n - 1) // 2
    return dims, bool(np.all(dims <= limit))


def _default_tau(result, fan: PieceFan) -> float:
    segs = fan.segments()
    if len(segs) == 0:
        return 0.5
    shortest = min(np.linalg.norm(B - A) for A, B in segs)
    return 0.25 * shortest


# ---------------------------------------------------------------------------
# assembled verification


def verify_run(result, rng=None, samples: int = 100, cuts: int = 20, expect: dict | None = None,
               window=None) -> tuple[VerificationReport, dict]:
    """Run every applicable check on a finished run.

    ``expect`` may give ``components`` (expected count) and
    ``pairwise_meet`` (bool).  Returns the report and a dictionary of the
    intermediate objects (contact set, Dirac masses, singular report).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    expect = expect or {}
    rep = VerificationReport(manifest={k: v for k, v in result.params.items() if k != "attempts"})
    grid = result.grid
    n = grid.n
    tol = result.spec.tol_r
    rep.add("solver.admissible", float(np.min(result.gap())), 0.0, np.min(result.gap()) >= 0)
    fp = result.fixed_point_residual()
    rep.add("solver.complementarity", fp, 10 * tol, fp <= 10 * tol)
    if result.upper is not None:
        over = float(np.max(result.u_star.values - result.upper))
        under = float(np.max(result.lower - result.u_star.values))
        rep.add("solver.sandwich", max(over, under), 10 * tol, max(over, under) <= 10 * tol)
    if result.params.get("pipeline") == "polytope":
        ball = grid.radius() < 1.0
        top = float(np.max(result.u_star.values[ball])) if np.any(ball) else 0.0
        rep.add("solver.flatness", top, result.params["eps"], top <= result.params["eps"] + tol)
    out = {}
    try:
        K = contact_set(result)
    except ContactBoundaryError as exc:
        rep.add("contact.compact", 0.0, 1.0, False, str(exc))
        return rep, out
    rep.add("contact.compact", 1.0, 1.0, True)
    out["contact"] = K
    fan = K.fan
    low = K.low_strata_count()
    rep.add("contact.low_strata", low, 0, low == 0, f"lattice distance {K.low_strata_distance():g}")
    high = [i for i, lv in enumerate(fan.levels[:fan.declared]) if 2 * lv > n]
    missing = [f for f in high if not any(f in c.interior_faces for c in K.components)]
    if n >= 3:
        rep.add("contact.high_strata", len(missing), 0, not missing,
                f"strata without a 2h-ball: {missing}" if missing else "")
    if "components" in expect:
        rep.add("contact.components", K.count, expect["components"], K.count == expect["components"])
    if result.params.get("pipeline") == "y-graph":
        ok, detail = y_topology(K)
        rep.add("contact.y_topology", float(ok), 1.0, ok, detail)
    if expect.get("pairwise_meet"):
        bad = [(i, j) for i in range(K.count) for j in range(i + 1, K.count)
               if not any(fan.levels[f] == n - 1 for f in K.meeting_faces(i, j))]
        rep.add("contact.pairwise_meet", len(bad), 0, not bad)
    a = dirac_coefficients(K)
    out["dirac"] = a
    amin = min(a.values())
    rep.add("dirac.positive", amin, 0.0, amin > 0)
    if fan.polytope is not None and fan.polytope.num_vertices > 1:
        spread = 0.0
        for orb in symmetry_orbits(fan.polytope):
            vals = np.array([a[q] for q in orb])
            spread = max(spread, float(np.ptp(vals) / max(vals.mean(), 1e-300)))
        rep.add("dirac.symmetry", spread, 0.02, spread <= 0.02)
    if n >= 3:
        window = window or solution_window(result)
        sr = singular_set_report(result, window=window)
        out["singular"] = sr
        bound = 5 * grid.h * sr["lip"]
        if "zero_level" in sr:
            rep.add("singular.zero_level", sr["zero_level"], bound, sr["zero_level"] <= bound)
        else:
            rep.add("singular.affine_residual", sr["affine_residual"], bound, sr["affine_residual"] <= bound)
        rep.add("singular.laplacian_profile", sr["profile_ratio"], 2.0, sr["profile_ratio"] <= 2.0)
        rep.add("singular.operator_away", sr["ma_max_dev"], 0.05, sr["ma_max_dev"] <= 0.05)
        mass = mass_accounting(result, K, window=window)
        out["mass"] = mass
        rep.add("mass.accounting", mass["rel_error"], 0.05, mass["rel_error"] <= 0.05)
        fit = asymptotic_fit(result.u_star)
        out["asymptotics"] = fit
        rep.add("asymptotics.slope", fit["slope"], 2 - n, abs(fit["slope"] - (2 - n)) <= 0.3)
        rep.add("asymptotics.kappa", fit["kappa"], 0.0, fit["kappa"] < 0)
        pts = boundary_points(K)
        pick = rng.choice(pts, size=min(samples, pts.size), replace=False)
        dims, ok = subgradient_dim_check(result.u_star, pick, _default_tau(result, fan))
        out["subgradient_dims"] = dims
        rep.add("propagation.subgradient_dim", int(dims.max()), (n - 1) // 2, ok)
        cl = tilted_cuts(result, K, cuts, rng)
        ok, ratios = sublevel_volume_check(result.u_star, cl, return_ratios=True)
        c0 = math.pi ** (n / 2) / math.gamma(n / 2 + 1) * 2 ** (n / 2)
        rep.add("propagation.sublevel_volume", min(ratios) if ratios else 0.0, c0 / 10,
                ok and len(cl) == cuts, f"{len(cl)} cuts")
    return rep, out
