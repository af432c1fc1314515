"""Vertex-represented convex polytopes, support functions and normal fans.

A polytope ``Omega`` is stored by its extreme points.  Its support function
``P*(x) = max_y y.x`` is the obstacle of the global problem; the cones on
which ``P*`` is linear (the strata) are classified by the face of
``Omega`` that attains the maximum: a point whose maximising face has
dimension ``j`` lies in the stratum of level ``n - j``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import ConvexHull

__all__ = [
    "Polytope",
    "Stratum",
    "DualPolytope",
    "make_polytope",
    "support_value",
    "support_values",
    "dual_polytope",
    "classify_sigma",
    "classify_field",
    "normal_cone_contains",
    "y_obstacle_affines",
    "AffineFunction",
    "catalog",
    "CATALOG",
    "read_polytope",
    "write_polytope",
    "symmetry_orbits",
]

REL_TOL = 1e-9


@dataclass(frozen=True)
class Polytope:
    """Compact convex polytope in R^n given by its vertices.

    ``faces`` lists every nonempty face as a sorted tuple of vertex
    indices, ordered by dimension; ``face_dims`` holds their dimensions.
    """

    vertices: np.ndarray
    intrinsic_dim: int
    edges: tuple[tuple[int, int], ...]
    faces: tuple[tuple[int, ...], ...]
    face_dims: tuple[int, ...]
    basis: np.ndarray  # orthonormal rows spanning the affine hull directions
    tol: float

    @property
    def ambient_dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def n(self) -> int:
        return self.ambient_dim

    @property
    def d(self) -> int:
        return self.intrinsic_dim

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    def vertex_normal_cones(self) -> list[np.ndarray]:
        """Inequality description ``{p : A p >= 0}`` of each vertex normal cone."""
        V = self.vertices
        cones = []
        for q in range(len(V)):
            nbrs = [j for e in self.edges for j in e if q in e and j != q]
            cones.append(np.array([V[q] - V[j] for j in nbrs]).reshape(-1, self.n))
        return cones

    def skeleton_points(self, k: int, per_edge: int = 9) -> np.ndarray:
        """Sample points on the ``k``-skeleton (``k`` in {0, 1})."""
        if k == 0:
            return self.vertices.copy()
        if k != 1:
            raise ValueError("only the 0- and 1-skeleton are sampled")
        pts = [self.vertices]
        t = np.linspace(0.0, 1.0, per_edge)[1:-1, None]
        for i, j in self.edges:
            pts.append((1 - t) * self.vertices[i] + t * self.vertices[j])
        return np.vstack(pts)


@dataclass(frozen=True)
class Stratum:
    level: int
    component_id: int
    is_contact_permitted: bool


@dataclass(frozen=True)
class DualPolytope:
    """Bounded factor of ``{P* <= 1}`` and the dimension of its free factor."""

    bounded: Polytope
    free_dim: int


def _affine_frame(points: np.ndarray, tol: float):
    """Orthonormal basis of the direction space of the affine hull."""
    if len(points) == 1:
        return np.zeros((0, points.shape[1]))
    centred = points - points.mean(axis=0)
    _, s, vt = np.linalg.svd(centred, full_matrices=False)
    rank = int(np.sum(s > tol * max(1.0, s[0])))
    return vt[:rank]


def _is_extreme(points: np.ndarray, i: int) -> bool:
    """LP test: point ``i`` is not a convex combination of the others."""
    others = np.delete(points, i, axis=0)
    if len(others) == 0:
        return True
    k = len(others)
    A_eq = np.vstack([others.T, np.ones((1, k))])
    b_eq = np.append(points[i], 1.0)
    res = linprog(np.zeros(k), A_eq=A_eq, b_eq=b_eq, bounds=[(0, None)] * k, method="highs")
    return res.status != 0


def _face_lattice(local: np.ndarray, d: int, tol: float):
    """All faces as vertex-index tuples, computed from facets by intersection."""
    nv = len(local)
    full = tuple(range(nv))
    if d == 0:
        return [full], [0]
    if d == 1:
        return [(0,), (1,), full], [0, 0, 1]
    hull = ConvexHull(local)
    facets = set()
    for eq in hull.equations:
        vals = local @ eq[:-1] + eq[-1]
        facets.add(tuple(np.flatnonzero(np.abs(vals) <= tol)))
    faces = {full}
    frontier = set(facets)
    faces |= frontier
    while frontier:
        new = set()
        for a in frontier:
            for b in facets:
                c = tuple(sorted(set(a) & set(b)))
                if c and c not in faces:
                    new.add(c)
        faces |= new
        frontier = new
    dims = {}
    for f in faces:
        pts = local[list(f)]
        dims[f] = _affine_frame(pts, tol).shape[0]
    ordered = sorted(faces, key=lambda f: (dims[f], f))
    return ordered, [dims[f] for f in ordered]


def make_polytope(points) -> Polytope:
    """Build a :class:`Polytope` from a finite point set.

    Duplicate and non-extreme points are dropped.  Lower-dimensional
    polytopes are allowed.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.size == 0:
        raise ValueError("empty point set")
    if not np.all(np.isfinite(pts)):
        raise ValueError("coordinates must be finite")
    diam = float(np.max(np.ptp(pts, axis=0))) if len(pts) > 1 else 0.0
    tol = REL_TOL * max(diam, 1.0)
    uniq = []
    for p in pts:
        if not any(np.max(np.abs(p - q)) <= tol for q in uniq):
            uniq.append(p)
    pts = np.array(uniq)
    if len(pts) > 2:
        keep = [i for i in range(len(pts)) if _is_extreme(pts, i)]
        pts = pts[keep]
    if len(pts) > 64:
        raise ValueError("more than 64 vertices is not supported")
    basis = _affine_frame(pts, tol)
    d = basis.shape[0]
    local = (pts - pts.mean(axis=0)) @ basis.T if d else np.zeros((len(pts), 0))
    faces, dims = _face_lattice(local, d, tol)
    edges = tuple(f for f, dm in zip(faces, dims) if dm == 1 and len(f) == 2)
    return Polytope(pts, d, edges, tuple(faces), tuple(dims), basis, tol)


def support_value(P: Polytope, x) -> float:
    """``P*(x) = max over vertices of y.x``."""
    return float(np.max(P.vertices @ np.asarray(x, dtype=float)))


def support_values(P: Polytope, X) -> np.ndarray:
    """Vectorised support function over points in the last axis of ``X``."""
    X = np.asarray(X, dtype=float)
    flat = X.reshape(-1, P.n)
    out = np.full(len(flat), -np.inf)
    for v in P.vertices:
        np.maximum(out, flat @ v, out=out)
    return out.reshape(X.shape[:-1])


def _origin_in_relint(P: Polytope) -> bool:
    if P.d == 0:
        return np.allclose(P.vertices[0], 0.0, atol=P.tol)
    # origin must lie in the affine hull and strictly inside every facet
    c = P.vertices.mean(axis=0)
    resid = c - (c @ P.basis.T) @ P.basis
    if np.linalg.norm(resid) > P.tol:
        return False
    local = P.vertices @ P.basis.T
    if P.d == 1:
        return local.min() < -P.tol and local.max() > P.tol
    hull = ConvexHull(local)
    return bool(np.all(hull.equations[:, -1] < -P.tol))


def dual_polytope(P: Polytope) -> DualPolytope:
    """Polar of ``P`` inside its own span, plus the free-factor dimension.

    Raises
    ------
    ValueError
        If the origin is not in the relative interior of ``P``.
    """
    if not _origin_in_relint(P):
        raise ValueError("origin is not in the relative interior")
    n, d = P.n, P.d
    if d == 0:
        return DualPolytope(make_polytope(np.zeros((1, n))), n)
    local = P.vertices @ P.basis.T
    if d == 1:
        lo, hi = local.min(), local.max()
        duals = np.array([[1.0 / lo], [1.0 / hi]])
    else:
        hull = ConvexHull(local)
        rows = []
        for eq in hull.equations:
            a, b = eq[:-1], -eq[-1]
            z = a / b
            if not any(np.allclose(z, r, atol=1e-9) for r in rows):
                rows.append(z)
        duals = np.array(rows)
    return DualPolytope(make_polytope(duals @ P.basis), n - d)


def _max_face(P: Polytope, x: np.ndarray, tol: float) -> int:
    vals = P.vertices @ x
    active = set(np.flatnonzero(vals >= vals.max() - tol))
    for idx, face in enumerate(P.faces):
        if active <= set(face):
            return idx
    return len(P.faces) - 1


def classify_sigma(P: Polytope, x, tol: float | None = None) -> Stratum:
    """Stratum of the point ``x``.

    The component is identified with the face of ``P`` on which ``y.x``
    is maximal; near-ties enlarge that face, which lowers the level.

    Raises
    ------
    ValueError
        For ``x = 0`` when ``P`` is full-dimensional.
    """
    x = np.asarray(x, dtype=float)
    n = P.n
    scale = max(np.linalg.norm(x), 1e-300) * max(np.max(np.abs(P.vertices)), 1.0)
    tol = REL_TOL * scale if tol is None else tol
    if P.d == n and np.linalg.norm(x) == 0.0:
        raise ValueError("the apex is not classified")
    face = _max_face(P, x, tol)
    level = n - P.face_dims[face]
    return Stratum(level, face, 2 * level > n)


def classify_field(P: Polytope, X: np.ndarray, tol_rel: float = REL_TOL):
    """Vectorised stratum levels and face ids for an array of points.

    The apex (``x = 0``) receives level ``n - d`` and the face id of ``P``
    itself, matching the convention for degenerate polytopes.
    """
    X = np.asarray(X, dtype=float)
    flat = X.reshape(-1, P.n)
    vals = flat @ P.vertices.T
    vmax = vals.max(axis=1, keepdims=True)
    scale = np.linalg.norm(flat, axis=1, keepdims=True) * max(np.max(np.abs(P.vertices)), 1.0)
    active = vals >= vmax - tol_rel * scale
    face_masks = np.zeros((len(P.faces), P.num_vertices), dtype=bool)
    for i, f in enumerate(P.faces):
        face_masks[i, list(f)] = True
    # smallest face containing the active set; faces are sorted by dimension
    ok = ~np.any(active[:, None, :] & ~face_masks[None, :, :], axis=2)
    face_id = np.argmax(ok, axis=1)
    levels = P.n - np.asarray(P.face_dims)[face_id]
    return levels.reshape(X.shape[:-1]), face_id.reshape(X.shape[:-1])


def normal_cone_contains(P: Polytope, q: int, p, tol: float | None = None) -> bool:
    """True iff ``p`` lies in the normal cone of ``P`` at vertex ``q``."""
    if not 0 <= q < P.num_vertices:
        raise IndexError(q)
    p = np.asarray(p, dtype=float)
    vals = P.vertices @ p
    scale = max(np.linalg.norm(p), 1e-300) * max(np.max(np.abs(P.vertices)), 1.0)
    tol = REL_TOL * scale if tol is None else tol
    return bool(vals[q] >= vals.max() - tol)


@dataclass(frozen=True)
class AffineFunction:
    """``L(x) = slope . x - offset``."""

    slope: np.ndarray
    offset: float

    def __call__(self, X):
        return np.asarray(X, dtype=float) @ self.slope - self.offset


def y_obstacle_affines(segments, delta: float, r0: float) -> list[AffineFunction]:
    """Affine pieces of the Y-shaped obstacle.

    ``segments`` are the far endpoints of segments that start at a common
    vertex (already translated to the origin), or pairs of endpoints in
    which case the first endpoint is taken as the common vertex.  Each
    ``L_i`` has gradient ``delta * g_i`` and vanishes on the hyperplane
    tangent to the ball of radius ``1 - r0`` at ``(1 - r0) g_i / |g_i|``.

    Raises
    ------
    ValueError
        With fewer than two segments, repeated directions, or overlapping
        caps ``{|x| <= 1, L_i >= 0}``.
    """
    segs = np.asarray(segments, dtype=float)
    if segs.ndim == 3:
        base = segs[:, 0, :]
        if not np.allclose(base, base[0]):
            raise ValueError("segments do not share a vertex")
        segs = segs[:, 1, :] - base[0]
    if len(segs) < 2:
        raise ValueError("need at least two segments")
    if not (delta > 0 and 0 < r0 < 1):
        raise ValueError("need delta > 0 and 0 < r0 < 1")
    norms = np.linalg.norm(segs, axis=1)
    if np.any(norms == 0):
        raise ValueError("degenerate segment")
    dirs = segs / norms[:, None]
    cap_angle = math.acos(1.0 - r0)
    for i, j in itertools.combinations(range(len(dirs)), 2):
        ang = math.acos(float(np.clip(dirs[i] @ dirs[j], -1.0, 1.0)))
        if ang < 1e-9:
            raise ValueError("segments point in the same direction")
        if ang <= 2.0 * cap_angle:
            raise ValueError(f"caps {i} and {j} overlap: angle {ang:.4f} <= {2 * cap_angle:.4f}")
    return [AffineFunction(delta * g, delta * nrm * (1.0 - r0)) for g, nrm in zip(segs, norms)]


def _regular_simplex(n: int) -> np.ndarray:
    """Regular simplex with ``n + 1`` unit vertices centred at the origin in R^n."""
    E = np.eye(n + 1) - 1.0 / (n + 1)
    _, _, vt = np.linalg.svd(E)
    V = E @ vt[:n].T
    return V / np.linalg.norm(V, axis=1, keepdims=True)


def catalog(name: str, n: int) -> Polytope:
    """Preset polytopes embedded in R^n.

    Lower-dimensional presets occupy the last coordinates, as in
    ``Omega in {0} x R^d``.
    """
    def embed(V):
        V = np.atleast_2d(np.asarray(V, dtype=float))
        if V.shape[1] > n:
            raise ValueError(f"preset {name!r} needs n >= {V.shape[1]}")
        out = np.zeros((len(V), n))
        out[:, n - V.shape[1]:] = V
        return out

    if name == "point":
        return make_polytope(np.zeros((1, n)))
    if name == "segment":
        return make_polytope(embed([[-1.0], [1.0]]))
    if name == "triangle":
        ang = np.pi / 2 + 2 * np.pi * np.arange(3) / 3
        return make_polytope(embed(np.c_[np.cos(ang), np.sin(ang)]))
    if name == "square":
        return make_polytope(embed([[1, 1], [1, -1], [-1, 1], [-1, -1]]))
    if name == "tetrahedron":
        # vertices on lattice body diagonals so the dual rays pass through nodes
        V = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float) / math.sqrt(3)
        return make_polytope(embed(V))
    if name == "cube":
        return make_polytope(embed(list(itertools.product([-1.0, 1.0], repeat=3))))
    if name == "simplex4":
        return make_polytope(embed(_regular_simplex(4)))
    raise KeyError(f"unknown preset {name!r}")


CATALOG = ("point", "segment", "triangle", "square", "tetrahedron", "cube", "simplex4")


def symmetry_orbits(P: Polytope, tol: float = 1e-7) -> list[list[int]]:
    """Vertex orbits under the signed coordinate permutations preserving ``P``.

    This is the part of the symmetry group visible to the lattice; it is
    what a grid computation can be expected to respect.
    """
    V = P.vertices
    n = P.n
    parent = list(range(len(V)))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for perm in itertools.permutations(range(n)):
        for signs in itertools.product([-1.0, 1.0], repeat=n):
            W = V[:, perm] * np.array(signs)
            match = []
            for w in W:
                hit = np.flatnonzero(np.max(np.abs(V - w), axis=1) <= tol)
                if len(hit) != 1:
                    break
                match.append(hit[0])
            else:
                for i, j in enumerate(match):
                    parent[find(i)] = find(j)
    groups = {}
    for i in range(len(V)):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values())


def write_polytope(path, P: Polytope) -> None:
    """Plain text: ``n d V E`` header, vertex rows, then edge index pairs."""
    with open(path, "w") as fh:
        fh.write(f"{P.n} {P.d} {P.num_vertices} {len(P.edges)}\n")
        for v in P.vertices:
            fh.write(" ".join(repr(float(c)) for c in v) + "\n")
        for i, j in P.edges:
            fh.write(f"{i} {j}\n")


def read_polytope(path) -> Polytope:
    """Inverse of :func:`write_polytope`; edges are recomputed and checked."""
    with open(path) as fh:
        rows = [ln.split() for ln in fh if ln.strip() and not ln.startswith("#")]
    n, d, nv, ne = (int(t) for t in rows[0])
    V = np.array([[float(t) for t in r] for r in rows[1 : 1 + nv]])
    if V.shape != (nv, n):
        raise ValueError("vertex block does not match the header")
    P = make_polytope(V)
    if P.d != d or P.num_vertices != nv:
        raise ValueError("header disagrees with the vertex set")
    edges = {tuple(sorted(int(t) for t in r)) for r in rows[1 + nv : 1 + nv + ne]}
    if len(edges) != ne or edges != set(P.edges):
        raise ValueError("edge block disagrees with the vertex set")
    return P
