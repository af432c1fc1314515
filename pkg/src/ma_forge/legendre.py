"""Discrete Legendre transforms on tensor grids.

The one-dimensional kernel walks the lower convex hull of the samples
while the slopes increase, so the maximiser index never moves backwards
and each pencil costs O(N + M).  The n-dimensional transform factors the
supremum axis by axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .grid import ScalarField, TensorGrid

__all__ = [
    "DualGrid",
    "llt_1d",
    "legendre_nd",
    "legendre_brute",
    "biconjugate",
    "build_solution",
    "refine_conjugate",
    "CoverageError",
]


class CoverageError(ValueError):
    """The slope grid does not cover the subgradient range of the field."""


@njit(cache=True)
def _lower_hull(x, v):
    # Andrew's monotone chain on points sorted by x; collinear points dropped
    N = x.size
    hull = np.empty(N, dtype=np.int64)
    k = 0
    for i in range(N):
        while k >= 2:
            a, b = hull[k - 2], hull[k - 1]
            cross = (x[b] - x[a]) * (v[i] - v[a]) - (v[b] - v[a]) * (x[i] - x[a])
            if cross <= 0.0:
                k -= 1
            else:
                break
        hull[k] = i
        k += 1
    return hull[:k]


@njit(cache=True)
def _llt_pencil(x, v, p, out, arg):
    hull = _lower_hull(x, v)
    H = hull.size
    j = 0
    for s in range(p.size):
        ps = p[s]
        cur = ps * x[hull[j]] - v[hull[j]]
        while j + 1 < H:
            nxt = ps * x[hull[j + 1]] - v[hull[j + 1]]
            if nxt > cur:
                j += 1
                cur = nxt
            else:
                break
        out[s] = cur
        arg[s] = hull[j]


@njit(cache=True)
def _llt_pencils(x, V, p):
    P = V.shape[0]
    out = np.empty((P, p.size))
    arg = np.empty((P, p.size), dtype=np.int64)
    for r in range(P):
        _llt_pencil(x, V[r], p, out[r], arg[r])
    return out, arg


def llt_1d(positions, values, slopes, return_argmax=False):
    """``max_i (p x_i - v_i)`` for every slope ``p``.

    Slopes may come in any order.  Exact ties go to the smaller index.

    Raises
    ------
    ValueError
        On empty input or positions that are not strictly increasing.
    """
    x = np.ascontiguousarray(positions, dtype=float)
    v = np.ascontiguousarray(values, dtype=float)
    p = np.asarray(slopes, dtype=float)
    if x.size == 0:
        raise ValueError("empty input")
    if x.shape != v.shape:
        raise ValueError("positions and values differ in length")
    if np.any(np.diff(x) <= 0):
        raise ValueError("positions must be strictly increasing")
    order = np.argsort(p, kind="stable")
    out, arg = _llt_pencils(x, v[None, :], np.ascontiguousarray(p[order]))
    res = np.empty(p.size)
    am = np.empty(p.size, dtype=np.int64)
    res[order], am[order] = out[0], arg[0]
    return (res, am) if return_argmax else res


@dataclass(frozen=True)
class DualGrid:
    """Slope-space grid on which conjugates are sampled."""

    grid: TensorGrid

    @classmethod
    def covering(cls, f: ScalarField, m: int | None = None, margin: float = 1.25) -> "DualGrid":
        """Half-width ``margin`` times the largest forward-difference slope."""
        slope = max_forward_slope(f)
        m = f.grid.m if m is None else m
        return cls(TensorGrid(f.grid.n, margin * max(slope, 1e-12), m))

    @classmethod
    def box(cls, n: int, half_width: float, m: int) -> "DualGrid":
        return cls(TensorGrid(n, half_width, m))


def max_forward_slope(f: ScalarField) -> float:
    vals = f.values
    best = 0.0
    for ax in range(f.grid.n):
        best = max(best, float(np.max(np.abs(np.diff(vals, axis=ax)))))
    return best / f.grid.h


def legendre_nd(f: ScalarField, dual: DualGrid, return_argmax=False, require_coverage=True):
    """Conjugate of a sampled field, ``f*(p) = max_x (p.x - f(x))``, on ``dual``.

    With ``return_argmax`` the flat primal index of a maximiser is returned
    for every slope node (recovered by backtracking the axis passes).

    Raises
    ------
    CoverageError
        If ``require_coverage`` and the dual box is narrower than the
        largest forward-difference slope of ``f``.
    """
    g, dg = f.grid, dual.grid
    if g.n != dg.n:
        raise ValueError("dimension mismatch")
    if require_coverage and max_forward_slope(f) > dg.R * (1 + 1e-12):
        raise CoverageError(
            f"dual half-width {dg.R:.4g} < max slope {max_forward_slope(f):.4g}"
        )
    x = np.ascontiguousarray(g.axis())
    p = np.ascontiguousarray(dg.axis())
    n = g.n
    cur = -np.asarray(f.values, dtype=float)  # running "g" with f* = max(p.x + g)
    args = []
    for ax in range(n):
        moved = np.moveaxis(-cur, ax, -1)
        shp = moved.shape
        out, arg = _llt_pencils(x, np.ascontiguousarray(moved.reshape(-1, shp[-1])), p)
        cur = np.moveaxis(out.reshape(shp[:-1] + (p.size,)), -1, ax)
        args.append(np.moveaxis(arg.reshape(shp[:-1] + (p.size,)), -1, ax))
    conj = ScalarField(dg, cur)
    if not return_argmax:
        return conj
    # backtrack: the pass over axis a was taken with axes < a already in slope space
    idx = [None] * n
    grids = np.indices(dg.shape)
    for ax in reversed(range(n)):
        sel = []
        for b in range(n):
            if b < ax:
                sel.append(grids[b])
            elif b == ax:
                sel.append(grids[b])
            else:
                sel.append(idx[b])
        idx[ax] = args[ax][tuple(sel)]
    flat = np.ravel_multi_index(tuple(idx), g.shape)
    return conj, flat


def legendre_brute(f: ScalarField, dual: DualGrid, chunk: int = 4096) -> ScalarField:
    """Quadratic-cost conjugate by direct maximisation (test oracle)."""
    X = f.grid.points()
    v = f.values.ravel()
    Pts = dual.grid.points()
    out = np.empty(len(Pts))
    for s in range(0, len(Pts), chunk):
        blk = Pts[s : s + chunk]
        out[s : s + chunk] = np.max(blk @ X.T - v[None, :], axis=1)
    return ScalarField(dual.grid, out.reshape(dual.grid.shape))


def biconjugate(f: ScalarField, dual: DualGrid | None = None) -> ScalarField:
    """Conjugate twice, back onto the grid of ``f`` (the convex envelope)."""
    dual = dual or DualGrid.covering(f)
    fs = legendre_nd(f, dual)
    back = legendre_nd(fs, DualGrid(f.grid), require_coverage=False)
    return ScalarField(f.grid, back.values, f.boundary_mask.copy())


@njit(cache=True)
def _refine(vals, shape, h, lo, P, base, arg, reach, smooth_tol):
    n = shape.size
    out = base.copy()
    strides = np.empty(n, np.int64)
    s = 1
    for a in range(n - 1, -1, -1):
        strides[a] = s
        s *= shape[a]
    g = np.empty(n)
    H = np.empty((n, n))
    idx = np.empty(n, np.int64)
    x = np.empty(n)
    for k in range(arg.size):
        j = arg[k]
        r = j
        inside = True
        for a in range(n):
            idx[a] = r // strides[a]
            r -= idx[a] * strides[a]
            if idx[a] < reach or idx[a] >= shape[a] - reach:
                inside = False
        if not inside:
            continue
        f0 = vals[j]
        smooth = True
        for a in range(n):
            fp = vals[j + strides[a]]
            fm = vals[j - strides[a]]
            g[a] = (fp - fm) / (2 * h)
            H[a, a] = (fp - 2 * f0 + fm) / (h * h)
            # a kink at or next to the node shows up as a jump in second differences
            dp = vals[j + 2 * strides[a]] - 2 * fp + f0
            dm = f0 - 2 * fm + vals[j - 2 * strides[a]]
            d0 = fp - 2 * f0 + fm
            if abs(dp - d0) + abs(dm - d0) > smooth_tol * abs(d0) + 1e-14 * (abs(f0) + 1.0):
                smooth = False
        if not smooth:
            continue
        for a in range(n):
            for b in range(a):
                v = (vals[j + strides[a] + strides[b]] - vals[j + strides[a] - strides[b]]
                     - vals[j - strides[a] + strides[b]] + vals[j - strides[a] - strides[b]]) / (4 * h * h)
                H[a, b] = v
                H[b, a] = v
        w, Q = np.linalg.eigh(H)
        if w[0] <= 1e-8 * max(w[-1], 1e-300):
            continue
        c = Q.T @ (P[k] - g)
        step = Q @ (c / w)
        if np.max(np.abs(step)) > h:
            continue
        for a in range(n):
            x[a] = lo + idx[a] * h
        out[k] = P[k] @ x - f0 + 0.5 * np.sum(c * c / w)
    return out


def refine_conjugate(f: ScalarField, dual: DualGrid, conj: ScalarField, argmax: np.ndarray) -> ScalarField:
    """Correct a sampled conjugate with a local quadratic model of ``f``.

    At the maximising node a central-difference quadratic model of ``f``
    is maximised in closed form; the correction is kept only when the
    model is strictly convex, its maximiser stays within one cell, and
    the axial second differences at the node agree with those one step
    to either side to within half their size (no kink nearby).
    This removes the O(h^2) underestimate of the node-wise maximum where
    ``f`` is smooth and leaves kinks and flat pieces untouched.
    """
    g = f.grid
    P = np.ascontiguousarray(dual.grid.points())
    vals = np.ascontiguousarray(f.values.ravel())
    out = _refine(vals, np.array(g.shape, dtype=np.int64), g.h, -g.R, P,
                  np.ascontiguousarray(conj.values.ravel()), np.ascontiguousarray(argmax.ravel()), 2, 0.5)
    return ScalarField(dual.grid, out.reshape(dual.grid.shape))


def build_solution(result, dual: DualGrid | None = None, return_argmax=False, refine=False):
    """Conjugate of the obstacle-problem solution ``u*``: the singular solution ``u``.

    Without ``dual`` the slope box covers every slope of ``u*``; a given
    ``dual`` may be a smaller window.  With ``refine`` the sampled
    conjugate is corrected by :func:`refine_conjugate`.
    """
    u_star = result.u_star if hasattr(result, "u_star") else result
    window = dual is not None
    dual = dual or DualGrid.covering(u_star)
    conj, arg = legendre_nd(u_star, dual, return_argmax=True, require_coverage=not window)
    if refine:
        conj = refine_conjugate(u_star, dual, conj, arg)
    return (conj, arg) if return_argmax else conj
