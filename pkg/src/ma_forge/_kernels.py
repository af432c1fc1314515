"""Compiled per-node kernels for the wide-stencil Monge-Ampere scheme.

Fields are flat C-ordered arrays.  A frame set is described by
``offs[f, i]`` (flat index offset of direction ``i`` of frame ``f``) and
``lens2[f, i]`` (squared Euclidean step ``h^2 |e|^2``).
"""

import numpy as np
from numba import njit


@njit(cache=True)
def ma_node(u, node, offs, lens2, clip):
    best = np.inf
    F, n = offs.shape
    for f in range(F):
        prod = 1.0
        for i in range(n):
            o = offs[f, i]
            d = (u[node + o] + u[node - o] - 2.0 * u[node]) / lens2[f, i]
            if clip and d < 0.0:
                d = 0.0
            prod *= d
        if prod < best:
            best = prod
    return best


@njit(cache=True)
def ma_nodes(u, nodes, offs, lens2, clip):
    out = np.empty(nodes.size)
    for j in range(nodes.size):
        out[j] = ma_node(u, nodes[j], offs, lens2, clip)
    return out


@njit(cache=True)
def _frame_root(a, K, Kr, n):
    """Root ``c < min(a)`` of ``prod(a_i - c) = K`` by monotone Newton.

    ``prod(a_i - c)`` is convex and decreasing left of ``min(a)``; starting
    at ``min(a) - K^(1/n)`` (where the product is >= K) Newton increases
    monotonically to the root.
    """
    amin = a[0]
    for i in range(1, n):
        if a[i] < amin:
            amin = a[i]
    c = amin - Kr
    for _ in range(100):
        P = 1.0
        S = 0.0
        for i in range(n):
            gap = a[i] - c
            P *= gap
            S += 1.0 / gap
        step = (P - K) / (P * S)
        c += step
        if step <= 1e-15 * (1.0 + abs(c)):
            break
    return c


@njit(cache=True)
def _frame_means(u, node, offs, f, n, a):
    for i in range(n):
        o = offs[f, i]
        a[i] = 0.5 * (u[node + o] + u[node - o])


@njit(cache=True)
def local_solve(u, node, offs, Ks, Krs, hint):
    """Centre value at which the frame-minimum operator equals one.

    ``Ks[f] = prod_i lens2[f, i] / 2^n`` and ``Krs = Ks ** (1/n)``.  The
    operator is nonincreasing in the centre value, so the root is the
    smallest of the per-frame roots.  Frame ``hint`` is tried first; the
    index of the binding frame is returned with the root.
    """
    F, n = offs.shape
    a = np.empty(n)
    _frame_means(u, node, offs, hint, n, a)
    best = _frame_root(a, Ks[hint], Krs[hint], n)
    arg = hint
    for f in range(F):
        if f == hint:
            continue
        _frame_means(u, node, offs, f, n, a)
        # frame cannot lower the root if its product at ``best`` is >= K
        P = 1.0
        for i in range(n):
            gap = a[i] - best
            if gap <= 0.0:
                P = 0.0
                break
            P *= gap
        if P >= Ks[f]:
            continue
        c = _frame_root(a, Ks[f], Krs[f], n)
        if c < best:
            best = c
            arg = f
    return best, arg


@njit(cache=True)
def local_solve_nodes(u, nodes, offs, Ks, Krs):
    out = np.empty(nodes.size)
    for j in range(nodes.size):
        out[j], _ = local_solve(u, nodes[j], offs, Ks, Krs, 0)
    return out


@njit(cache=True)
def sweep_gs(u, psi, color_nodes, color_ptr, offs, Ks, Krs, hints, monotone):
    """One colored Gauss-Seidel sweep in place; returns the max |update|.

    ``hints`` (one entry per position in ``color_nodes``) carries the last
    binding frame of each node between sweeps.
    """
    biggest = 0.0
    for c in range(color_ptr.size - 1):
        for j in range(color_ptr[c], color_ptr[c + 1]):
            node = color_nodes[j]
            v, hints[j] = local_solve(u, node, offs, Ks, Krs, hints[j])
            if monotone and u[node] < v:
                v = u[node]
            if v < psi[node]:
                v = psi[node]
            d = abs(v - u[node])
            if d > biggest:
                biggest = d
            u[node] = v
    return biggest


@njit(cache=True)
def sweep_jacobi(u, psi, nodes, offs, Ks, Krs, hints, monotone):
    """One Jacobi sweep: every update reads the previous iterate only."""
    new = np.empty(nodes.size)
    for j in range(nodes.size):
        new[j], hints[j] = local_solve(u, nodes[j], offs, Ks, Krs, hints[j])
    biggest = 0.0
    for j in range(nodes.size):
        node = nodes[j]
        v = new[j]
        if monotone and u[node] < v:
            v = u[node]
        if v < psi[node]:
            v = psi[node]
        d = abs(v - u[node])
        if d > biggest:
            biggest = d
        u[node] = v
    return biggest


@njit(cache=True)
def active_frames(u, nodes, offs, lens2):
    """Index of the minimising frame and its clipped second differences."""
    F, n = offs.shape
    idx = np.empty(nodes.size, dtype=np.int64)
    D = np.empty((nodes.size, n))
    tmp = np.empty(n)
    for j in range(nodes.size):
        node = nodes[j]
        best = np.inf
        for f in range(F):
            prod = 1.0
            for i in range(n):
                o = offs[f, i]
                d = (u[node + o] + u[node - o] - 2.0 * u[node]) / lens2[f, i]
                if d < 0.0:
                    d = 0.0
                tmp[i] = d
                prod *= d
            if prod < best:
                best = prod
                idx[j] = f
                for i in range(n):
                    D[j, i] = tmp[i]
    return idx, D
