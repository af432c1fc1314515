"""Monotone wide-stencil Monge-Ampere operator and discrete Monge-Ampere measure.

The operator at a node is the minimum, over a fixed set of orthogonal
lattice frames, of the product of clipped directional second
differences.  For a convex quadratic every frame product dominates the
determinant, with equality on an eigenframe.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .grid import ScalarField, TensorGrid, frame_reach, frame_set

__all__ = ["MAConfig", "Stencil", "ma_h", "ma_h_field", "ma_measure"]


@dataclass
class MAConfig:
    frames: np.ndarray | None = None
    negative_part_clip: bool = True

    def frames_for(self, n: int) -> np.ndarray:
        return frame_set(n) if self.frames is None else np.asarray(self.frames, dtype=np.int64)


@dataclass
class Stencil:
    """Flat-index form of a frame set on a particular grid."""

    grid: TensorGrid
    frames: np.ndarray
    offs: np.ndarray = field(init=False)
    lens2: np.ndarray = field(init=False)
    Ks: np.ndarray = field(init=False)
    reach: int = field(init=False)

    def __post_init__(self):
        g = self.grid
        strides = np.array([g.m ** (g.n - 1 - a) for a in range(g.n)], dtype=np.int64)
        self.offs = np.ascontiguousarray(self.frames @ strides)
        sq = (self.frames**2).sum(axis=2).astype(float)
        self.lens2 = np.ascontiguousarray(g.h**2 * sq)
        self.Ks = np.prod(self.lens2, axis=1) / 2.0**g.n
        self.reach = frame_reach(self.frames)

    @classmethod
    def for_grid(cls, grid: TensorGrid, cfg: MAConfig | None = None) -> "Stencil":
        cfg = cfg or MAConfig()
        return cls(grid, cfg.frames_for(grid.n))

    def interior(self) -> np.ndarray:
        """Boolean mask of nodes whose every stencil stays in the grid."""
        return ~self.grid.border_mask(self.reach)


def ma_h(f: ScalarField, node, cfg: MAConfig | None = None) -> float:
    """Frame-minimum operator at one node.

    Raises
    ------
    IndexError
        If a stencil leaves the grid.
    """
    cfg = cfg or MAConfig()
    st = Stencil.for_grid(f.grid, cfg)
    node = tuple(int(i) for i in node)
    if any(i < st.reach or i >= f.grid.m - st.reach for i in node):
        raise IndexError(f"stencil leaves the grid at node {node}")
    flat = int(np.ravel_multi_index(node, f.grid.shape))
    return float(_kernels.ma_node(f.values.ravel(), flat, st.offs, st.lens2, cfg.negative_part_clip))


def ma_h_field(f: ScalarField, cfg: MAConfig | None = None, stencil: Stencil | None = None) -> np.ndarray:
    """Operator at every node with full stencils; NaN elsewhere."""
    cfg = cfg or MAConfig()
    st = stencil or Stencil.for_grid(f.grid, cfg)
    mask = st.interior()
    nodes = np.flatnonzero(mask.ravel())
    out = np.full(f.grid.size, np.nan)
    out[nodes] = _kernels.ma_nodes(
        np.ascontiguousarray(f.values.ravel()), nodes, st.offs, st.lens2, cfg.negative_part_clip
    )
    return out.reshape(f.grid.shape)


def ma_measure(f: ScalarField, region, dual_m: int | None = None, dual=None) -> float:
    """Volume of the subgradient image of ``region`` under ``f``.

    The conjugate of ``f`` is computed on a slope grid; every slope node is
    attributed to the node of ``f`` that attains the supremum, and the
    measure of ``region`` is the slope-cell volume times the number of
    slope nodes attributed to it.

    Raises
    ------
    ValueError
        If ``region`` touches the boundary of the grid.
    """
    from .legendre import DualGrid, legendre_nd

    region = np.asarray(region)
    if region.dtype != bool:
        mask = np.zeros(f.grid.shape, dtype=bool)
        mask[tuple(np.atleast_2d(region).T)] = True
        region = mask
    if np.any(region & f.grid.border_mask(1)):
        raise ValueError("region touches the boundary: subgradients are unbounded there")
    if dual is None:
        dual = DualGrid.covering(f, m=dual_m)
    _, argmax = legendre_nd(f, dual, return_argmax=True)
    hits = region.ravel()[argmax.ravel()]
    return float(np.count_nonzero(hits) * dual.grid.cell_volume)
