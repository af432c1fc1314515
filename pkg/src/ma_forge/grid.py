"""Tensor-product grids, scalar fields and directional second differences."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "TensorGrid",
    "ScalarField",
    "second_difference",
    "second_difference_field",
    "frame_set",
    "frame_reach",
    "write_csv",
    "write_vtk",
]


@dataclass(frozen=True)
class TensorGrid:
    """Uniform grid on the box ``[-R, R]^n`` with ``m`` nodes per axis.

    ``m`` must be odd so that the origin is a node.  Coordinates are
    computed as ``h * (i - (m - 1) // 2)`` which is exactly antisymmetric
    about the centre and exactly zero at it.
    """

    n: int
    R: float
    m: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("dimension must be positive")
        if self.m < 3 or self.m % 2 == 0:
            raise ValueError(f"m must be odd and >= 3, got {self.m}")
        if not self.R > 0:
            raise ValueError("half-width must be positive")

    @property
    def h(self) -> float:
        return 2.0 * self.R / (self.m - 1)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.m,) * self.n

    @property
    def size(self) -> int:
        return self.m**self.n

    @property
    def center(self) -> int:
        return (self.m - 1) // 2

    @property
    def cell_volume(self) -> float:
        return self.h**self.n

    def axis(self) -> np.ndarray:
        return self.h * (np.arange(self.m) - self.center)

    def coordinate(self, index) -> np.ndarray:
        return self.h * (np.asarray(index, dtype=float) - self.center)

    def index_of(self, x) -> tuple[int, ...]:
        """Index of the node nearest to ``x`` (clamped into the grid)."""
        i = np.rint(np.asarray(x, dtype=float) / self.h).astype(int) + self.center
        return tuple(np.clip(i, 0, self.m - 1))

    def mesh(self) -> list[np.ndarray]:
        return np.meshgrid(*([self.axis()] * self.n), indexing="ij")

    def points(self) -> np.ndarray:
        """All node coordinates, shape ``(m**n, n)`` in C order."""
        return np.stack([c.ravel() for c in self.mesh()], axis=1)

    def radius(self) -> np.ndarray:
        return np.sqrt(sum(c * c for c in self.mesh()))

    def border_mask(self, width: int = 1) -> np.ndarray:
        """Nodes within ``width`` index steps of the box boundary."""
        mask = np.zeros(self.shape, dtype=bool)
        for ax in range(self.n):
            sl = [slice(None)] * self.n
            sl[ax] = slice(0, width)
            mask[tuple(sl)] = True
            sl[ax] = slice(self.m - width, self.m)
            mask[tuple(sl)] = True
        return mask


@dataclass
class ScalarField:
    """Node values on a :class:`TensorGrid` with an optional pinned set."""

    grid: TensorGrid
    values: np.ndarray
    boundary_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(self.grid.shape)
        if self.boundary_mask is None:
            self.boundary_mask = self.grid.border_mask(1)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")

    @classmethod
    def from_function(cls, grid: TensorGrid, func, boundary_mask=None) -> "ScalarField":
        vals = func(grid.points()).reshape(grid.shape)
        return cls(grid, vals, boundary_mask)

    def copy(self) -> "ScalarField":
        return ScalarField(self.grid, self.values.copy(), self.boundary_mask.copy())

    def __getitem__(self, index):
        return self.values[index]


def second_difference(f: ScalarField, node, direction) -> float:
    """Directional second difference ``(f(x+e) + f(x-e) - 2 f(x)) / (h|e|)^2``."""
    node = np.asarray(node, dtype=int)
    e = np.asarray(direction, dtype=int)
    m = f.grid.m
    plus, minus = node + e, node - e
    if np.any(plus < 0) or np.any(plus >= m) or np.any(minus < 0) or np.any(minus >= m):
        raise IndexError(f"stencil {tuple(e)} at node {tuple(node)} leaves the grid")
    v = f.values
    step2 = f.grid.h**2 * float(e @ e)
    return (v[tuple(plus)] + v[tuple(minus)] - 2.0 * v[tuple(node)]) / step2


def _shifted(values: np.ndarray, offset, reach: int) -> np.ndarray:
    """View of ``values`` shifted by ``offset`` on the interior of width ``reach``."""
    m = values.shape[0]
    sl = tuple(slice(reach + o, m - reach + o) for o in offset)
    return values[sl]


def second_difference_field(values: np.ndarray, h: float, direction, reach: int) -> np.ndarray:
    """Second differences along ``direction`` at every node at least ``reach`` from the border."""
    e = np.asarray(direction, dtype=int)
    centre = _shifted(values, np.zeros_like(e), reach)
    return (_shifted(values, e, reach) + _shifted(values, -e, reach) - 2.0 * centre) / (
        h * h * float(e @ e)
    )


def _frames_2d():
    return [((1, 0), (0, 1)), ((1, 1), (1, -1))]


def _frames_3d():
    frames = [((1, 0, 0), (0, 1, 0), (0, 0, 1))]
    for ax in range(3):
        j, k = [a for a in range(3) if a != ax]
        e = [0, 0, 0]
        e[ax] = 1
        d1 = [0, 0, 0]
        d1[j], d1[k] = 1, 1
        d2 = [0, 0, 0]
        d2[j], d2[k] = 1, -1
        frames.append((tuple(e), tuple(d1), tuple(d2)))
    # body diagonal completed by two orthogonal lattice vectors
    for s2, s3 in [(1, 1), (1, -1), (-1, 1), (-1, -1)]:
        d = (1, s2, s3)
        a = (s2, -1, 0)
        b = (1, s2, -2 * s3)
        frames.append((d, a, b))
    return frames


def _frames_4d():
    axes = np.eye(4, dtype=int)
    frames = [tuple(tuple(r) for r in axes)]
    pairs = list(itertools.combinations(range(4), 2))
    for i, j in pairs:
        k, l = [a for a in range(4) if a not in (i, j)]
        frames.append(
            (
                tuple(axes[i] + axes[j]),
                tuple(axes[i] - axes[j]),
                tuple(axes[k]),
                tuple(axes[l]),
            )
        )
    for (i, j), (k, l) in [((0, 1), (2, 3)), ((0, 2), (1, 3)), ((0, 3), (1, 2))]:
        frames.append(
            (
                tuple(axes[i] + axes[j]),
                tuple(axes[i] - axes[j]),
                tuple(axes[k] + axes[l]),
                tuple(axes[k] - axes[l]),
            )
        )
    return frames


def frame_set(n: int) -> np.ndarray:
    """Orthogonal lattice direction frames, shape ``(F, n, n)``.

    The first frame is always the coordinate frame.
    """
    if n == 1:
        return np.array([[[1]]])
    builders = {2: _frames_2d, 3: _frames_3d, 4: _frames_4d}
    if n not in builders:
        raise ValueError(f"no frame set for dimension {n}")
    frames = np.array(builders[n](), dtype=np.int64)
    for fr in frames:
        gram = fr @ fr.T
        assert np.all(gram == np.diag(np.diag(gram))), fr
    return frames


def frame_reach(frames: np.ndarray) -> int:
    return int(np.abs(frames).max())


def write_csv(path, grid: TensorGrid, columns: dict[str, np.ndarray], fmt="%.17g") -> None:
    """Node table: one coordinate column per axis followed by ``columns``."""
    pts = grid.points()
    names = [f"x{i + 1}" for i in range(grid.n)] + list(columns)
    data = [pts] + [np.asarray(c).reshape(-1, 1).astype(float) for c in columns.values()]
    table = np.hstack(data)
    np.savetxt(path, table, delimiter=",", header=",".join(names), comments="", fmt=fmt)


def write_vtk(path, grid: TensorGrid, arrays: dict[str, np.ndarray], title="ma_forge field") -> None:
    """Legacy ASCII VTK ``STRUCTURED_POINTS`` file (3D grids only)."""
    if grid.n != 3:
        raise ValueError("VTK export is defined for 3D grids")
    m, h = grid.m, grid.h
    lines = [
        "# vtk DataFile Version 3.0",
        title,
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        f"DIMENSIONS {m} {m} {m}",
        f"ORIGIN {-grid.R!r} {-grid.R!r} {-grid.R!r}",
        f"SPACING {h!r} {h!r} {h!r}",
        f"POINT_DATA {grid.size}",
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
        for name, arr in arrays.items():
            # VTK expects x varying fastest
            flat = np.asarray(arr, dtype=float).reshape(grid.shape).transpose(2, 1, 0).ravel()
            fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            np.savetxt(fh, flat, fmt="%.10g")
