"""Uniform 2-D grid, scalar fields, and the Dirichlet boundary projection.

Fields are stored row-major (index = iy*nx + ix) so that serialization and
stencil indexing are unambiguous. The boundary is the outermost one-node ring.
"""

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Grid2D:
    """Uniform rectangular node grid with spacing dx in both axes."""

    nx: int
    ny: int
    dx: float

    def __post_init__(self):
        if self.nx < 3 or self.ny < 3:
            raise ValueError(f"grid must be at least 3x3, got {self.nx}x{self.ny}")
        if not (self.dx > 0):
            raise ValueError(f"grid spacing must be positive, got {self.dx}")

    @property
    def n_nodes(self) -> int:
        return self.nx * self.ny

    @property
    def shape(self) -> tuple[int, int]:
        """(ny, nx), the shape of a field viewed as a 2-D array."""
        return (self.ny, self.nx)


@dataclass(eq=False)
class Field:
    """A scalar field on a Grid2D, values flattened row-major."""

    grid: Grid2D
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.shape == self.grid.shape:
            vals = vals.reshape(-1)
        if vals.shape != (self.grid.n_nodes,):
            raise ValueError(
                f"field length {vals.size} does not match grid {self.grid.nx}x{self.grid.ny}"
            )
        if not np.all(np.isfinite(vals)):
            raise ValueError("field values must be finite")
        self.values = vals

    def as_2d(self) -> np.ndarray:
        """(ny, nx) view of the values; no copy."""
        return self.values.reshape(self.grid.shape)

    def copy(self) -> "Field":
        return Field(self.grid, self.values.copy())


def zeros(grid: Grid2D) -> Field:
    return Field(grid, np.zeros(grid.n_nodes))


def full(grid: Grid2D, value: float) -> Field:
    return Field(grid, np.full(grid.n_nodes, float(value)))


def from_function(grid: Grid2D, fn) -> Field:
    """Evaluate fn(x, y) at node coordinates (ix*dx, iy*dx)."""
    ix = np.arange(grid.nx) * grid.dx
    iy = np.arange(grid.ny) * grid.dx
    xx, yy = np.meshgrid(ix, iy)
    return Field(grid, np.asarray(fn(xx, yy), dtype=np.float64).reshape(-1))


@dataclass(eq=False)
class BoundaryMask:
    """Binary mask: 1 on interior nodes, 0 on the outermost node ring."""

    grid: Grid2D
    mask: np.ndarray = field(repr=False)

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=np.float64).reshape(-1)
        if m.shape != (self.grid.n_nodes,):
            raise ValueError("mask length does not match grid")
        if not np.all((m == 0.0) | (m == 1.0)):
            raise ValueError("mask entries must be 0 or 1")
        self.mask = m

    def as_2d(self) -> np.ndarray:
        return self.mask.reshape(self.grid.shape)


def make_boundary_mask(grid: Grid2D) -> BoundaryMask:
    """Mask with 0 on the outermost node ring and 1 on all interior nodes."""
    m = np.zeros(grid.shape)
    m[1:-1, 1:-1] = 1.0
    return BoundaryMask(grid, m.reshape(-1))


def project(mask: BoundaryMask, interior: Field, boundary: Field) -> Field:
    """Blend two fields through the mask: mask*interior + (1-mask)*boundary.

    Because the mask is exactly 0/1, boundary values pass through bit-exact.
    """
    if interior.grid != mask.grid or boundary.grid != mask.grid:
        raise ValueError("project requires all fields on the same grid")
    m = mask.mask
    return Field(mask.grid, m * interior.values + (1.0 - m) * boundary.values)


def norm(f: Field, kind: str = "l2") -> float:
    """Field norm: 'inf' (max abs), 'l2' (Euclidean), or 'mse' (mean square)."""
    v = f.values
    if kind == "inf":
        return float(np.max(np.abs(v))) if v.size else 0.0
    if kind == "l2":
        return float(np.linalg.norm(v))
    if kind == "mse":
        return float(np.mean(v * v))
    raise ValueError(f"unknown norm kind {kind!r}")
