"""Central-difference operators as matrix-free stencil applications.

A stencil is applied as a cross-correlation with zero padding: values outside
the grid read as 0, which enforces a zero Dirichlet condition exactly and
leaves the boundary ring free to carry prescribed values.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.ndimage as ndi

from .grid import Field, Grid2D
from .linops import LinearMap, PowerIterationError, _power_norm


@dataclass(frozen=True, eq=False)
class StencilOp:
    """A differential operator given by an odd square kernel and its order."""

    kernel: np.ndarray
    order: int

    def __post_init__(self):
        k = np.asarray(self.kernel, dtype=np.float64)
        if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0 or k.shape[0] < 3:
            raise ValueError(f"kernel must be odd square of size >= 3, got {k.shape}")
        if not np.all(np.isfinite(k)):
            raise ValueError("kernel entries must be finite")
        if self.order < 1:
            raise ValueError("operator order must be >= 1")
        object.__setattr__(self, "kernel", k)

    @property
    def radius(self) -> int:
        return self.kernel.shape[0] // 2

    @property
    def central(self) -> float:
        """The kernel's center entry (the diagonal of the materialized operator)."""
        r = self.radius
        return float(self.kernel[r, r])

    def off_diag_kernel(self) -> np.ndarray:
        """Kernel with the center entry zeroed."""
        k = self.kernel.copy()
        r = self.radius
        k[r, r] = 0.0
        return k


class CentralDiffOps(NamedTuple):
    dx: StencilOp
    dy: StencilOp
    dxx: StencilOp
    dyy: StencilOp


def central_diff_ops_2d() -> CentralDiffOps:
    """Second-order central-difference stencils for d/dx, d/dy, d2/dx2, d2/dy2.

    x runs along the fast (column) axis of the row-major field, y along rows.
    The 1/dx**order scaling is applied by the solver, not the stencil.
    """
    kx = np.zeros((3, 3))
    kx[1, 0], kx[1, 2] = -0.5, 0.5
    ky = np.zeros((3, 3))
    ky[0, 1], ky[2, 1] = -0.5, 0.5
    kxx = np.zeros((3, 3))
    kxx[1, 0], kxx[1, 1], kxx[1, 2] = 1.0, -2.0, 1.0
    kyy = np.zeros((3, 3))
    kyy[0, 1], kyy[1, 1], kyy[2, 1] = 1.0, -2.0, 1.0
    return CentralDiffOps(
        dx=StencilOp(kx, order=1),
        dy=StencilOp(ky, order=1),
        dxx=StencilOp(kxx, order=2),
        dyy=StencilOp(kyy, order=2),
    )


def _check_fits(op: StencilOp, grid: Grid2D):
    if op.kernel.shape[0] > min(grid.nx, grid.ny):
        raise ValueError(
            f"kernel size {op.kernel.shape[0]} exceeds grid {grid.nx}x{grid.ny}"
        )


def correlate2d(values: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Zero-padded cross-correlation of a 2-D array with a kernel."""
    return ndi.correlate(values, kernel, mode="constant", cval=0.0)


def apply(op: StencilOp, f: Field) -> Field:
    """Apply the stencil to a field (zero padding outside the grid)."""
    _check_fits(op, f.grid)
    return Field(f.grid, correlate2d(f.as_2d(), op.kernel))


def apply_adjoint(op: StencilOp, f: Field) -> Field:
    """Adjoint of `apply`: correlation with the kernel flipped in both axes."""
    _check_fits(op, f.grid)
    return Field(f.grid, correlate2d(f.as_2d(), op.kernel[::-1, ::-1]))


def off_diag_apply(op: StencilOp, f: Field) -> Field:
    """Apply the zero-diagonal part of the stencil (center entry removed)."""
    _check_fits(op, f.grid)
    return Field(f.grid, correlate2d(f.as_2d(), op.off_diag_kernel()))


def off_diag_linear_map(op: StencilOp, grid: Grid2D) -> LinearMap:
    """The zero-padded off-diagonal operator on this grid as a LinearMap."""
    _check_fits(op, grid)
    k = op.off_diag_kernel()
    kf = k[::-1, ::-1]
    shape = grid.shape

    def fwd(v):
        return correlate2d(v.reshape(shape), k).reshape(-1)

    def adj(v):
        return correlate2d(v.reshape(shape), kf).reshape(-1)

    return LinearMap(forward=fwd, adjoint=adj, dim=grid.n_nodes)


_NORM_CACHE: dict = {}


def off_diag_norm(op: StencilOp, grid: Grid2D, max_iter: int = 60000) -> float:
    """Spectral norm of the zero-padded off-diagonal operator on this grid.

    Computed by power iteration on A^T A; deterministic (fixed seed) and
    cached per (kernel, grid). Raises PowerIterationError on stagnation.
    """
    key = (op.off_diag_kernel().tobytes(), grid.nx, grid.ny)
    hit = _NORM_CACHE.get(key)
    if hit is not None:
        return hit
    lin = off_diag_linear_map(op, grid)
    sigma, used, rel = _power_norm(lin, max_iter, seed=0, rtol=1e-12)
    if rel > 1e-8:
        raise PowerIterationError(
            f"off_diag_norm did not converge: rel change {rel:.3e} after {used} iterations",
            iterations=used,
            rel_change=rel,
        )
    _NORM_CACHE[key] = sigma
    return sigma
