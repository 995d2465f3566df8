"""Semi-implicit time stepping for linear PDEs as a masked fixed-point iteration.

A problem du/dt = sum_i theta_i * D_i u / dx^p_i is advanced by the blended
rule (u' - u)/dt = eps*F(u') + (1-eps)*F(u). Splitting each stencil into its
diagonal d_i and off-diagonal remainder and dividing by the diagonal
preconditioner turns the implicit system into u' = sum_i lam_i * S_i u' + c,
iterated under a Dirichlet projection:

    u_{m+1} = G(sum_i lam_i * S_i u_m + c) + (I - G) b

The homogeneous part of that update is the linear map T whose spectral radius
governs convergence; two cheap sufficient bounds and a measured estimate are
provided.
"""

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .grid import BoundaryMask, Field, Grid2D
from .linops import LinearMap, spectral_radius
from .stencils import StencilOp, correlate2d, off_diag_norm


class SingularPreconditionerError(ValueError):
    """The diagonal preconditioner has a (near-)zero entry."""


class ConvergenceError(RuntimeError):
    """Fixed-point iteration failed to converge."""

    def __init__(self, msg, iterations=None, residual=None):
        super().__init__(msg)
        self.iterations = iterations
        self.residual = residual


class CertificationError(RuntimeError):
    """The iteration could not be certified convergent (rho(T) >= 1)."""


@dataclass(eq=False)
class PdeTerm:
    """One term theta_i * D_i / dx^p_i of the discretized operator."""

    theta: Field
    op: StencilOp

    @property
    def order(self) -> int:
        return self.op.order


@dataclass(eq=False)
class PdeProblem:
    """A linear PDE instance: terms, boundary data, and scheme parameters."""

    grid: Grid2D
    mask: BoundaryMask
    terms: Sequence[PdeTerm]
    boundary: Field
    eps: float
    dt: float

    def __post_init__(self):
        if not (0.0 < self.eps <= 1.0):
            raise ValueError(f"eps must lie in (0, 1], got {self.eps}")
        if not (self.dt > 0.0):
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.mask.grid != self.grid or self.boundary.grid != self.grid:
            raise ValueError("mask/boundary grid mismatch")
        for t in self.terms:
            if t.theta.grid != self.grid:
                raise ValueError("term coefficient grid mismatch")
        self.terms = tuple(self.terms)


def _preconditioner(problem: PdeProblem) -> np.ndarray:
    """Diagonal of I - dt*eps*sum_j theta_j*d_j/dx^p_j, flat."""
    acc = np.ones(problem.grid.n_nodes)
    for t in problem.terms:
        scale = problem.dt * problem.eps * t.op.central / problem.grid.dx ** t.order
        if scale != 0.0:
            acc -= scale * t.theta.values
    return acc


def _checked_preconditioner(problem: PdeProblem) -> np.ndarray:
    pre = _preconditioner(problem)
    bad = np.abs(pre) < 1e-14
    if np.any(bad):
        j = int(np.argmax(bad))
        ix, iy = j % problem.grid.nx, j // problem.grid.nx
        raise SingularPreconditionerError(
            f"preconditioner vanishes at node {j} (ix={ix}, iy={iy}): {pre[j]:.3e}"
        )
    return pre


def build_lambdas(problem: PdeProblem) -> list[Field]:
    """Per-term diagonal fields lam_i = dt*eps*theta_i/dx^p_i / preconditioner."""
    pre = _checked_preconditioner(problem)
    lams = []
    for t in problem.terms:
        num = problem.dt * problem.eps / problem.grid.dx ** t.order * t.theta.values
        lams.append(Field(problem.grid, num / pre))
    return lams


def build_c(problem: PdeProblem, u_t: Field) -> Field:
    """Constant term of the fixed-point update, preconditioned.

    c = P^{-1} [u_t + dt*(1-eps) * sum_i theta_i * (D_i u_t) / dx^p_i], where
    P is the diagonal preconditioner. The fixed point of the masked update
    with this c solves the semi-implicit system exactly.
    """
    if u_t.grid != problem.grid:
        raise ValueError("u_t grid mismatch")
    pre = _checked_preconditioner(problem)
    acc = u_t.values.copy()
    w = problem.dt * (1.0 - problem.eps)
    if w != 0.0:
        u2 = u_t.as_2d()
        for t in problem.terms:
            scale = w / problem.grid.dx ** t.order
            acc += scale * t.theta.values * correlate2d(u2, t.op.kernel).reshape(-1)
    return Field(problem.grid, acc / pre)


@dataclass(eq=False)
class SemiImplicitIterator:
    """Precomputed state for the masked fixed-point update at one time level."""

    problem: PdeProblem
    lambdas: tuple
    c: Field

    def __post_init__(self):
        self.lambdas = tuple(self.lambdas)
        if len(self.lambdas) != len(self.problem.terms):
            raise ValueError("one lambda field per PDE term required")
        m = self.problem.mask.as_2d()
        # mask folded into the lambdas and the constant: exact because the
        # mask is binary, and it removes the projection pass per iteration
        self._glam = [m * lam.as_2d() for lam in self.lambdas]
        self._offk = [t.op.off_diag_kernel() for t in self.problem.terms]
        self._kconst = m * self.c.as_2d() + (1.0 - m) * self.problem.boundary.as_2d()

    def advance_c(self, u_t: Field) -> "SemiImplicitIterator":
        """New iterator for the next time level (lambdas are state-independent)."""
        return SemiImplicitIterator(self.problem, self.lambdas, build_c(self.problem, u_t))

    def _psi2d(self, u2: np.ndarray) -> np.ndarray:
        acc = self._kconst.copy()
        for gl, k in zip(self._glam, self._offk):
            acc += gl * correlate2d(u2, k)
        return acc


def make_iterator(problem: PdeProblem, u_t: Field) -> SemiImplicitIterator:
    return SemiImplicitIterator(problem, tuple(build_lambdas(problem)), build_c(problem, u_t))


def psi_apply(it: SemiImplicitIterator, u: Field) -> Field:
    """One masked fixed-point update: G(sum_i lam_i S_i u + c) + (I-G) b."""
    if u.grid != it.problem.grid:
        raise ValueError("field grid mismatch")
    return Field(it.problem.grid, it._psi2d(u.as_2d()))


class FixedPointResult(NamedTuple):
    u: Field
    iters: int
    residual: float


def fixed_point_solve(
    it: SemiImplicitIterator,
    u0: Field,
    tol: float = 1e-12,
    max_iter: int = 100000,
) -> FixedPointResult:
    """Iterate psi until the inf-norm step is below tol*max(1, |u|_inf)."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    u = u0.as_2d().copy()
    for m in range(1, max_iter + 1):
        nxt = it._psi2d(u)
        if not np.all(np.isfinite(nxt)):
            raise ConvergenceError(
                f"iteration diverged to non-finite values at step {m}", iterations=m
            )
        res = float(np.max(np.abs(nxt - u)))
        if res <= tol * max(1.0, float(np.max(np.abs(u)))):
            return FixedPointResult(Field(it.problem.grid, nxt), m, res)
        u = nxt
    raise ConvergenceError(
        f"no convergence after {max_iter} iterations (residual {res:.3e})",
        iterations=max_iter,
        residual=res,
    )


def time_step(problem: PdeProblem, u_t: Field, iters: int) -> Field:
    """Advance one time level with a fixed iteration budget, warm-started at u_t."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    it = make_iterator(problem, u_t)
    u = u_t.as_2d().copy()
    for _ in range(iters):
        u = it._psi2d(u)
    return Field(problem.grid, u)


def contraction_bound(problem: PdeProblem) -> float:
    """Sufficient contraction bound: sum_i max|lam_i| * |S_i|.

    A value below 1 certifies rho(T) < 1; the converse does not hold (the
    bound is often above 1 for instances that still converge).
    """
    lams = build_lambdas(problem)
    total = 0.0
    for lam, t in zip(lams, problem.terms):
        total += float(np.max(np.abs(lam.values))) * off_diag_norm(t.op, problem.grid)
    return total


def validity_condition(problem: PdeProblem) -> bool:
    """max|lam_i| < 1 / sum_j |S_j| for every term i."""
    lams = build_lambdas(problem)
    denom = sum(off_diag_norm(t.op, problem.grid) for t in problem.terms)
    if denom == 0.0:
        return True
    thresh = 1.0 / denom
    return all(float(np.max(np.abs(lam.values))) < thresh for lam in lams)


def t_linear_map(it: SemiImplicitIterator) -> LinearMap:
    """The homogeneous part T of the masked update, as a flat-vector map."""
    shape = it.problem.grid.shape
    glam = it._glam
    offk = it._offk
    adjk = [k[::-1, ::-1] for k in offk]

    def fwd(v):
        u2 = v.reshape(shape)
        acc = np.zeros(shape)
        for gl, k in zip(glam, offk):
            acc += gl * correlate2d(u2, k)
        return acc.reshape(-1)

    def adj(v):
        u2 = v.reshape(shape)
        acc = np.zeros(shape)
        for gl, ka in zip(glam, adjk):
            acc += correlate2d(gl * u2, ka)
        return acc.reshape(-1)

    return LinearMap(forward=fwd, adjoint=adj, dim=it.problem.grid.n_nodes)


@dataclass
class CertificationReport:
    """Outcome of the staged convergence check for a problem instance."""

    validity: bool
    bound: float
    rho: Optional[float]
    certified: bool


def require_convergent(
    problem: PdeProblem,
    override: bool = False,
    rho_iters: int = 600,
    probes: int = 2,
    seed: int = 0,
) -> CertificationReport:
    """Staged convergence certification: the uniform diagonal condition,
    then the norm bound, then
    a measured rho(T) estimate. Raises CertificationError when the measured
    estimate is >= 1 unless override is set.
    """
    validity = validity_condition(problem)
    bound = contraction_bound(problem)
    if validity or bound < 1.0:
        return CertificationReport(validity, bound, None, True)
    it = make_iterator(problem, Field(problem.grid, np.zeros(problem.grid.n_nodes)))
    rho = spectral_radius(t_linear_map(it), iters=rho_iters, probes=probes, seed=seed)
    if rho >= 1.0 and not override:
        raise CertificationError(
            f"measured rho(T) = {rho:.6f} >= 1; refusing (bound {bound:.3f})"
        )
    return CertificationReport(validity, bound, rho, rho < 1.0)
