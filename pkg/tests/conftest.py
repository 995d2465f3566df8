import numpy as np
import pytest

from sipde.grid import Field, Grid2D, make_boundary_mask, zeros
from sipde.neural import HOperator
from sipde.semi_implicit import PdeProblem, PdeTerm
from sipde.stencils import apply as stencil_apply
from sipde.stencils import central_diff_ops_2d


def dense_semi_implicit_solve(problem, u_t):
    """Independent oracle: assemble the implicit system from the full
    stencils and solve directly, with boundary rows pinned."""
    n = problem.grid.n_nodes
    a = np.zeros((n, n))
    e = np.zeros(n)
    for j in range(n):
        e[j] = 1.0
        acc = np.zeros(n)
        for t in problem.terms:
            acc += (t.theta.values / problem.grid.dx ** t.op.order
                    * stencil_apply(t.op, Field(problem.grid, e)).values)
        a[:, j] = acc
        e[j] = 0.0
    lhs = np.eye(n) - problem.dt * problem.eps * a
    rhs = (np.eye(n) + problem.dt * (1 - problem.eps) * a) @ u_t.values
    ring = problem.mask.mask == 0
    lhs[ring, :] = 0.0
    lhs[ring, ring] = 1.0
    rhs[ring] = problem.boundary.values[ring]
    return np.linalg.solve(lhs, rhs)


def const_field(grid, value):
    return Field(grid, np.full(grid.n_nodes, float(value)))


def advection_diffusion(grid, vx=1.0, vy=1.0, dxx=0.5, dyy=0.5, eps=0.9, dt=0.2,
                        boundary=None):
    """The four-term advection-diffusion problem used throughout the tests."""
    ops = central_diff_ops_2d()
    terms = [
        PdeTerm(const_field(grid, vx), ops.dx),
        PdeTerm(const_field(grid, vy), ops.dy),
        PdeTerm(const_field(grid, dxx), ops.dxx),
        PdeTerm(const_field(grid, dyy), ops.dyy),
    ]
    b = boundary if boundary is not None else zeros(grid)
    return PdeProblem(grid, make_boundary_mask(grid), terms, b, eps, dt)


def random_problem(grid, rng, eps=0.9, dt=0.2):
    """Coefficients drawn from the experiment distributions."""
    return advection_diffusion(
        grid,
        vx=rng.uniform(-2, 2), vy=rng.uniform(-2, 2),
        dxx=rng.uniform(0.2, 0.8), dyy=rng.uniform(0.2, 0.8),
        eps=eps, dt=dt,
    )


def random_field(grid, rng, scale=1.0):
    return Field(grid, rng.standard_normal(grid.n_nodes) * scale)


def random_h(rng, width=4, depth=3, scale=0.3):
    layers = []
    for i in range(depth):
        c_in = 1 if i == 0 else width
        c_out = 1 if i == depth - 1 else width
        layers.append(rng.standard_normal((c_out, c_in, 3, 3)) * scale)
    return HOperator(tuple(layers))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def grid8():
    return Grid2D(8, 8, 0.3)


@pytest.fixture
def grid16():
    return Grid2D(16, 16, 2 * np.pi / 16)
