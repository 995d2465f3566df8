"""Spectral certification of iterators: norms, radii, bounds, diagnostics.

Everything here treats iterators through their homogeneous linear parts. The
matrix-free estimators live in `linops`; this module wires them to the
semi-implicit map T, the corrected map T', and the per-term correction
operators, and adds the norm-bound chain and the hyper-sphere diagnostic.
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .conv import adjoint_weights, conv_forward
from .grid import zeros as zero_field
from .linops import LinearMap, _power_norm, densify, op_norm, spectral_radius
from .neural import HOperator, NeuralIterator
from .semi_implicit import (
    PdeProblem,
    SemiImplicitIterator,
    build_lambdas,
    make_iterator,
    validity_condition,
    t_linear_map,
)
from .stencils import off_diag_linear_map, off_diag_norm

__all__ = [
    "LinearMap",
    "SpectralReport",
    "op_norm",
    "spectral_radius",
    "densify",
    "t_map",
    "tprime_map",
    "spectral_report",
    "convexity_probe",
    "norm_split_bound",
    "NormSplitBound",
    "sphere_diagnostic",
    "SphereTerm",
]

# power-iteration settings shared by every norm in the bound chain, so that
# identical operators produce identical floats regardless of the entry point
_NORM_ITERS = 60000
_NORM_RTOL = 1e-12
_NORM_ATOL = 1e-13


def _stack_forward(layers, v2d):
    x = v2d[None]
    for w in layers:
        x = conv_forward(x, w)
    return x[0]


def _stack_adjoint(layers, v2d):
    x = v2d[None]
    for w in reversed(layers):
        x = conv_forward(x, adjoint_weights(w))
    return x[0]


def t_map(problem: PdeProblem) -> LinearMap:
    """Homogeneous part T of the plain semi-implicit update."""
    return t_linear_map(make_iterator(problem, zero_field(problem.grid)))


def tprime_map(it: NeuralIterator) -> LinearMap:
    """Homogeneous part T' = T + G sum_i lam_i H_i (T - I) of the corrected update."""
    shape = it.base.problem.grid.shape
    tm = t_linear_map(it.base)
    glam = it.base._glam
    hs = it.hs

    def fwd(v):
        tv = tm.forward(v)
        w2 = (tv - v).reshape(shape)
        acc = tv.reshape(shape).copy()
        for gl, h in zip(glam, hs):
            acc += gl * _stack_forward(h.layers, w2)
        return acc.reshape(-1)

    def adj(v):
        y2 = v.reshape(shape)
        q = np.zeros(shape)
        for gl, h in zip(glam, hs):
            q += _stack_adjoint(h.layers, gl * y2)
        qf = q.reshape(-1)
        return tm.adjoint(v) + tm.adjoint(qf) - qf

    return LinearMap(forward=fwd, adjoint=adj, dim=it.base.problem.grid.n_nodes)


def h_linear_map(h: HOperator, problem: PdeProblem) -> LinearMap:
    """One composed correction stack as an operator on grid fields."""
    shape = problem.grid.shape

    def fwd(v):
        return _stack_forward(h.layers, v.reshape(shape)).reshape(-1)

    def adj(v):
        return _stack_adjoint(h.layers, v.reshape(shape)).reshape(-1)

    return LinearMap(forward=fwd, adjoint=adj, dim=problem.grid.n_nodes)


def _map_sub(a: LinearMap, b: LinearMap) -> LinearMap:
    return LinearMap(
        forward=lambda v: a.forward(v) - b.forward(v),
        adjoint=lambda v: a.adjoint(v) - b.adjoint(v),
        dim=a.dim,
    )


def _chain_norm(lin: LinearMap) -> float:
    sigma, _, _ = _power_norm(lin, _NORM_ITERS, seed=0, rtol=_NORM_RTOL, atol=_NORM_ATOL)
    return sigma


@dataclass
class SpectralReport:
    """Norm and radius estimates for one linear map."""

    norm_estimate: float
    radius_estimate: float
    norm_iterations: int
    norm_residual: float
    radius_probes: int
    certified: bool
    stagnant: bool = False

    def to_dict(self) -> dict:
        return {
            "norm_estimate": self.norm_estimate,
            "radius_estimate": self.radius_estimate,
            "norm_iterations": self.norm_iterations,
            "norm_residual": self.norm_residual,
            "radius_probes": self.radius_probes,
            "certified": self.certified,
            "stagnant": self.stagnant,
        }


def spectral_report(
    lin: LinearMap,
    norm_iters: int = 20000,
    radius_iters: int = 2000,
    probes: int = 3,
    seed: int = 0,
    rtol: float = 1e-11,
) -> SpectralReport:
    """Estimate norm and radius; certified needs a 1e-3 margin below one.

    `stagnant` flags a norm estimate that missed its tolerance within the
    iteration budget.
    """
    sigma, used, rel = _power_norm(lin, norm_iters, seed=seed, rtol=rtol, atol=_NORM_ATOL)
    rho = spectral_radius(lin, iters=radius_iters, probes=probes, seed=seed)
    margin = 1.0 - 1e-3
    return SpectralReport(
        norm_estimate=sigma,
        radius_estimate=rho,
        norm_iterations=used,
        norm_residual=rel,
        radius_probes=probes,
        certified=bool(sigma < margin or rho < margin),
        stagnant=bool(rel > rtol),
    )


def _mixed_tprime_map(
    base: SemiImplicitIterator,
    hs_a: Sequence[HOperator],
    hs_b: Sequence[HOperator],
    mix: float,
) -> LinearMap:
    """T' with each correction operator replaced by the end-to-end mix
    mix*Ha_i + (1-mix)*Hb_i (operator-level interpolation)."""
    shape = base.problem.grid.shape
    tm = t_linear_map(base)
    glam = base._glam

    def fwd(v):
        tv = tm.forward(v)
        w2 = (tv - v).reshape(shape)
        acc = tv.reshape(shape).copy()
        for gl, ha, hb in zip(glam, hs_a, hs_b):
            mixed = mix * _stack_forward(ha.layers, w2) + (1.0 - mix) * _stack_forward(hb.layers, w2)
            acc += gl * mixed
        return acc.reshape(-1)

    return LinearMap(forward=fwd, adjoint=None, dim=base.problem.grid.n_nodes)


def _forward_only_norm(lin: LinearMap, dense_max_dim: int = 1024) -> float:
    if lin.dim > dense_max_dim:
        raise ValueError("convexity probe needs dense materialization; grid too large")
    return float(np.linalg.norm(densify(lin), 2))


def convexity_probe(
    problem: PdeProblem,
    hs_a: Sequence[HOperator],
    hs_b: Sequence[HOperator],
    lambda_mix: float,
) -> tuple[float, float]:
    """Evaluate |T'(mix)| against the convex combination of endpoint norms.

    Interpolation happens on the composed per-term operators, which is the
    parametrization in which the norm is convex; mixing raw stacked-layer
    kernels would test a different, nonconvex parametrization.
    """
    if not (0.0 <= lambda_mix <= 1.0):
        raise ValueError("lambda_mix must lie in [0, 1]")
    if len(hs_a) != len(hs_b) or len(hs_a) != len(problem.terms):
        raise ValueError("operator lists must match the problem term count")
    for ha, hb in zip(hs_a, hs_b):
        if len(ha.layers) != len(hb.layers) or any(
            wa.shape != wb.shape for wa, wb in zip(ha.layers, hb.layers)
        ):
            raise ValueError("hs_a and hs_b must have identical layer shapes")
    base = make_iterator(problem, zero_field(problem.grid))
    lhs = _forward_only_norm(_mixed_tprime_map(base, hs_a, hs_b, lambda_mix))
    na = _forward_only_norm(_mixed_tprime_map(base, hs_a, hs_b, 1.0))
    nb = _forward_only_norm(_mixed_tprime_map(base, hs_a, hs_b, 0.0))
    rhs = lambda_mix * na + (1.0 - lambda_mix) * nb
    return lhs, rhs


@dataclass
class NormSplitBound:
    """Upper bound on |T'| from the per-term norm split."""

    bound: float
    scaled_bound: Optional[float]
    validity: bool
    per_term: list


def norm_split_bound(problem: PdeProblem, hs: Sequence[HOperator]) -> NormSplitBound:
    """sum_i |lam_i| (|S_i - H_i| + |H_i|), plus the parameter-free scaled
    form when the validity condition holds.

    With all-zero correction operators this reduces to the plain contraction
    bound of the semi-implicit update.
    """
    if len(hs) != len(problem.terms):
        raise ValueError("one correction operator per term required")
    lams = build_lambdas(problem)
    validity = validity_condition(problem)
    per_term = []
    total = 0.0
    raw_sum = 0.0
    for lam, term, h in zip(lams, problem.terms, hs):
        s_map = off_diag_linear_map(term.op, problem.grid)
        h_map = h_linear_map(h, problem)
        diff = _chain_norm(_map_sub(s_map, h_map))
        hn = _chain_norm(h_map)
        lmax = float(np.max(np.abs(lam.values)))
        per_term.append({"lam_max": lmax, "diff_norm": diff, "h_norm": hn})
        total += lmax * (diff + hn)
        raw_sum += diff + hn
    scaled = None
    if validity:
        denom = sum(off_diag_norm(t.op, problem.grid) for t in problem.terms)
        if denom > 0.0:
            scaled = raw_sum / denom
    return NormSplitBound(bound=total, scaled_bound=scaled, validity=validity, per_term=per_term)


@dataclass
class SphereTerm:
    """Per-term geometric diagnostic of the correction operator."""

    objective: float
    lower_bound: float
    slack: float


def sphere_diagnostic(problem: PdeProblem, hs: Sequence[HOperator]) -> list[SphereTerm]:
    """objective_i = |S_i - H_i| + |H_i| against its triangle-inequality floor
    |S_i|; the slack is zero exactly on the sphere through 0 and S_i centered
    at S_i/2."""
    if len(hs) != len(problem.terms):
        raise ValueError("one correction operator per term required")
    out = []
    for term, h in zip(problem.terms, hs):
        s_map = off_diag_linear_map(term.op, problem.grid)
        h_map = h_linear_map(h, problem)
        objective = _chain_norm(_map_sub(s_map, h_map)) + _chain_norm(h_map)
        lower = off_diag_norm(term.op, problem.grid)
        out.append(SphereTerm(objective=objective, lower_bound=lower, slack=objective - lower))
    return out
