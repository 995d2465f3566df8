import numpy as np
import pytest

from sipde.grid import Field, Grid2D, zeros
from sipde.linops import LinearMap, densify, op_norm, spectral_radius
from sipde.neural import NeuralIterator, embed_off_diag_stencils, zero_h_operators
from sipde.semi_implicit import contraction_bound, make_iterator, validity_condition
from sipde.spectral import (
    convexity_probe,
    norm_split_bound,
    sphere_diagnostic,
    spectral_report,
    t_map,
    tprime_map,
)

from conftest import random_h, random_problem


def scaled_identity(dim, alpha):
    return LinearMap(forward=lambda v: alpha * v, adjoint=lambda v: alpha * v, dim=dim)


def test_op_norm_identity_and_scaling():
    assert op_norm(scaled_identity(50, 1.0), seed=1) == pytest.approx(1.0, abs=1e-10)
    assert op_norm(scaled_identity(50, -2.5), seed=1) == pytest.approx(2.5, abs=1e-9)


def test_op_norm_requires_adjoint():
    lin = LinearMap(forward=lambda v: v, adjoint=None, dim=4)
    with pytest.raises(ValueError):
        op_norm(lin)


def test_op_norm_matches_dense_svd(grid8, rng):
    for _ in range(5):
        p = random_problem(grid8, rng)
        tm = t_map(p)
        sv = np.linalg.norm(densify(tm), 2)
        est = op_norm(tm, seed=2)
        assert abs(est - sv) <= 1e-6 * sv


def test_spectral_radius_zero_map():
    lin = LinearMap(forward=lambda v: np.zeros_like(v), adjoint=None, dim=30)
    assert spectral_radius(lin, iters=50, probes=2, seed=0) == 0.0


def test_spectral_radius_zero_theta(grid8):
    from sipde.semi_implicit import PdeProblem, PdeTerm
    from sipde.grid import make_boundary_mask
    from sipde.stencils import central_diff_ops_2d

    ops = central_diff_ops_2d()
    p = PdeProblem(grid8, make_boundary_mask(grid8),
                   [PdeTerm(zeros(grid8), ops.dxx)], zeros(grid8), 0.9, 0.2)
    assert spectral_radius(t_map(p), iters=50, probes=2, seed=0) == 0.0


def test_spectral_radius_matches_dense_eig(grid8, rng):
    for s in range(5):
        p = random_problem(grid8, rng)
        tm = t_map(p)
        rho_dense = float(np.abs(np.linalg.eigvals(densify(tm))).max())
        rho_est = spectral_radius(tm, iters=3000, probes=3, seed=s)
        assert abs(rho_est - rho_dense) <= 1e-4 * max(rho_dense, 1e-12)


def test_spectral_radius_overflow_sentinel():
    def blow_up(v):
        return np.full_like(v, np.inf)

    lin = LinearMap(forward=blow_up, adjoint=None, dim=10)
    assert spectral_radius(lin, iters=5, probes=1, seed=0) == float("inf")


def test_densify_identity():
    lin = scaled_identity(12, 1.0)
    assert np.array_equal(densify(lin), np.eye(12))


def test_densify_guard():
    lin = scaled_identity(100, 1.0)
    with pytest.raises(ValueError):
        densify(lin, max_dim=50)


def test_densify_transpose_equals_adjoint_densified(grid8, rng):
    p = random_problem(grid8, rng)
    tm = t_map(p)
    fwd = densify(tm)
    adj = densify(LinearMap(tm.adjoint, tm.forward, dim=tm.dim))
    assert np.abs(fwd.T - adj).max() <= 1e-13


def test_densify_tprime_assembly(rng):
    g6 = Grid2D(6, 6, 0.4)
    p = random_problem(g6, rng)
    hs = [random_h(rng, width=2) for _ in range(4)]
    it = make_iterator(p, zeros(g6))
    ni = NeuralIterator(it, hs)
    from sipde.neural import h_apply
    from sipde.semi_implicit import build_lambdas

    t_dense = densify(t_map(p))
    tp_dense = densify(tprime_map(ni))
    m = p.mask.mask
    acc = t_dense.copy()
    for lam, h in zip(build_lambdas(p), hs):
        h_dense = densify(LinearMap(
            lambda v, h=h: h_apply(h, Field(g6, v)).values, None, dim=36))
        acc += (m[:, None] * lam.values[:, None] * h_dense) @ (t_dense - np.eye(36))
    assert np.abs(tp_dense - acc).max() <= 1e-12


def test_tprime_map_adjoint_consistency(grid8, rng):
    p = random_problem(grid8, rng)
    ni = NeuralIterator(make_iterator(p, zeros(grid8)), [random_h(rng) for _ in range(4)])
    tp = tprime_map(ni)
    for _ in range(5):
        v = rng.standard_normal(tp.dim)
        w = rng.standard_normal(tp.dim)
        lhs = tp.forward(v) @ w
        rhs = v @ tp.adjoint(w)
        assert abs(lhs - rhs) <= 1e-11 * np.linalg.norm(v) * np.linalg.norm(w)


def test_spectral_report_fields(grid8, rng):
    p = random_problem(grid8, rng)
    rep = spectral_report(t_map(p), norm_iters=4000, radius_iters=1500, seed=1)
    assert rep.radius_estimate <= rep.norm_estimate + 1e-6
    assert rep.certified == (rep.norm_estimate < 1 - 1e-3 or rep.radius_estimate < 1 - 1e-3)


def test_convexity_probe_identical_endpoints(grid8, rng):
    p = random_problem(grid8, rng)
    hs = [random_h(rng) for _ in range(4)]
    lhs, rhs = convexity_probe(p, hs, hs, 0.37)
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_convexity_probe_thetas_at_endpoints(grid8, rng):
    p = random_problem(grid8, rng)
    hs_a = [random_h(rng) for _ in range(4)]
    hs_b = [random_h(rng) for _ in range(4)]
    for lam in (0.0, 1.0):
        lhs, rhs = convexity_probe(p, hs_a, hs_b, lam)
        assert lhs == rhs


def test_convexity_probe_inequality(grid8, rng):
    for s in range(10):
        p = random_problem(grid8, rng)
        r = np.random.default_rng(500 + s)
        hs_a = [random_h(r) for _ in range(4)]
        hs_b = [random_h(r) for _ in range(4)]
        lam = float(r.uniform(0, 1))
        lhs, rhs = convexity_probe(p, hs_a, hs_b, lam)
        assert lhs <= rhs + 1e-6


def test_convexity_probe_shape_mismatch(grid8, rng):
    p = random_problem(grid8, rng)
    hs_a = [random_h(rng, width=4) for _ in range(4)]
    hs_b = [random_h(rng, width=2) for _ in range(4)]
    with pytest.raises(ValueError):
        convexity_probe(p, hs_a, hs_b, 0.5)


def test_norm_split_reduces_to_contraction_bound_at_zero_h(grid8, rng):
    for _ in range(3):
        p = random_problem(grid8, rng)
        l2 = norm_split_bound(p, zero_h_operators(4))
        assert abs(l2.bound - contraction_bound(p)) <= 1e-10


def test_norm_split_dominates_tprime_norm(grid8, rng):
    for s in range(3):
        p = random_problem(grid8, rng, dt=0.05)
        hs = [random_h(np.random.default_rng(70 + s + i), scale=0.1) for i in range(4)]
        ni = NeuralIterator(make_iterator(p, zeros(grid8)), hs)
        l2 = norm_split_bound(p, hs)
        tp_norm = op_norm(tprime_map(ni), seed=4)
        assert l2.bound >= tp_norm - 1e-6


def test_norm_split_scaled_form_when_valid(grid8, rng):
    p = random_problem(grid8, rng, dt=0.02)
    assert validity_condition(p)
    hs = [random_h(rng, scale=0.05) for _ in range(4)]
    l2 = norm_split_bound(p, hs)
    assert l2.validity
    assert l2.scaled_bound is not None
    assert l2.scaled_bound > 0


def test_norm_split_embedded_diff_term_vanishes(grid8, rng):
    p = random_problem(grid8, rng)
    l2 = norm_split_bound(p, embed_off_diag_stencils(p))
    for term in l2.per_term:
        assert term["diff_norm"] <= 1e-10


def test_sphere_slack_zero_at_zero_h(grid8, rng):
    p = random_problem(grid8, rng)
    for term in sphere_diagnostic(p, zero_h_operators(4)):
        assert abs(term.slack) <= 1e-8


def test_sphere_slack_zero_at_full_stencil(grid8, rng):
    p = random_problem(grid8, rng)
    for term in sphere_diagnostic(p, embed_off_diag_stencils(p)):
        assert abs(term.slack) <= 1e-8


def test_sphere_slack_zero_at_midpoint(grid8, rng):
    p = random_problem(grid8, rng)
    half = embed_off_diag_stencils(p)
    halved = []
    for h in half:
        layers = list(h.layers)
        layers[0] = layers[0] * 0.5
        halved.append(type(h)(tuple(layers)))
    for term in sphere_diagnostic(p, halved):
        assert abs(term.slack) <= 1e-8


def test_sphere_slack_nonnegative_random(grid8, rng):
    p = random_problem(grid8, rng)
    for s in range(10):
        hs = [random_h(np.random.default_rng(900 + 4 * s + i)) for i in range(4)]
        for term in sphere_diagnostic(p, hs):
            assert term.slack >= -1e-8
