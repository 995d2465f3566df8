"""Matrix-free linear operators: spectral norm, spectral radius, densification.

Operators act on flat float64 vectors. The norm estimator runs power iteration
on A^T A and reads the Rayleigh quotient; the radius estimator renormalizes
every step and fits a geometric growth rate over the tail of the iteration,
which stays stable when the dominant eigenpair is complex.
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


class PowerIterationError(RuntimeError):
    """Power iteration failed to reach the requested tolerance."""

    def __init__(self, msg, iterations=None, rel_change=None):
        super().__init__(msg)
        self.iterations = iterations
        self.rel_change = rel_change


@dataclass
class LinearMap:
    """A linear operator given by function handles on flat vectors."""

    forward: Callable[[np.ndarray], np.ndarray]
    adjoint: Optional[Callable[[np.ndarray], np.ndarray]] = None
    dim: int = 0

    def __post_init__(self):
        if self.dim <= 0:
            raise ValueError("LinearMap.dim must be positive")


def _power_norm(
    lin: LinearMap,
    max_iter: int,
    seed: int,
    rtol: float,
    window: int = 10,
    atol: float = 0.0,
    block: int = 4,
):
    """Block power iteration on A^T A from a seeded random start.

    A small orthonormal block absorbs clustered singular values that stall
    the single-vector iteration; the estimate is the square root of the top
    Ritz value. Returns (sigma, iterations, rel_change) where rel_change is
    the relative movement of the estimate across the final `window`
    iterations. Estimates at or below `atol` are accepted immediately
    (near-zero maps whose Ritz sequence is rounding noise).
    """
    if lin.adjoint is None:
        raise ValueError("op_norm requires an adjoint handle")
    rng = np.random.default_rng(seed)
    b = max(1, min(block, lin.dim))
    q, _ = np.linalg.qr(rng.standard_normal((lin.dim, b)))
    sigma = 0.0
    history = []
    for it in range(1, max_iter + 1):
        z = np.empty_like(q)
        for j in range(b):
            z[:, j] = lin.adjoint(lin.forward(q[:, j]))
        gram = q.T @ z
        lam = float(np.linalg.eigvalsh((gram + gram.T) * 0.5)[-1])
        if lam <= 0.0:
            return 0.0, it, 0.0
        sigma = np.sqrt(lam)
        if sigma <= atol:
            return sigma, it, 0.0
        history.append(sigma)
        if len(history) > window:
            history.pop(0)
            lo, hi = min(history), max(history)
            rel = (hi - lo) / max(hi, np.finfo(float).tiny)
            if rel <= rtol:
                return sigma, it, rel
        q, _ = np.linalg.qr(z)
    lo, hi = min(history), max(history)
    rel = (hi - lo) / max(hi, np.finfo(float).tiny)
    return sigma, max_iter, rel


def op_norm(lin: LinearMap, iters: int = 10000, seed: int = 0, rtol: float = 1e-12) -> float:
    """Spectral-norm estimate of `lin` by power iteration on A^T A."""
    sigma, _, _ = _power_norm(lin, iters, seed, rtol)
    return sigma


def spectral_radius(
    lin: LinearMap,
    iters: int = 2000,
    probes: int = 3,
    seed: int = 0,
) -> float:
    """Spectral-radius estimate: renormalized iteration with a geometric fit.

    For each probe the growth factors |A v_m| are recorded; the estimate is the
    geometric mean over the last quarter of the iteration, which averages out
    the oscillation caused by complex dominant pairs. Returns the max over
    probes; +inf if the iteration produces non-finite values.
    """
    best = 0.0
    for p in range(probes):
        rng = np.random.default_rng(seed + 7919 * p)
        v = rng.standard_normal(lin.dim)
        v /= np.linalg.norm(v)
        growth = np.empty(iters)
        dead = False
        for m in range(iters):
            w = lin.forward(v)
            g = np.linalg.norm(w)
            if not np.isfinite(g):
                return float("inf")
            if g == 0.0:
                dead = True
                break
            growth[m] = g
            v = w / g
        if dead:
            continue
        tail = growth[-max(1, iters // 4):]
        est = float(np.exp(np.mean(np.log(tail))))
        best = max(best, est)
    return best


def densify(lin: LinearMap, max_dim: int = 4096) -> np.ndarray:
    """Materialize the operator column by column with unit impulses."""
    if lin.dim > max_dim:
        raise ValueError(f"densify guard: dim {lin.dim} exceeds {max_dim}")
    cols = np.empty((lin.dim, lin.dim))
    e = np.zeros(lin.dim)
    for j in range(lin.dim):
        e[j] = 1.0
        cols[:, j] = lin.forward(e)
        e[j] = 0.0
    return cols
