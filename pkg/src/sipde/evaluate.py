"""Rollout evaluation: corrected vs plain iterator against stored oracles.

Both solvers advance the same trajectories under fixed per-step iteration
budgets, warm-started from their own previous output, and are scored by mean
squared error against the oracle frames. Errors are reported raw and
normalized by each trajectory's initial mean square.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .neural import NeuralIterator, phi_apply
from .semi_implicit import make_iterator, psi_apply


@dataclass
class EvalReport:
    """Per-step error aggregates across test trajectories."""

    steps: list
    neural_iters: int
    semi_iters: int
    mean_neural: list
    mean_semi: list
    pct_neural: dict
    pct_semi: dict
    rows: list = field(default_factory=list, repr=False)
    wall_neural: float = 0.0
    wall_semi: float = 0.0

    def to_dict(self):
        return {
            "steps": self.steps,
            "neural_iters": self.neural_iters,
            "semi_iters": self.semi_iters,
            "mean_neural": self.mean_neural,
            "mean_semi": self.mean_semi,
            "pct_neural": self.pct_neural,
            "pct_semi": self.pct_semi,
            "wall_neural": self.wall_neural,
            "wall_semi": self.wall_semi,
        }

    def to_csv(self) -> str:
        lines = ["trajectory,step,mse_neural,mse_semi,nmse_neural,nmse_semi"]
        for r in self.rows:
            lines.append(
                "%d,%d,%.17g,%.17g,%.17g,%.17g" % (
                    r["trajectory"], r["step"], r["mse_neural"], r["mse_semi"],
                    r["nmse_neural"], r["nmse_semi"])
            )
        return "\n".join(lines) + "\n"


def rollout_mse(problem, frames, hs, iters: int, steps: int) -> np.ndarray:
    """Per-step MSE of a fixed-budget rollout against oracle frames.

    hs None runs the plain semi-implicit iterator; otherwise the corrected
    one. Warm start from the previous output; the constant term is rebuilt
    from that output each step.
    """
    if len(frames) < steps + 1:
        raise ValueError(f"trajectory has {len(frames)} frames, need {steps + 1}")
    it = make_iterator(problem, frames[0])
    ni = NeuralIterator(it, hs) if hs is not None else None
    u = frames[0]
    out = np.empty(steps)
    for n in range(1, steps + 1):
        if n > 1:
            it = it.advance_c(u)
            if ni is not None:
                ni = NeuralIterator(it, hs)
        for _ in range(iters):
            u = phi_apply(ni, u) if ni is not None else psi_apply(it, u)
        diff = u.values - frames[n].values
        out[n - 1] = float(np.mean(diff * diff))
    return out


def evaluate_model(dataset, hs, split: str = "test", neural_iters: int = 10,
                   semi_iters: int = 25, steps: int = 10) -> EvalReport:
    """Score the corrected iterator against the plain one on a dataset split."""
    trajs = dataset.trajectories(split)
    if not trajs:
        raise ValueError(f"dataset has no '{split}' trajectories")
    per_step_n = []
    per_step_s = []
    rows = []
    wall_n = wall_s = 0.0
    for t in trajs:
        denom = float(np.mean(t.frames[0].values ** 2))
        if denom <= 0.0:
            denom = 1.0
        t0 = time.perf_counter()
        mn = rollout_mse(t.problem, t.frames, hs, neural_iters, steps)
        t1 = time.perf_counter()
        ms = rollout_mse(t.problem, t.frames, None, semi_iters, steps)
        t2 = time.perf_counter()
        wall_n += t1 - t0
        wall_s += t2 - t1
        per_step_n.append(mn)
        per_step_s.append(ms)
        for j in range(steps):
            rows.append({
                "trajectory": t.index, "step": j + 1,
                "mse_neural": mn[j], "mse_semi": ms[j],
                "nmse_neural": mn[j] / denom, "nmse_semi": ms[j] / denom,
            })
    mat_n = np.vstack(per_step_n)
    mat_s = np.vstack(per_step_s)

    def pct(mat):
        q = np.percentile(mat, [25, 50, 75], axis=0)
        return {"p25": q[0].tolist(), "p50": q[1].tolist(), "p75": q[2].tolist()}

    return EvalReport(
        steps=list(range(1, steps + 1)),
        neural_iters=neural_iters,
        semi_iters=semi_iters,
        mean_neural=mat_n.mean(axis=0).tolist(),
        mean_semi=mat_s.mean(axis=0).tolist(),
        pct_neural=pct(mat_n),
        pct_semi=pct(mat_s),
        rows=rows,
        wall_neural=wall_n,
        wall_semi=wall_s,
    )
