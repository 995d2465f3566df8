"""Training of the correction operators on unrolled solver trajectories.

The loss unrolls the corrected iterator over a short horizon of time steps,
applying it k times per step (k drawn per sample), and measures the mean
squared error against reference frames. Every operation in the unrolled graph
is linear in the fields, so reverse mode is a chain of the same stencil and
convolution primitives with flipped kernels; gradients are exact up to
rounding and are checked against finite differences in the test suite.
"""

import time
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .conv import conv_forward, conv_input_grad, conv_kernel_grad
from .grid import Field
from .neural import HOperator, NeuralIterator, init_h_operators
from .semi_implicit import PdeProblem, _checked_preconditioner, make_iterator
from .stencils import correlate2d


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 50
    k_min: int = 1
    k_max: int = 20
    horizon: int = 3
    seed: int = 0
    validate_every: int = 1
    val_k: int = 10
    width: int = 4
    depth: int = 3
    init_scale: float = 0.1
    rho_check_every: int = 1
    rho_iters: int = 150

    def __post_init__(self):
        if not (1 <= self.k_min <= self.k_max):
            raise ValueError("need 1 <= k_min <= k_max")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass(eq=False)
class TrajectorySlice:
    """A training sample: a problem instance plus its oracle frames."""

    problem: PdeProblem
    frames: Sequence[Field]


@dataclass
class TrainingData:
    """Train/validation trajectories; frames are full oracle rollouts."""

    train: list
    val: list


@dataclass
class TrainLogEntry:
    epoch: int
    train_loss: Optional[float]
    val_loss: Optional[float]
    wall_time: float
    grad_norm: Optional[float]
    rho_tprime: Optional[float]

    def to_dict(self):
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "wall_time": self.wall_time,
            "grad_norm": self.grad_norm,
            "rho_tprime": self.rho_tprime,
        }


@dataclass
class TrainLog:
    entries: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = float("inf")

    def to_jsonl(self) -> str:
        import json

        return "\n".join(json.dumps(e.to_dict()) for e in self.entries) + "\n"


def _unrolled(hs, problem: PdeProblem, frames, k: int, n_t: int, want_tape: bool):
    """Forward rollout; optionally records everything backward needs.

    Each time step rebuilds the constant term from the current state (the
    model's own previous output from the second step on) and applies the
    corrected iterator exactly k times, warm-started.
    """
    if len(frames) < n_t + 1:
        raise ValueError(f"trajectory slice needs {n_t + 1} frames, got {len(frames)}")
    if k < 1 or n_t < 1:
        raise ValueError("k and n_t must be >= 1")
    if len(hs) != len(problem.terms):
        raise ValueError("model term count does not match the sample's problem")
    base = make_iterator(problem, frames[0])
    glam = base._glam
    n_nodes = problem.grid.n_nodes
    s = frames[0].as_2d().copy()
    total = 0.0
    tape = []
    for n in range(1, n_t + 1):
        if n > 1:
            base = base.advance_c(Field(problem.grid, s))
        iter_caches = []
        u = s
        for _ in range(k):
            p = base._psi2d(u)
            w = p - u
            corr = np.zeros_like(w)
            mids = []
            for i, h in enumerate(hs):
                x = w[None]
                layer_inputs = []
                for wgt in h.layers:
                    layer_inputs.append(x)
                    x = conv_forward(x, wgt)
                corr += glam[i] * x[0]
                mids.append(layer_inputs)
            if want_tape:
                iter_caches.append((w, mids))
            u = p + corr
        diff = u - frames[n].as_2d()
        total += float(np.mean(diff * diff))
        if want_tape:
            tape.append({"iters": iter_caches, "diff": diff})
        s = u
    loss_val = total / n_t
    if not want_tape:
        return loss_val, None
    return loss_val, {"tape": tape, "glam": glam, "offk": base._offk, "n_nodes": n_nodes}


def loss(model: NeuralIterator, sample: TrajectorySlice, k: int, n_t: int) -> float:
    """Unrolled mean-squared error over n_t time steps at k iterations each."""
    val, _ = _unrolled(model.hs, sample.problem, list(sample.frames), k, n_t, False)
    return val


def zero_grads(hs) -> list:
    return [[np.zeros_like(w) for w in h.layers] for h in hs]


def loss_and_grad(model: NeuralIterator, sample: TrajectorySlice, k: int, n_t: int):
    """Loss plus the exact reverse-mode gradient w.r.t. every kernel entry."""
    problem = sample.problem
    hs = model.hs
    val, ctx = _unrolled(hs, problem, list(sample.frames), k, n_t, True)
    glam = ctx["glam"]
    adjk = [kk[::-1, ::-1] for kk in ctx["offk"]]
    shape = problem.grid.shape
    m = problem.mask.as_2d()
    theta2 = [t.theta.as_2d() for t in problem.terms]
    full_k_adj = [t.op.kernel[::-1, ::-1] for t in problem.terms]
    scales = [1.0 / problem.grid.dx ** t.op.order for t in problem.terms]
    pre = _checked_preconditioner(problem).reshape(shape)
    n_nodes = ctx["n_nodes"]
    grads = zero_grads(hs)
    sbar = np.zeros(shape)
    for n in range(n_t, 0, -1):
        rec = ctx["tape"][n - 1]
        sbar = sbar + (2.0 / (n_t * n_nodes)) * rec["diff"]
        cbar = np.zeros(shape)
        ubar = sbar
        for _, mids in reversed(rec["iters"]):
            gbar = ubar
            wbar = np.zeros(shape)
            for i, h in enumerate(hs):
                gk = (glam[i] * gbar)[None]
                layer_inputs = mids[i]
                for li in range(len(h.layers) - 1, -1, -1):
                    grads[i][li] += conv_kernel_grad(layer_inputs[li], gk)
                    gk = conv_input_grad(gk, h.layers[li])
                wbar += gk[0]
            pbar = gbar + wbar
            cbar += m * pbar
            unew = np.zeros(shape)
            for gl, ka in zip(glam, adjk):
                unew += correlate2d(gl * pbar, ka)
            ubar = unew - wbar
        # adjoint of c = P^{-1}(s + dt(1-eps) sum_i theta_i F_i s / dx^p)
        z = cbar / pre
        sprev = ubar + z
        wgt = problem.dt * (1.0 - problem.eps)
        if wgt != 0.0:
            for th, ka, sc in zip(theta2, full_k_adj, scales):
                sprev = sprev + wgt * sc * correlate2d(th * z, ka)
        sbar = sprev
    return val, grads


def grad(model: NeuralIterator, sample: TrajectorySlice, k: int, n_t: int) -> list:
    """Gradient only; same nested shapes as the model kernels."""
    _, g = loss_and_grad(model, sample, k, n_t)
    return g


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def for_model(cls, hs) -> "AdamState":
        return cls(m=zero_grads(hs), v=zero_grads(hs), step=0)


@dataclass
class TrainCheckpoint:
    """Everything needed to continue a run as if it had not stopped."""

    epoch: int
    hs: tuple
    adam: AdamState
    best_hs: tuple
    best_val: float
    best_epoch: int

    def to_json(self) -> str:
        import json

        def nest(gs):
            return [[a.tolist() for a in gh] for gh in gs]

        return json.dumps({
            "kind": "sipde-train-checkpoint",
            "epoch": self.epoch,
            "hs": [[w.tolist() for w in h.layers] for h in self.hs],
            "best_hs": [[w.tolist() for w in h.layers] for h in self.best_hs],
            "adam_m": nest(self.adam.m),
            "adam_v": nest(self.adam.v),
            "adam_step": self.adam.step,
            "best_val": self.best_val,
            "best_epoch": self.best_epoch,
        })

    @classmethod
    def from_json(cls, text: str) -> "TrainCheckpoint":
        import json

        doc = json.loads(text)
        if doc.get("kind") != "sipde-train-checkpoint":
            raise ValueError("not a training checkpoint")

        def hs_of(key):
            return tuple(
                HOperator(tuple(np.asarray(w) for w in layers)) for layers in doc[key]
            )

        def nest(key):
            return [[np.asarray(a) for a in gh] for gh in doc[key]]

        return cls(
            epoch=int(doc["epoch"]),
            hs=hs_of("hs"),
            adam=AdamState(m=nest("adam_m"), v=nest("adam_v"),
                           step=int(doc["adam_step"])),
            best_hs=hs_of("best_hs"),
            best_val=float(doc["best_val"]),
            best_epoch=int(doc["best_epoch"]),
        )


def adam_step(state: AdamState, hs, grads, config: TrainConfig):
    """One bias-corrected Adam update; returns (new hs, new state)."""
    for gh in grads:
        for ga in gh:
            if not np.all(np.isfinite(ga)):
                raise FloatingPointError("non-finite gradient; aborting the update")
    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    new_hs, new_m, new_v = [], [], []
    for h, gh, mh, vh in zip(hs, grads, state.m, state.v):
        layers, ms, vs = [], [], []
        for wgt, g, m0, v0 in zip(h.layers, gh, mh, vh):
            m1 = b1 * m0 + (1 - b1) * g
            v1 = b2 * v0 + (1 - b2) * g * g
            m_hat = m1 / (1 - b1 ** t)
            v_hat = v1 / (1 - b2 ** t)
            layers.append(wgt - config.lr * m_hat / (np.sqrt(v_hat) + config.adam_eps))
            ms.append(m1)
            vs.append(v1)
        new_hs.append(HOperator(tuple(layers)))
        new_m.append(ms)
        new_v.append(vs)
    return new_hs, AdamState(m=new_m, v=new_v, step=t)


def _check_shared_structure(data: TrainingData):
    trajs = list(data.train) + list(data.val)
    if not data.train:
        raise ValueError("training split is empty")
    ref = trajs[0].problem
    for t in trajs:
        p = t.problem
        if (
            p.grid != ref.grid
            or p.dt != ref.dt
            or p.eps != ref.eps
            or len(p.terms) != len(ref.terms)
        ):
            raise ValueError("all trajectories must share grid, dt, eps and term count")
        for a, b in zip(p.terms, ref.terms):
            if not np.array_equal(a.op.kernel, b.op.kernel) or a.op.order != b.op.order:
                raise ValueError("all trajectories must share the stencil set")


def _val_loss(hs, val_trajs, config: TrainConfig) -> Optional[float]:
    if not val_trajs:
        return None
    vals = []
    for traj in val_trajs:
        sample = TrajectorySlice(traj.problem, traj.frames[: config.horizon + 1])
        v, _ = _unrolled(hs, traj.problem, list(sample.frames), config.val_k,
                         config.horizon, False)
        vals.append(v)
    return float(np.mean(vals))


def _rho_estimate(hs, problem: PdeProblem, config: TrainConfig) -> float:
    from .grid import zeros as zero_field
    from .linops import spectral_radius
    from .spectral import tprime_map

    it = NeuralIterator(make_iterator(problem, zero_field(problem.grid)), tuple(hs))
    return spectral_radius(tprime_map(it), iters=config.rho_iters, probes=1,
                           seed=config.seed)


def train(data: TrainingData, config: TrainConfig, resume: Optional[TrainCheckpoint] = None):
    """Train the correction operators; returns (best model, TrainLog, checkpoint).

    Per epoch: one window per training trajectory (start index and the
    iteration count k drawn per sample), batched gradient accumulation with
    Adam updates, then a validation pass at fixed k. The returned model is
    the one with the best validation loss, which at epoch 0 is exactly the
    uncorrected semi-implicit baseline. Every per-epoch random draw is seeded
    by (config.seed, epoch), so a run resumed from a checkpoint reproduces
    the log of an uninterrupted run.
    """
    _check_shared_structure(data)
    problem0 = data.train[0].problem
    log = TrainLog()
    t_start = time.perf_counter()

    def snapshot_entry(epoch, train_loss, val_loss, grad_norm, rho):
        log.entries.append(TrainLogEntry(
            epoch=epoch, train_loss=train_loss, val_loss=val_loss,
            wall_time=time.perf_counter() - t_start,
            grad_norm=grad_norm, rho_tprime=rho,
        ))

    if resume is not None:
        hs = resume.hs
        state = resume.adam
        best_hs, best_val, best_epoch = resume.best_hs, resume.best_val, resume.best_epoch
        start_epoch = resume.epoch + 1
    else:
        hs = tuple(init_h_operators(len(problem0.terms), width=config.width,
                                    depth=config.depth, seed=config.seed,
                                    scale=config.init_scale))
        state = AdamState.for_model(hs)
        val0 = _val_loss(hs, data.val, config)
        rho0 = _rho_estimate(hs, problem0, config) if config.rho_check_every else None
        snapshot_entry(0, None, val0, None, rho0)
        best_hs, best_val, best_epoch = hs, val0 if val0 is not None else float("inf"), 0
        start_epoch = 1

    for epoch in range(start_epoch, config.epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(len(data.train))
        sample_losses = []
        batch_gnorms = []
        for b0 in range(0, len(order), config.batch_size):
            batch = order[b0:b0 + config.batch_size]
            acc = None
            for idx in batch:
                traj = data.train[int(idx)]
                hi = len(traj.frames) - config.horizon
                start = int(rng.integers(0, hi))
                kk = int(rng.integers(config.k_min, config.k_max + 1))
                sample = TrajectorySlice(
                    traj.problem, traj.frames[start:start + config.horizon + 1])
                model = NeuralIterator(
                    make_iterator(sample.problem, sample.frames[0]), hs)
                lv, g = loss_and_grad(model, sample, kk, config.horizon)
                sample_losses.append(lv)
                if acc is None:
                    acc = g
                else:
                    for ah, gh in zip(acc, g):
                        for a, gg in zip(ah, gh):
                            a += gg
            scale = 1.0 / len(batch)
            for ah in acc:
                for a in ah:
                    a *= scale
            batch_gnorms.append(float(np.sqrt(sum(
                float(np.sum(a * a)) for ah in acc for a in ah))))
            hs, state = adam_step(state, hs, acc, config)
            hs = tuple(hs)
        val = None
        if config.validate_every and epoch % config.validate_every == 0:
            val = _val_loss(hs, data.val, config)
        rho = None
        if config.rho_check_every and epoch % config.rho_check_every == 0:
            rho = _rho_estimate(hs, problem0, config)
            if rho >= 1.0:
                warnings.warn(
                    f"epoch {epoch}: corrected iterator estimate rho={rho:.4f} >= 1",
                    RuntimeWarning,
                )
        snapshot_entry(epoch, float(np.mean(sample_losses)), val,
                       float(np.mean(batch_gnorms)), rho)
        if val is not None and val < best_val:
            best_hs, best_val, best_epoch = hs, val, epoch
    log.best_epoch = best_epoch
    log.best_val_loss = best_val
    model = NeuralIterator(
        make_iterator(problem0, data.train[0].frames[0]), tuple(best_hs))
    ckpt = TrainCheckpoint(epoch=config.epochs, hs=tuple(hs), adam=state,
                           best_hs=tuple(best_hs), best_val=best_val,
                           best_epoch=best_epoch)
    return model, log, ckpt
