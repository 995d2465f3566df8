import numpy as np
import pytest

from sipde.grid import Grid2D
from sipde.neural import HOperator, NeuralIterator, phi_apply, zero_h_operators
from sipde.semi_implicit import fixed_point_solve, make_iterator
from sipde.training import (
    AdamState,
    TrainConfig,
    TrainingData,
    TrajectorySlice,
    adam_step,
    grad,
    loss,
    loss_and_grad,
    train,
    zero_grads,
)

from conftest import random_field, random_h, random_problem


def make_sample(grid, rng, n_frames=3, scale=0.5):
    p = random_problem(grid, rng)
    frames = [random_field(grid, rng, scale=scale) for _ in range(n_frames)]
    return TrajectorySlice(p, frames)


def model_for(sample, hs):
    return NeuralIterator(make_iterator(sample.problem, sample.frames[0]), tuple(hs))


def rollout_frames(sample, hs, k, n_t):
    """Reference rollout using the public iterator ops."""
    out = []
    u = sample.frames[0]
    it = make_iterator(sample.problem, u)
    ni = NeuralIterator(it, hs)
    for n in range(n_t):
        if n > 0:
            ni = ni.advance_c(u)
        for _ in range(k):
            u = phi_apply(ni, u)
        out.append(u)
    return out


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(k_min=5, k_max=2)
    with pytest.raises(ValueError):
        TrainConfig(horizon=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)


def test_loss_zero_when_model_lands_on_frames(grid8, rng):
    p = random_problem(grid8, rng)
    hs = [random_h(rng, scale=0.1) for _ in range(4)]
    u0 = random_field(grid8, rng, scale=0.3)
    sample0 = TrajectorySlice(p, [u0, u0, u0])
    frames = [u0] + rollout_frames(sample0, hs, k=3, n_t=2)
    sample = TrajectorySlice(p, frames)
    lv = loss(model_for(sample, hs), sample, k=3, n_t=2)
    assert lv <= 1e-28


def test_loss_matches_public_rollout(grid8, rng):
    sample = make_sample(grid8, rng, n_frames=4)
    hs = [random_h(rng, scale=0.2) for _ in range(4)]
    ref = rollout_frames(sample, hs, k=2, n_t=3)
    expect = np.mean([
        np.mean((r.values - f.values) ** 2)
        for r, f in zip(ref, sample.frames[1:])
    ])
    lv = loss(model_for(sample, hs), sample, k=2, n_t=3)
    assert lv == pytest.approx(expect, rel=1e-12)


def test_loss_large_k_reaches_converged_step(grid8, rng):
    p = random_problem(grid8, rng, dt=0.05)
    u0 = random_field(grid8, rng, scale=0.3)
    it = make_iterator(p, u0)
    star = fixed_point_solve(it, u0, tol=1e-14).u
    ref = random_field(grid8, rng, scale=0.3)
    sample = TrajectorySlice(p, [u0, ref])
    lv = loss(model_for(sample, zero_h_operators(4)), sample, k=400, n_t=1)
    expect = float(np.mean((star.values - ref.values) ** 2))
    assert lv == pytest.approx(expect, rel=1e-10)


def test_loss_decreases_with_k_for_plain_iterator(grid16, rng):
    vals = {k: [] for k in (1, 4, 16)}
    for s in range(4):
        r = np.random.default_rng(40 + s)
        p = random_problem(grid16, r)
        u0 = random_field(grid16, r, scale=0.2)
        star = fixed_point_solve(make_iterator(p, u0), u0, tol=1e-13).u
        sample = TrajectorySlice(p, [u0, star])
        for k in vals:
            vals[k].append(loss(model_for(sample, zero_h_operators(4)), sample, k, 1))
    means = [np.mean(vals[k]) for k in (1, 4, 16)]
    assert means[0] > means[1] > means[2]


def test_loss_requires_enough_frames(grid8, rng):
    sample = make_sample(grid8, rng, n_frames=2)
    with pytest.raises(ValueError):
        loss(model_for(sample, zero_h_operators(4)), sample, k=1, n_t=2)


def test_grad_shapes_and_finiteness(grid8, rng):
    sample = make_sample(grid8, rng)
    hs = [random_h(rng) for _ in range(4)]
    g = grad(model_for(sample, hs), sample, k=2, n_t=2)
    assert len(g) == 4
    for gh, h in zip(g, hs):
        for ga, w in zip(gh, h.layers):
            assert ga.shape == w.shape
            assert np.all(np.isfinite(ga))
            assert np.abs(ga).max() > 0


def test_grad_matches_finite_differences(grid8, rng):
    sample = make_sample(grid8, rng)
    hs = [random_h(rng, scale=0.2) for _ in range(4)]
    model = model_for(sample, hs)
    k, n_t = 2, 2
    lv, gs = loss_and_grad(model, sample, k, n_t)
    step = 1e-6
    r = np.random.default_rng(4)
    for ti in range(4):
        for li in range(3):
            flat = hs[ti].layers[li].reshape(-1)
            for j in r.choice(flat.size, size=5, replace=False):
                def shifted(delta):
                    layers = [w.copy() for w in hs[ti].layers]
                    layers[li].reshape(-1)[j] += delta
                    hs2 = list(hs)
                    hs2[ti] = HOperator(tuple(layers))
                    return loss(model_for(sample, hs2), sample, k, n_t)

                fd = (shifted(step) - shifted(-step)) / (2 * step)
                an = gs[ti][li].reshape(-1)[j]
                assert abs(fd - an) <= 1e-5 * max(abs(fd), abs(an), 1e-10)


def test_grad_directional_derivative(grid8, rng):
    sample = make_sample(grid8, rng)
    hs = [random_h(rng, scale=0.2) for _ in range(4)]
    lv, gs = loss_and_grad(model_for(sample, hs), sample, 3, 1)
    r = np.random.default_rng(11)
    delta = [[r.standard_normal(w.shape) for w in h.layers] for h in hs]
    ip = sum(float(np.sum(gs[i][l] * delta[i][l])) for i in range(4) for l in range(3))
    eps = 1e-6

    def shifted(sign):
        hs2 = [HOperator(tuple(w + sign * eps * d for w, d in zip(h.layers, dl)))
               for h, dl in zip(hs, delta)]
        return loss(model_for(sample, hs2), sample, 3, 1)

    fd = (shifted(1) - shifted(-1)) / (2 * eps)
    assert abs(ip - fd) <= 1e-5 * max(abs(fd), 1e-10)


def test_adam_zero_gradient_keeps_model(rng):
    hs = [random_h(rng) for _ in range(2)]
    state = AdamState.for_model(hs)
    new_hs, new_state = adam_step(state, hs, zero_grads(hs), TrainConfig())
    assert new_state.step == 1
    for h0, h1 in zip(hs, new_hs):
        for w0, w1 in zip(h0.layers, h1.layers):
            assert np.array_equal(w0, w1)


def test_adam_first_step_closed_form(rng):
    hs = [random_h(rng, width=2)]
    cfg = TrainConfig(lr=0.01)
    g = [[rng.standard_normal(w.shape) for w in hs[0].layers]]
    new_hs, _ = adam_step(AdamState.for_model(hs), hs, g, cfg)
    for w0, w1, ga in zip(hs[0].layers, new_hs[0].layers, g[0]):
        expect = w0 - cfg.lr * ga / (np.abs(ga) + cfg.adam_eps)
        assert np.abs(w1 - expect).max() <= 1e-12


def test_adam_deterministic(rng):
    hs = [random_h(rng)]
    g = [[np.full_like(w, 0.3) for w in hs[0].layers]]
    cfg = TrainConfig()
    a1, s1 = adam_step(AdamState.for_model(hs), hs, g, cfg)
    a2, s2 = adam_step(AdamState.for_model(hs), hs, g, cfg)
    for h1, h2 in zip(a1, a2):
        for w1, w2 in zip(h1.layers, h2.layers):
            assert np.array_equal(w1, w2)


def test_adam_rejects_nan_gradient(rng):
    hs = [random_h(rng)]
    g = zero_grads(hs)
    g[0][0][0, 0, 0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        adam_step(AdamState.for_model(hs), hs, g, TrainConfig())


def small_training_data(rng, n_train=3, n_val=1, steps=5, nx=12):
    from sipde.datagen import reference_trajectory

    grid = Grid2D(nx, nx, 2 * np.pi / nx)
    out = []
    for i in range(n_train + n_val):
        r = np.random.default_rng(100 + i)
        p = random_problem(grid, r)
        u0 = random_field(grid, r, scale=0.2)
        u0.values[p.mask.mask == 0] = 0.0
        frames = reference_trajectory(p, u0, steps, tol=1e-12)
        out.append(TrajectorySlice(p, frames))
    return TrainingData(train=out[:n_train], val=out[n_train:])


def test_train_zero_epochs_returns_psi_baseline(rng):
    data = small_training_data(rng)
    cfg = TrainConfig(epochs=0, horizon=2, val_k=4, rho_check_every=0)
    model, log, ckpt = train(data, cfg)
    # composite correction is exactly zero at initialization
    u = random_field(data.train[0].problem.grid, rng)
    from sipde.semi_implicit import psi_apply

    it = model.base
    assert np.array_equal(phi_apply(model, u).values, psi_apply(it, u).values)
    assert log.entries[0].epoch == 0
    assert log.best_epoch == 0


def test_train_epoch0_val_equals_zero_h_loss(rng):
    data = small_training_data(rng)
    cfg = TrainConfig(epochs=1, horizon=2, val_k=4, rho_check_every=0, seed=5)
    model, log, ckpt = train(data, cfg)
    traj = data.val[0]
    sample = TrajectorySlice(traj.problem, traj.frames[:3])
    baseline = loss(model_for(sample, zero_h_operators(4)), sample, k=4, n_t=2)
    assert log.entries[0].val_loss == baseline


def test_train_determinism(rng):
    data = small_training_data(rng)
    cfg = TrainConfig(epochs=2, horizon=2, val_k=3, k_min=1, k_max=4,
                      batch_size=2, rho_check_every=0, seed=9)
    m1, log1, _ = train(data, cfg)
    m2, log2, _ = train(data, cfg)
    for h1, h2 in zip(m1.hs, m2.hs):
        for w1, w2 in zip(h1.layers, h2.layers):
            assert np.array_equal(w1, w2)
    for e1, e2 in zip(log1.entries, log2.entries):
        assert e1.train_loss == e2.train_loss
        assert e1.val_loss == e2.val_loss
        assert e1.grad_norm == e2.grad_norm


def test_train_resume_reproduces_log(rng):
    data = small_training_data(rng)
    kw = dict(horizon=2, val_k=3, k_min=1, k_max=4, batch_size=2,
              rho_check_every=0, seed=13)
    _, log_full, _ = train(data, TrainConfig(epochs=4, **kw))
    _, _, ckpt2 = train(data, TrainConfig(epochs=2, **kw))
    _, log_tail, _ = train(data, TrainConfig(epochs=4, **kw), resume=ckpt2)
    tail = {e.epoch: e for e in log_tail.entries}
    for e in log_full.entries:
        if e.epoch >= 3:
            assert tail[e.epoch].train_loss == e.train_loss
            assert tail[e.epoch].val_loss == e.val_loss
            assert tail[e.epoch].grad_norm == e.grad_norm


def test_train_checkpoint_round_trip(rng):
    from sipde.training import TrainCheckpoint

    data = small_training_data(rng)
    cfg = TrainConfig(epochs=1, horizon=2, val_k=3, rho_check_every=0)
    _, _, ckpt = train(data, cfg)
    back = TrainCheckpoint.from_json(ckpt.to_json())
    for h1, h2 in zip(ckpt.hs, back.hs):
        for w1, w2 in zip(h1.layers, h2.layers):
            assert np.array_equal(w1, w2)
    assert back.adam.step == ckpt.adam.step


def test_train_single_sample_overfit(rng):
    # steps == horizon pins the training window, so the loss is a fixed
    # objective and the 10x drop measures pure optimization progress
    data = small_training_data(rng, n_train=1, n_val=1, steps=2)
    cfg = TrainConfig(epochs=200, horizon=2, k_min=3, k_max=3, val_k=3,
                      batch_size=1, lr=3e-3, rho_check_every=0, seed=3)
    model, log, _ = train(data, cfg)
    first = log.entries[1].train_loss
    best = min(e.train_loss for e in log.entries if e.train_loss is not None)
    assert best * 10 <= first


def test_train_logs_rho_snapshots(rng):
    data = small_training_data(rng, n_train=2, n_val=1, steps=4)
    cfg = TrainConfig(epochs=2, horizon=2, val_k=3, rho_check_every=1,
                      rho_iters=60, seed=2)
    _, log, _ = train(data, cfg)
    assert all(e.rho_tprime is not None for e in log.entries)
    assert all(e.rho_tprime < 1.0 for e in log.entries)


def test_train_rejects_mixed_structure(rng):
    data = small_training_data(rng, n_train=2, n_val=1)
    other = small_training_data(rng, n_train=1, n_val=0, nx=10)
    mixed = TrainingData(train=data.train + other.train, val=data.val)
    with pytest.raises(ValueError):
        train(mixed, TrainConfig(epochs=1))
