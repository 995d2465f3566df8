"""Command-line surface: data generation, training, evaluation, spectral
certification, benchmarking, and plot emission.

Exit codes: 0 success, 1 usage/config error, 2 numerical failure
(non-convergence or NaN), 3 certification refusal.
"""

import argparse
import csv
import io
import json
import sys
import time
from pathlib import Path

import numpy as np

from .datagen import (
    DataConfig,
    as_training_data,
    generate,
    grid_2pi,
    init_condition,
    load_dataset,
    sample_params,
    variant_testsets,
)
from .evaluate import evaluate_model
from .grid import zeros as zero_field
from .linops import PowerIterationError
from .neural import (
    ModelFormatError,
    NeuralIterator,
    deserialize_model,
    init_h_operators,
    phi_apply,
    serialize_model,
)
from .semi_implicit import (
    CertificationError,
    ConvergenceError,
    contraction_bound,
    make_iterator,
    validity_condition,
    psi_apply,
)
from .spectral import norm_split_bound, spectral_report, t_map, tprime_map
from .training import TrainCheckpoint, TrainConfig, train


class UsageError(ValueError):
    """Bad flags or config; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


_DATACFG_KEYS = {
    "n_traj", "steps", "nx", "dt", "eps", "base_seed", "oracle_tol",
    "oracle_max_iter", "amp_normal_param", "amp_param_is_variance",
}
_TRAINCFG_KEYS = {
    "lr", "beta1", "beta2", "adam_eps", "batch_size", "epochs", "k_min",
    "k_max", "horizon", "seed", "validate_every", "val_k", "width", "depth",
    "init_scale", "rho_check_every", "rho_iters",
}
_PROBLEM_KEYS = {"nx", "dt", "eps", "vx", "vy", "dxx", "dyy"}
_PROBLEM_DEFAULTS = {"nx": 64, "dt": 0.2, "eps": 0.9, "vx": 1.0, "vy": 1.0,
                     "dxx": 0.5, "dyy": 0.5}


def _load_config(path, allowed: set) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise UsageError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise UsageError(f"config is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise UsageError("config must be a JSON object")
    unknown = set(doc) - allowed
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    return doc


def _problem_from_config(cfg: dict):
    from .grid import Field, make_boundary_mask, zeros as zf
    from .semi_implicit import PdeProblem, PdeTerm
    from .stencils import central_diff_ops_2d

    merged = dict(_PROBLEM_DEFAULTS)
    merged.update(cfg)
    grid = grid_2pi(int(merged["nx"]))
    ops = central_diff_ops_2d()
    n = grid.n_nodes

    def const(v):
        return Field(grid, np.full(n, float(v)))

    terms = [
        PdeTerm(const(merged["vx"]), ops.dx),
        PdeTerm(const(merged["vy"]), ops.dy),
        PdeTerm(const(merged["dxx"]), ops.dxx),
        PdeTerm(const(merged["dyy"]), ops.dyy),
    ]
    return PdeProblem(grid, make_boundary_mask(grid), terms, zf(grid),
                      float(merged["eps"]), float(merged["dt"]))


def _load_model(path, problem):
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError as e:
        raise UsageError(f"model file not found: {path}") from e
    return deserialize_model(data, problem)


def cmd_datagen(ns) -> int:
    cfg = _load_config(ns.config, _DATACFG_KEYS)
    if ns.seed is not None:
        cfg["base_seed"] = ns.seed
    config = DataConfig(**cfg)
    out = generate(config, ns.out)
    print(f"dataset written to {out}")
    if ns.variants:
        paths = variant_testsets(config, Path(ns.out).parent / (Path(ns.out).name + "_variants"))
        for name, p in paths.items():
            print(f"variant {name} written to {p}")
    return 0


def cmd_train(ns) -> int:
    cfg = _load_config(ns.config, _TRAINCFG_KEYS)
    if ns.seed is not None:
        cfg["seed"] = ns.seed
    config = TrainConfig(**cfg)
    ds = load_dataset(ns.data)
    data = as_training_data(ds)
    resume = None
    if ns.resume:
        try:
            resume = TrainCheckpoint.from_json(Path(ns.resume).read_text())
        except FileNotFoundError as e:
            raise UsageError(f"checkpoint not found: {ns.resume}") from e
    model, log, ckpt = train(data, config, resume=resume)
    Path(ns.out).write_bytes(serialize_model(model))
    Path(str(ns.out) + ".ckpt").write_text(ckpt.to_json())
    if ns.log:
        Path(ns.log).write_text(log.to_jsonl())
    print(f"best epoch {log.best_epoch}, val loss {log.best_val_loss:.6e}")
    print(f"model written to {ns.out}")
    return 0


def cmd_eval(ns) -> int:
    ds = load_dataset(ns.data)
    first = ds.trajectories(ns.split)
    if not first:
        raise UsageError(f"dataset has no '{ns.split}' split")
    model = _load_model(ns.model, first[0].problem)
    report = evaluate_model(ds, model.hs, split=ns.split,
                            neural_iters=ns.neural_iters,
                            semi_iters=ns.semi_iters, steps=ns.steps)
    if ns.out_csv:
        Path(ns.out_csv).write_text(report.to_csv())
    payload = json.dumps(report.to_dict(), indent=1)
    if ns.out_json:
        Path(ns.out_json).write_text(payload)
    else:
        print(payload)
    return 0


def cmd_spectral(ns) -> int:
    cfg = _load_config(ns.config, _PROBLEM_KEYS)
    problem = _problem_from_config(cfg)
    if ns.model:
        model = _load_model(ns.model, problem)
    else:
        model = NeuralIterator(
            make_iterator(problem, zero_field(problem.grid)),
            tuple(init_h_operators(len(problem.terms), seed=0)),
        )
    rep_t = spectral_report(t_map(problem), norm_iters=ns.iters,
                            radius_iters=ns.iters, seed=ns.seed or 0)
    rep_tp = spectral_report(tprime_map(model), norm_iters=ns.iters,
                             radius_iters=ns.iters, seed=ns.seed or 0)
    l2 = norm_split_bound(problem, model.hs)
    doc = {
        "validity_condition": validity_condition(problem),
        "contraction_bound": contraction_bound(problem),
        "norm_split_bound": l2.bound,
        "norm_split_scaled_bound": l2.scaled_bound,
        "T": rep_t.to_dict(),
        "Tprime": rep_tp.to_dict(),
    }
    payload = json.dumps(doc, indent=1)
    if ns.out:
        Path(ns.out).write_text(payload)
    else:
        print(payload)
    return 0


def _bench_once(problem, model, u0, neural_iters, semi_iters):
    t0 = time.perf_counter()
    it = make_iterator(problem, u0)
    ni = NeuralIterator(it, model.hs)
    u = u0
    for _ in range(neural_iters):
        u = phi_apply(ni, u)
    t1 = time.perf_counter()
    it = make_iterator(problem, u0)
    u = u0
    for _ in range(semi_iters):
        u = psi_apply(it, u)
    t2 = time.perf_counter()
    return t1 - t0, t2 - t1


def cmd_bench(ns) -> int:
    if ns.reps < 1:
        raise UsageError("reps must be >= 1")
    cfg = _load_config(ns.config, _PROBLEM_KEYS)
    problem = _problem_from_config(cfg)
    if ns.model:
        model = _load_model(ns.model, problem)
    else:
        model = NeuralIterator(
            make_iterator(problem, zero_field(problem.grid)),
            tuple(init_h_operators(len(problem.terms), seed=ns.seed or 0)),
        )
    params = sample_params(np.random.default_rng(ns.seed or 0))
    u0 = init_condition(problem.grid, params)
    times_n, times_s = [], []
    try:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(limits=1)
    except ImportError:
        limiter = None
    try:
        _bench_once(problem, model, u0, ns.neural_iters, ns.semi_iters)  # warmup
        for _ in range(ns.reps):
            tn, ts = _bench_once(problem, model, u0, ns.neural_iters, ns.semi_iters)
            times_n.append(tn)
            times_s.append(ts)
    finally:
        if limiter is not None:
            limiter.unregister()

    def stats(ts):
        q1, med, q3 = np.percentile(ts, [25, 50, 75])
        return {"median_s": float(med), "iqr_s": float(q3 - q1)}

    doc = {
        "grid": {"nx": problem.grid.nx, "ny": problem.grid.ny},
        "neural": {**stats(times_n), "iters": ns.neural_iters},
        "semi_implicit": {**stats(times_s), "iters": ns.semi_iters},
        "ratio_median": float(np.median(times_n) / np.median(times_s)),
        "reps": ns.reps,
    }
    payload = json.dumps(doc, indent=1)
    if ns.out:
        Path(ns.out).write_text(payload)
    print(payload)
    return 0


def cmd_plot(ns) -> int:
    try:
        text = Path(ns.csv).read_text()
    except FileNotFoundError as e:
        raise UsageError(f"CSV not found: {ns.csv}") from e
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows:
        raise UsageError("CSV contains no data rows")
    prefix = "nmse_" if ns.series == "normalized" else "mse_"
    by_step = {}
    try:
        for r in rows:
            s = int(r["step"])
            by_step.setdefault(s, {"neural": [], "semi": []})
            by_step[s]["neural"].append(float(r[prefix + "neural"]))
            by_step[s]["semi"].append(float(r[prefix + "semi"]))
    except (KeyError, ValueError) as e:
        raise UsageError(f"CSV is missing evaluation columns: {e}") from e
    steps = sorted(by_step)
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for name, color in (("neural", "tab:blue"), ("semi", "tab:orange")):
        data = np.array([by_step[s][name] for s in steps])
        p25, p50, p75 = np.percentile(data, [25, 50, 75], axis=1)
        label = "neural (corrected)" if name == "neural" else "semi-implicit"
        ax.plot(steps, p50, color=color, label=label)
        ax.fill_between(steps, p25, p75, color=color, alpha=0.25, linewidth=0)
    ax.set_xlabel("time step")
    ax.set_ylabel("normalized MSE" if ns.series == "normalized" else "MSE")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(ns.out, format="svg")
    plt.close(fig)
    print(f"plot written to {ns.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sipde", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("datagen", help="generate a dataset of oracle trajectories")
    d.add_argument("--out", required=True)
    d.add_argument("--config")
    d.add_argument("--seed", type=int)
    d.add_argument("--variants", action="store_true",
                   help="also generate the three variant test sets")
    d.set_defaults(fn=cmd_datagen)

    t = sub.add_parser("train", help="train correction operators on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--log")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="training checkpoint to continue from")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a model against the plain solver")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--neural-iters", type=int, default=10)
    e.add_argument("--semi-iters", type=int, default=25)
    e.add_argument("--steps", type=int, default=10)
    e.add_argument("--out-csv")
    e.add_argument("--out-json")
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("spectral", help="spectral certification report")
    s.add_argument("--config")
    s.add_argument("--model")
    s.add_argument("--iters", type=int, default=2000)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_spectral)

    b = sub.add_parser("bench", help="single-threaded step timing")
    b.add_argument("--reps", type=int, default=50)
    b.add_argument("--config")
    b.add_argument("--model")
    b.add_argument("--neural-iters", type=int, default=10)
    b.add_argument("--semi-iters", type=int, default=25)
    b.add_argument("--seed", type=int)
    b.add_argument("--out")
    b.set_defaults(fn=cmd_bench)

    pl = sub.add_parser("plot", help="percentile-band error plot from an eval CSV")
    pl.add_argument("--csv", required=True)
    pl.add_argument("--out", required=True)
    pl.add_argument("--series", choices=("raw", "normalized"), default="raw")
    pl.set_defaults(fn=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        return ns.fn(ns)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (ModelFormatError, OSError, TypeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except CertificationError as e:
        print(f"certification refusal: {e}", file=sys.stderr)
        return 3
    except (ConvergenceError, FloatingPointError, PowerIterationError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
