"""Dataset generation: sampled advection-diffusion instances with converged
reference trajectories.

Each trajectory draws its own velocities, diffusivities and initial condition,
then advances the semi-implicit scheme to machine-precision convergence per
time step. The reference therefore shares the spatial discretization with the
solvers under evaluation; errors reported against it measure iteration error,
not discretization error. Files are raw little-endian float64, frame-major
then row-major, with a JSON manifest that carries shapes, parameters, splits
and checksums.
"""

import json
import os
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .grid import Field, Grid2D, make_boundary_mask, zeros
from .semi_implicit import (
    PdeProblem,
    PdeTerm,
    fixed_point_solve,
    make_iterator,
    require_convergent,
)
from .stencils import central_diff_ops_2d
from .training import TrainingData, TrajectorySlice

DOMAIN = 2.0 * np.pi
MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1


@dataclass
class SimParams:
    """Per-trajectory PDE parameters and initial-condition coefficients."""

    vx: float
    vy: float
    dxx: float
    dyy: float
    amp_lambda: float
    amp_gamma: float
    wave_k: int
    wave_l: int
    seed: int = 0

    def __post_init__(self):
        if self.dxx <= 0 or self.dyy <= 0:
            raise ValueError("diffusivities must be positive")
        if not (1 <= self.wave_k <= 9 and 1 <= self.wave_l <= 9):
            raise ValueError("wavenumbers must lie in 1..9")

    def to_dict(self):
        return {
            "vx": self.vx, "vy": self.vy, "dxx": self.dxx, "dyy": self.dyy,
            "amp_lambda": self.amp_lambda, "amp_gamma": self.amp_gamma,
            "wave_k": self.wave_k, "wave_l": self.wave_l, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class DataConfig:
    """Dataset defaults reproduce the nominal experiment setting."""

    n_traj: int = 200
    steps: int = 50
    nx: int = 64
    dt: float = 0.2
    eps: float = 0.9
    base_seed: int = 0
    oracle_tol: float = 1e-12
    oracle_max_iter: int = 200000
    amp_normal_param: float = 0.02
    amp_param_is_variance: bool = True
    split_fractions: tuple = (0.8, 0.1, 0.1)

    @property
    def amp_std(self) -> float:
        if self.amp_param_is_variance:
            return float(np.sqrt(self.amp_normal_param))
        return float(self.amp_normal_param)


def grid_2pi(n: int) -> Grid2D:
    """n x n node grid over [0, 2pi) with dx = 2pi/n."""
    return Grid2D(n, n, DOMAIN / n)


def sample_params(rng: np.random.Generator, amp_std: float = float(np.sqrt(0.02)),
                  seed: int = 0) -> SimParams:
    """Draw one parameter set: v ~ U[-2,2], D ~ U[0.2,0.8], amplitudes
    normal with the given std, integer wavenumbers in 1..9."""
    vx, vy = rng.uniform(-2.0, 2.0, size=2)
    dxx, dyy = rng.uniform(0.2, 0.8, size=2)
    lam, gam = rng.normal(0.0, amp_std, size=2)
    k, l = rng.integers(1, 10, size=2)
    return SimParams(float(vx), float(vy), float(dxx), float(dyy),
                     float(lam), float(gam), int(k), int(l), seed=seed)


def problem_from_params(grid: Grid2D, params: SimParams, dt: float,
                        eps: float) -> PdeProblem:
    """Advection-diffusion instance with zero Dirichlet boundary."""
    ops = central_diff_ops_2d()
    n = grid.n_nodes

    def const(v):
        return Field(grid, np.full(n, float(v)))

    terms = [
        PdeTerm(const(params.vx), ops.dx),
        PdeTerm(const(params.vy), ops.dy),
        PdeTerm(const(params.dxx), ops.dxx),
        PdeTerm(const(params.dyy), ops.dyy),
    ]
    return PdeProblem(grid, make_boundary_mask(grid), terms, zeros(grid), eps, dt)


def init_condition(grid: Grid2D, params: SimParams) -> Field:
    """lam*cos(kx+ly) + gam*sin(kx+ly) at the nodes, boundary ring zeroed."""
    x = np.arange(grid.nx) * grid.dx
    y = np.arange(grid.ny) * grid.dx
    xx, yy = np.meshgrid(x, y)
    phase = params.wave_k * xx + params.wave_l * yy
    vals = params.amp_lambda * np.cos(phase) + params.amp_gamma * np.sin(phase)
    vals[0, :] = 0.0
    vals[-1, :] = 0.0
    vals[:, 0] = 0.0
    vals[:, -1] = 0.0
    return Field(grid, vals.reshape(-1))


def reference_trajectory(problem: PdeProblem, u0: Field, steps: int,
                         tol: float = 1e-12, max_iter: int = 200000,
                         certify: bool = True) -> list[Field]:
    """steps+1 frames solved to tolerance per step, warm-started.

    Refuses (CertificationError) when the instance cannot be certified
    convergent; a non-convergent step aborts the trajectory.
    """
    if certify:
        require_convergent(problem)
    it = make_iterator(problem, u0)
    frames = [u0]
    u = u0
    for _ in range(steps):
        res = fixed_point_solve(it, u, tol=tol, max_iter=max_iter)
        u = res.u
        frames.append(u)
        it = it.advance_c(u)
    return frames


def _traj_bytes(frames) -> bytes:
    arr = np.stack([f.values for f in frames])
    return arr.astype("<f8").tobytes()


def _frames_from_bytes(data: bytes, grid: Grid2D, steps: int) -> list[Field]:
    arr = np.frombuffer(data, dtype="<f8")
    expect = (steps + 1) * grid.n_nodes
    if arr.size != expect:
        raise ValueError(f"trajectory file has {arr.size} values, expected {expect}")
    arr = arr.reshape(steps + 1, grid.n_nodes)
    return [Field(grid, arr[i].copy()) for i in range(steps + 1)]


def _split_labels(n: int, fractions, rng: np.random.Generator) -> list[str]:
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 0:
        raise ValueError("split fractions do not fit the trajectory count")
    labels = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    order = rng.permutation(n)
    out = [""] * n
    for lab, idx in zip(labels, order):
        out[int(idx)] = lab
    return out


def generate(config: DataConfig, out_dir) -> Path:
    """Write a dataset directory: trajectory files plus a manifest (last,
    atomically). Regeneration with the same seed is byte-identical."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = grid_2pi(config.nx)
    split_rng = np.random.default_rng([config.base_seed, 777])
    splits = _split_labels(config.n_traj, config.split_fractions, split_rng)
    entries = []
    for i in range(config.n_traj):
        seed = config.base_seed + i
        rng = np.random.default_rng(seed)
        params = sample_params(rng, amp_std=config.amp_std, seed=seed)
        problem = problem_from_params(grid, params, config.dt, config.eps)
        u0 = init_condition(grid, params)
        frames = reference_trajectory(problem, u0, config.steps,
                                      tol=config.oracle_tol,
                                      max_iter=config.oracle_max_iter)
        fname = f"traj_{i:04d}.f64"
        blob = _traj_bytes(frames)
        (out / fname).write_bytes(blob)
        entries.append({
            "index": i,
            "file": fname,
            "seed": seed,
            "split": splits[i],
            "checksum": zlib.crc32(blob),
            "params": params.to_dict(),
        })
    manifest = {
        "kind": "sipde-dataset",
        "format_version": FORMAT_VERSION,
        "checksum_algo": "crc32",
        "grid": {"nx": grid.nx, "ny": grid.ny, "dx": grid.dx},
        "dt": config.dt,
        "eps": config.eps,
        "steps": config.steps,
        "n_traj": config.n_traj,
        "oracle_tol": config.oracle_tol,
        "base_seed": config.base_seed,
        "amp_normal_param": config.amp_normal_param,
        "amp_param_is_variance": config.amp_param_is_variance,
        "split_counts": {s: splits.count(s) for s in ("train", "val", "test")},
        "trajectories": entries,
    }
    tmp = out / (MANIFEST_NAME + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=1))
    os.replace(tmp, out / MANIFEST_NAME)
    return out


def variant_testsets(config: DataConfig, out_root) -> dict[str, Path]:
    """Three held-out test sets varying one parameter each: eps=0.75,
    dt=0.12, and a doubled resolution (dx halves). Fresh parameter draws
    from the same distributions; 20 trajectories each."""
    out_root = Path(out_root)
    held_out = (0.0, 0.0, 1.0)
    variants = {
        "eps075": replace(config, eps=0.75, n_traj=20, split_fractions=held_out,
                          base_seed=config.base_seed + 10000),
        "dt012": replace(config, dt=0.12, n_traj=20, split_fractions=held_out,
                         base_seed=config.base_seed + 20000),
        "dx0049": replace(config, nx=config.nx * 2, n_traj=20, split_fractions=held_out,
                          base_seed=config.base_seed + 30000),
    }
    return {name: generate(cfg, out_root / name) for name, cfg in variants.items()}


@dataclass(eq=False)
class Trajectory:
    """One loaded trajectory with its problem instance built on demand."""

    index: int
    params: SimParams
    split: str
    frames: list
    problem: PdeProblem


class Dataset:
    """A dataset directory opened for reading; trajectories load lazily."""

    def __init__(self, path):
        self.path = Path(path)
        manifest_path = self.path / MANIFEST_NAME
        if not manifest_path.exists():
            raise FileNotFoundError(f"no manifest in {self.path}")
        self.manifest = json.loads(manifest_path.read_text())
        if self.manifest.get("kind") != "sipde-dataset":
            raise ValueError(f"{manifest_path} is not a dataset manifest")
        gm = self.manifest["grid"]
        self.grid = Grid2D(gm["nx"], gm["ny"], gm["dx"])
        self.dt = self.manifest["dt"]
        self.eps = self.manifest["eps"]
        self.steps = self.manifest["steps"]
        self._cache = {}

    def indices(self, split=None) -> list[int]:
        return [
            e["index"] for e in self.manifest["trajectories"]
            if split is None or e["split"] == split
        ]

    def trajectory(self, index: int) -> Trajectory:
        if index in self._cache:
            return self._cache[index]
        entry = self.manifest["trajectories"][index]
        if entry["index"] != index:
            entry = next(e for e in self.manifest["trajectories"] if e["index"] == index)
        blob = (self.path / entry["file"]).read_bytes()
        if zlib.crc32(blob) != entry["checksum"]:
            raise ValueError(f"checksum mismatch for {entry['file']}")
        params = SimParams.from_dict(entry["params"])
        frames = _frames_from_bytes(blob, self.grid, self.steps)
        problem = problem_from_params(self.grid, params, self.dt, self.eps)
        traj = Trajectory(index=index, params=params, split=entry["split"],
                          frames=frames, problem=problem)
        self._cache[index] = traj
        return traj

    def trajectories(self, split=None) -> list[Trajectory]:
        return [self.trajectory(i) for i in self.indices(split)]


def load_dataset(path) -> Dataset:
    return Dataset(path)


def as_training_data(ds: Dataset) -> TrainingData:
    """Train/val slices for the training loop (full frames per trajectory)."""
    train = [TrajectorySlice(t.problem, t.frames) for t in ds.trajectories("train")]
    val = [TrajectorySlice(t.problem, t.frames) for t in ds.trajectories("val")]
    return TrainingData(train=train, val=val)
