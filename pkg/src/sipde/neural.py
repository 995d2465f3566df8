"""Learned linear correction operators and the corrected iterator.

Each PDE term gets an independent stack of bias-free 3x3 convolution layers
(no activations), so every stack is a strictly linear map H with H(0) = 0.
The corrected update

    phi(u) = psi(u) + G * sum_i lam_i * H_i(psi(u) - u)

keeps every fixed point of psi: the correction input vanishes there. Its
homogeneous part is T' = T + G sum_i lam_i H_i (T - I).
"""

import json
from dataclasses import dataclass

import numpy as np

from .conv import adjoint_weights, conv_forward
from .grid import Field, zeros as zero_field
from .semi_implicit import PdeProblem, SemiImplicitIterator, make_iterator, psi_apply
from .stencils import correlate2d

try:
    from ._stackjit import stack3 as _stack3_jit
except ImportError:  # numba not installed: the numpy path does everything
    _stack3_jit = None


class ModelFormatError(ValueError):
    """Model payload is malformed or incompatible with the problem."""


MODEL_FORMAT = "sipde-model"
MODEL_VERSION = 1


@dataclass(eq=False)
class HOperator:
    """A linear stack of bias-free 3x3 convolution layers (1 -> ... -> 1)."""

    layers: tuple

    def __post_init__(self):
        layers = tuple(np.asarray(w, dtype=np.float64) for w in self.layers)
        if not layers:
            raise ValueError("HOperator needs at least one layer")
        for w in layers:
            if w.ndim != 4 or w.shape[2:] != (3, 3):
                raise ValueError(f"layer kernels must be (out, in, 3, 3), got {w.shape}")
            if not np.all(np.isfinite(w)):
                raise ValueError("layer kernels must be finite")
        if layers[0].shape[1] != 1:
            raise ValueError("first layer must take one input channel")
        if layers[-1].shape[0] != 1:
            raise ValueError("last layer must produce one output channel")
        for a, b in zip(layers, layers[1:]):
            if b.shape[1] != a.shape[0]:
                raise ValueError(
                    f"channel mismatch between layers: {a.shape} -> {b.shape}"
                )
        self.layers = layers


def h_apply(h: HOperator, f: Field) -> Field:
    """Apply the stack: sequential zero-padded correlation through all layers."""
    x = f.as_2d()[None]
    for w in h.layers:
        x = conv_forward(x, w)
    return Field(f.grid, x[0])


def h_adjoint(h: HOperator, f: Field) -> Field:
    """Adjoint of h_apply: reversed layers, flipped kernels, channels swapped."""
    x = f.as_2d()[None]
    for w in reversed(h.layers):
        x = conv_forward(x, adjoint_weights(w))
    return Field(f.grid, x[0])


def zero_h_operators(n_terms: int, width: int = 4, depth: int = 3) -> list[HOperator]:
    """All-zero stacks: the corrected iterator reduces to psi exactly."""
    return [
        HOperator(tuple(np.zeros(_layer_shape(i, depth, width)) for i in range(depth)))
        for _ in range(n_terms)
    ]


def init_h_operators(n_terms: int, width: int = 4, depth: int = 3, seed: int = 0,
                     scale: float = 0.1) -> list[HOperator]:
    """Training initialization: final layer zero, earlier layers uniform.

    The zero final layer makes every composite H vanish, so training starts
    from the plain semi-implicit iterator and inherits its convergence.
    """
    rng = np.random.default_rng(seed)
    hs = []
    for _ in range(n_terms):
        layers = []
        for i in range(depth):
            shape = _layer_shape(i, depth, width)
            if i == depth - 1:
                layers.append(np.zeros(shape))
            else:
                layers.append(rng.uniform(-scale, scale, size=shape))
        hs.append(HOperator(tuple(layers)))
    return hs


def _layer_shape(i: int, depth: int, width: int) -> tuple:
    c_in = 1 if i == 0 else width
    c_out = 1 if i == depth - 1 else width
    return (c_out, c_in, 3, 3)


def embed_off_diag_stencils(problem: PdeProblem, width: int = 4, depth: int = 3) -> list[HOperator]:
    """Exact stack representation of each term's zero-diagonal stencil.

    Layer 1 carries the stencil kernel in channel 0; later layers pass that
    channel through with identity delta kernels. With these stacks the
    corrected iterator equals two applications of psi.
    """
    hs = []
    for t in problem.terms:
        if t.op.kernel.shape != (3, 3):
            raise ValueError(
                f"embedding supports 3x3 stencils only, got {t.op.kernel.shape}"
            )
        layers = []
        first = np.zeros(_layer_shape(0, depth, width))
        first[0, 0] = t.op.off_diag_kernel()
        layers.append(first)
        for i in range(1, depth):
            w = np.zeros(_layer_shape(i, depth, width))
            w[0, 0, 1, 1] = 1.0
            layers.append(w)
        hs.append(HOperator(tuple(layers)))
    return hs


@dataclass(eq=False)
class NeuralIterator:
    """Semi-implicit iterator plus one learned correction stack per term."""

    base: SemiImplicitIterator
    hs: tuple

    def __post_init__(self):
        self.hs = tuple(self.hs)
        if len(self.hs) != len(self.base.problem.terms):
            raise ValueError(
                f"{len(self.hs)} correction operators for "
                f"{len(self.base.problem.terms)} PDE terms"
            )
        # layer-1 weights flattened for the shared im2col pass
        self._w1 = [
            np.ascontiguousarray(h.layers[0].reshape(h.layers[0].shape[0], 9).T)
            for h in self.hs
        ]
        # compiled path wants squeezed first/last layers and contiguous banks
        self._jit_ok = _stack3_jit is not None and all(
            len(h.layers) == 3 for h in self.hs
        )
        if self._jit_ok:
            self._jit_w = [
                (
                    np.ascontiguousarray(h.layers[0][:, 0]),
                    np.ascontiguousarray(h.layers[1]),
                    np.ascontiguousarray(h.layers[2][0]),
                )
                for h in self.hs
            ]

    def advance_c(self, u_t: Field) -> "NeuralIterator":
        return NeuralIterator(self.base.advance_c(u_t), self.hs)


def _h_stack_from_patches(it: NeuralIterator, i: int, patches: np.ndarray) -> np.ndarray:
    """Apply stack i given the shared 3x3 patch matrix of its input field."""
    h, wd = it.base.problem.grid.shape
    mid = patches @ it._w1[i]
    x = np.ascontiguousarray(mid.T).reshape(-1, h, wd)
    for w in it.hs[i].layers[1:]:
        x = conv_forward(x, w)
    return x[0]


def _patches3x3(values: np.ndarray) -> np.ndarray:
    """(n_nodes, 9) zero-padded patch matrix of a single-channel field."""
    h, wd = values.shape
    xp = np.zeros((h + 2, wd + 2))
    xp[1:-1, 1:-1] = values
    p = np.empty((h * wd, 9))
    k = 0
    for a in range(3):
        for b in range(3):
            p[:, k] = xp[a:a + h, b:b + wd].ravel()
            k += 1
    return p


def _correction2d(it: NeuralIterator, w2: np.ndarray) -> np.ndarray:
    """G * sum_i lam_i * H_i(w), on 2-D arrays."""
    if it._jit_ok:
        return _correction2d_jit(it, w2)
    patches = _patches3x3(w2)
    acc = np.zeros_like(w2)
    for i, gl in enumerate(it.base._glam):
        acc += gl * _h_stack_from_patches(it, i, patches)
    return acc


def _correction2d_jit(it: NeuralIterator, w2: np.ndarray) -> np.ndarray:
    h, wd = w2.shape
    xp = np.zeros((h + 2, wd + 2))
    xp[1:-1, 1:-1] = w2
    c1max = max(w[0].shape[0] for w in it._jit_w)
    c2max = max(w[1].shape[0] for w in it._jit_w)
    m1 = np.zeros((c1max, h + 2, wd + 2))
    m2 = np.zeros((c2max, h + 2, wd + 2))
    out = np.empty((h, wd))
    scratch = np.empty(wd)
    acc = np.zeros_like(w2)
    for (w1, w2b, w3), gl in zip(it._jit_w, it.base._glam):
        _stack3_jit(xp, w1, w2b, w3, m1[: w1.shape[0]], m2[: w2b.shape[0]], out, scratch)
        acc += gl * out
    return acc


def phi_apply(it: NeuralIterator, u: Field) -> Field:
    """One corrected update: psi(u) + G sum_i lam_i H_i(psi(u) - u)."""
    p = psi_apply(it.base, u)
    p2 = p.as_2d()
    w2 = p2 - u.as_2d()
    return Field(it.base.problem.grid, p2 + _correction2d(it, w2))


def tprime_apply(it: NeuralIterator, v: Field) -> Field:
    """Homogeneous part of phi: T v + G sum_i lam_i H_i(T v - v)."""
    if v.grid != it.base.problem.grid:
        raise ValueError("field grid mismatch")
    v2 = v.as_2d()
    tv = np.zeros_like(v2)
    for gl, k in zip(it.base._glam, it.base._offk):
        tv += gl * correlate2d(v2, k)
    return Field(v.grid, tv + _correction2d(it, tv - v2))


def serialize_model(it: NeuralIterator) -> bytes:
    """Model checkpoint: format version, problem fingerprint, kernel values.

    Floats are written with full round-trip precision; loading restores the
    kernels bit-exactly.
    """
    prob = it.base.problem
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "problem": {
            "nx": prob.grid.nx,
            "ny": prob.grid.ny,
            "dx": prob.grid.dx,
            "n_terms": len(prob.terms),
            "terms": [
                {"kernel": t.op.kernel.tolist(), "order": t.op.order}
                for t in prob.terms
            ],
        },
        "hs": [
            {"layers": [w.tolist() for w in h.layers]}
            for h in it.hs
        ],
    }
    return json.dumps(doc).encode("utf-8")


def deserialize_model(data: bytes, problem: PdeProblem) -> NeuralIterator:
    """Load a checkpoint against a problem instance.

    The stencil set and term count must match the problem; grid size and the
    remaining parameters may differ (the correction operators transfer).
    """
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ModelFormatError(f"model payload is not valid JSON: {e}") from e
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise ModelFormatError("not a model file (missing format marker)")
    if doc.get("version") != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {doc.get('version')}")
    try:
        fp = doc["problem"]
        hs_doc = doc["hs"]
        n_terms = int(fp["n_terms"])
        fp_terms = fp["terms"]
    except (KeyError, TypeError) as e:
        raise ModelFormatError(f"model payload missing required fields: {e}") from e
    if n_terms != len(problem.terms) or len(hs_doc) != n_terms:
        raise ModelFormatError(
            f"model has {n_terms} terms, problem has {len(problem.terms)}"
        )
    for saved, term in zip(fp_terms, problem.terms):
        k = np.asarray(saved["kernel"], dtype=np.float64)
        if k.shape != term.op.kernel.shape or not np.array_equal(k, term.op.kernel):
            raise ModelFormatError(
                "stencil kernels differ from the target problem; validity "
                "transfers only across coefficient/step/blend changes with a "
                "fixed stencil set"
            )
        if int(saved["order"]) != term.op.order:
            raise ModelFormatError("stencil orders differ from the target problem")
    try:
        hs = [
            HOperator(tuple(np.asarray(w, dtype=np.float64) for w in entry["layers"]))
            for entry in hs_doc
        ]
    except (ValueError, KeyError, TypeError) as e:
        raise ModelFormatError(f"invalid layer data: {e}") from e
    base = make_iterator(problem, zero_field(problem.grid))
    return NeuralIterator(base, tuple(hs))
