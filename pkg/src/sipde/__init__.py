"""Semi-implicit solvers for linear PDEs with learned correction operators."""

from .grid import BoundaryMask, Field, Grid2D, make_boundary_mask, norm, project
from .semi_implicit import (
    CertificationError,
    ConvergenceError,
    PdeProblem,
    PdeTerm,
    SemiImplicitIterator,
    SingularPreconditionerError,
    contraction_bound,
    build_c,
    build_lambdas,
    fixed_point_solve,
    make_iterator,
    validity_condition,
    psi_apply,
    time_step,
)
from .neural import (
    HOperator,
    ModelFormatError,
    NeuralIterator,
    deserialize_model,
    embed_off_diag_stencils,
    h_adjoint,
    h_apply,
    init_h_operators,
    phi_apply,
    serialize_model,
    tprime_apply,
    zero_h_operators,
)
from .stencils import StencilOp, central_diff_ops_2d

__version__ = "0.1.0"
