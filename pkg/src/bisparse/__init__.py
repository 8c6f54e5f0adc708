"""Sparse nonnegative least squares via an exact biconvex reformulation.

The sparsity count is rewritten through an auxiliary variable coupled to
the signal; minimizing the resulting relaxed objective with a growing
coupling weight recovers minimizers of the original constrained or
penalized problem.  Includes IHT baselines and a localization-microscopy
application harness.
"""

from .operators import (
    DenseOperator,
    LinearOp,
    SmlmOperator,
    SpectralEstimate,
    adjoint,
    apply,
    power_iteration,
    spectral_norm,
    submatrix,
)
from .reformulation import (
    Constrained,
    Penalized,
    PenaltyMode,
    PrimalDualPair,
    ProblemInstance,
    RhoSchedule,
    check_constrained_u_structure,
    check_penalized_u_structure,
    coupling_gap,
    g_rho_value,
    g_value,
    l0_norm,
    l0_witness,
    read_vector_csv,
    rho_threshold,
    tighten_u,
    write_vector_csv,
)
from .smlm import (
    FrameLocalization,
    FrameStack,
    JaccardReport,
    Molecule,
    jaccard,
    localize_frame,
    random_molecules,
    render_superres,
    simulate_stack,
)
from .solvers import (
    IhtResult,
    Solution,
    SolveConfig,
    SolveTrace,
    biconvex_minimize,
    fista_x_update,
    iht_constrained,
    iht_penalized,
    l1_nonneg_solve,
    pam_solve,
    project_capped_simplex,
    prox_l1_nonneg,
    u_update_constrained,
    u_update_penalized,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
