"""Numerical toolkit for infinite-horizon optimal control with free right
endpoint: Pontryagin extremals via penalized finite-horizon truncation, the
Cauchy-type formula for the adjoint variable with improper-integral
convergence analysis, and a battery of transversality/stability diagnostics.
"""

from . import cauchy, cli, expr, io, ode, pmp, problem, transversality
from .cauchy import (
    AccumulatedIntegral,
    CauchyAdjoint,
    ConvergenceVerdict,
    abnormality_indicator,
    accumulate,
    adjoint_ode_residual,
    cauchy_adjoint,
    classify_convergence,
    continuity_probe,
    verify_product_identity,
)
from .expr import DualValue, Expr, eval_dual, evaluate, parse, to_source
from .ode import (
    AdjointArc,
    Arc,
    BlowUpError,
    MatrixArc,
    Trajectory,
    fundamental_matrix,
    integrate_adjoint_backward,
    integrate_state,
    inverse_at,
)
from .pmp import (
    Extremal,
    TruncationRun,
    estimate_omega,
    hamiltonian,
    make_perturbation_pool,
    max_residual,
    maximize_hamiltonian,
    normalize,
    run_truncation,
    solve_finite_horizon,
)
from .problem import (
    ControlProblem,
    ControlSet,
    ReferenceControl,
    builtin,
    builtin_names,
    load_problem,
    save_problem,
    validate,
)
from .transversality import (
    TransversalityReport,
    check_plain_limit,
    check_subsequence_limit,
    check_weighted_limit,
    fit_exponential_dominance,
    lyapunov_exponents,
    monotone_analysis,
    run_battery,
)

__version__ = "0.1.0"
