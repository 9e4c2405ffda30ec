"""Risk-averse optimal control of random elliptic obstacle problems.

Penalized state solves, Karhunen-Loeve noise models, smoothed CVaR,
adjoint-based stochastic gradients and a path-following SVRG driver for
the unit-square benchmark instance.
"""

from .mesh import (
    FemFunction,
    Mesh,
    SolverError,
    apply_dirichlet,
    assemble_mass,
    assemble_stiffness,
    build_mesh,
    interpolate,
    l2_inner,
    l2_norm,
    solve_sparse,
)
from .fields import (
    KlExpansion,
    SampleSet,
    cosine_eigenpairs,
    evaluate_field,
    lognormal_eigenpairs,
    sample_xi,
    transcendental_roots,
)
from .benchmark import BenchmarkInstance, build_instance, build_rhs, build_target
from .penalty import (
    PenaltyParams,
    StateSolve,
    complementarity_residuals,
    m_tau,
    m_tau_prime,
    solve_obstacle_reference,
    solve_state,
)
from .risk import Control, RiskParams, cvar_exact, saa_objective, v_eps, v_eps_prime
from .gradient import (
    ControlGradient,
    StationarityReport,
    full_gradient,
    residual,
    solve_adjoint,
    stationarity_report,
    stochastic_gradient,
)
from .svrg import (
    RunReport,
    StepRule,
    SvrgConfig,
    run_path_following,
    step_constants,
    step_size,
    svrg_epoch,
)

__version__ = "0.1.0"
