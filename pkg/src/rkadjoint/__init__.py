"""Runge-Kutta integrators with exact discrete adjoints.

Tableau algebra, forward variational and backward adjoint passes, reverse
accumulation over RK constraint tapes, costates for tableaus with vanishing
weights, and discrete optimal control by direct and indirect routes.
"""

from rkadjoint.errors import *  # noqa: F401,F403
from rkadjoint.ode import (
    OdeSystem,
    PartitionedSystem,
    PrkTrajectory,
    QuadraticForm,
    TimeGrid,
    Trajectory,
    bilinear_step_identity,
    prk_integrate,
    prk_step,
    quadratic_drift,
    rk_integrate,
    rk_step,
)
from rkadjoint.tableau import (
    CATALOG,
    PrkTableau,
    RkTableau,
    SymplecticnessReport,
    adjoint_partner,
    builtin,
    load,
    order_residuals_prk,
    order_residuals_rk,
    random_symplectic,
    reflect,
    symplectic_defect_prk,
    symplectic_defect_rk,
    transpose,
)
from rkadjoint.variational import (
    SensitivityProblem,
    adjoint_backward,
    forward_variational,
    gradient_of_terminal_cost,
    lambda_delta_products,
    sensitivity_pair,
)
from rkadjoint.reverse_ad import (
    Constraint,
    ConstraintProgram,
    Objective,
    build_rk_tape,
    evaluate_forward,
    forward_tangent,
    reverse_gradient,
)
from rkadjoint.zero_weight import (
    SpecialPartitionedSystem,
    ZeroWeightScheme,
    epsilon_regularized_pair,
    fancy_integrate,
    fancy_p_step,
    limit_validation,
)
from rkadjoint.control import (
    ControlSolution,
    ControlSystem,
    CostSpec,
    DiscreteOptimalitySystem,
    assemble_discrete_system,
    kkt_residual,
    lambda_delta_audit,
    mechanics_demo,
    solve_direct,
    solve_indirect,
)

__version__ = "0.1.0"
