"""Forward variational and backward adjoint propagation along a stored RK trajectory.

Both passes reuse the stages ``X_{n,i}`` of the forward integration; neither
re-solves the nonlinear stage equations. The stage systems of the linear
passes are solved with dense linear algebra.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from rkadjoint.errors import GridMismatch, MissingJacobian
from rkadjoint.ode import OdeSystem, TimeGrid, Trajectory, rk_integrate
from rkadjoint.tableau import RkTableau


@dataclass
class SensitivityProblem:
    system: OdeSystem
    alpha: np.ndarray
    eta: np.ndarray
    omega: np.ndarray
    grid: TimeGrid

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.eta = np.asarray(self.eta, dtype=float)
        self.omega = np.asarray(self.omega, dtype=float)
        d = self.system.dim
        if not (self.alpha.size == self.eta.size == self.omega.size == d):
            raise ValueError(f"alpha, eta and omega must all have dimension {d}")
        if self.system.jac_x is None:
            raise MissingJacobian("sensitivity problems need system.jac_x")


@dataclass
class VariationalTrajectory:
    nodes: np.ndarray  # delta_n, (N+1, d)
    stages: np.ndarray  # Delta_{n,i}
    slopes: np.ndarray  # d_{n,i}


@dataclass
class AdjointTrajectory:
    nodes: np.ndarray  # lambda_n, (N+1, d)
    stages: np.ndarray  # Lambda_{n,i}
    slopes: np.ndarray  # l_{n,i}
    upper: RkTableau
    grid: TimeGrid

    def forward_form_residuals(self) -> tuple[float, float]:
        """Residuals of ``lambda_{n+1} = lambda_n + h sum B_i l_i`` and the stage relations."""
        if self.grid.N == 0:
            return 0.0, 0.0
        h = self.grid.steps[:, None]
        B, A = self.upper.b, self.upper.a
        lam = self.nodes
        step = lam[1:] - lam[:-1] - h * np.einsum("i,nid->nd", B, self.slopes)
        stage = self.stages - lam[:-1, None, :] - h[:, :, None] * np.einsum("ij,njd->nid", A, self.slopes)
        return float(np.max(np.abs(step))), float(np.max(np.abs(stage)))


def _stage_jacobians(system: OdeSystem, X: np.ndarray, times: np.ndarray) -> np.ndarray:
    if system.jac_x is None:
        raise MissingJacobian("system.jac_x is required")
    return np.stack([np.asarray(system.jac_x(X[i], times[i]), dtype=float) for i in range(X.shape[0])])


def _coupled(coef: np.ndarray, Js: np.ndarray) -> np.ndarray:
    """Dense matrix with (i, j) block ``coef[i, j] * Js[i]``."""
    s, d, _ = Js.shape
    blocks = coef[:, :, None, None] * Js[:, None, :, :]
    return blocks.transpose(0, 2, 1, 3).reshape(s * d, s * d)


def forward_variational(base: Trajectory, system: OdeSystem, eta) -> VariationalTrajectory:
    """Linearised RK step equations around the stored stages, started at ``delta_0 = eta``."""
    tab, grid = base.tab, base.grid
    N, s, d = grid.N, tab.s, base.nodes.shape[1]
    delta = np.zeros((N + 1, d))
    Delta = np.zeros((N, s, d))
    dslope = np.zeros((N, s, d))
    delta[0] = np.asarray(eta, dtype=float)
    if delta[0].size != d:
        raise GridMismatch("eta has the wrong dimension")
    for n in range(N):
        h, t = grid.steps[n], grid.nodes[n]
        Js = _stage_jacobians(system, base.stages[n], t + tab.c * h)
        rhs = np.einsum("ijk,k->ij", Js, delta[n]).ravel()
        D = np.linalg.solve(np.eye(s * d) - h * _coupled(tab.a, Js), rhs).reshape(s, d)
        dslope[n] = D
        Delta[n] = delta[n] + h * (tab.a @ D)
        delta[n + 1] = delta[n] + h * (tab.b @ D)
    return VariationalTrajectory(delta, Delta, dslope)


def adjoint_backward(base: Trajectory, system: OdeSystem, upper: RkTableau, omega) -> AdjointTrajectory:
    """Integrate the adjoint equations backward from ``lambda_N = omega``.

    Uses the reflected form ``Lambda_i = lambda_{n+1} - h sum_j (B_j - A_ij) l_j``,
    ``l_i = -J(X_i, t_n + C_i h)^T Lambda_i``, ``lambda_n = lambda_{n+1} - h sum B_i l_i``.
    """
    grid = base.grid
    if upper.s != base.tab.s:
        raise GridMismatch("upper tableau must have as many stages as the forward tableau")
    N, s, d = grid.N, upper.s, base.nodes.shape[1]
    lam = np.zeros((N + 1, d))
    Lam = np.zeros((N, s, d))
    ell = np.zeros((N, s, d))
    lam[N] = np.asarray(omega, dtype=float)
    refl = upper.b[None, :] - upper.a
    for n in range(N - 1, -1, -1):
        h, t = grid.steps[n], grid.nodes[n]
        JTs = _stage_jacobians(system, base.stages[n], t + upper.c * h).transpose(0, 2, 1)
        rhs = -np.einsum("ijk,k->ij", JTs, lam[n + 1]).ravel()
        L = np.linalg.solve(np.eye(s * d) - h * _coupled(refl, JTs), rhs).reshape(s, d)
        ell[n] = L
        Lam[n] = lam[n + 1] - h * (refl @ L)
        lam[n] = lam[n + 1] - h * (upper.b @ L)
    return AdjointTrajectory(lam, Lam, ell, upper, grid)


def lambda_delta_products(lam: AdjointTrajectory, delta: VariationalTrajectory) -> np.ndarray:
    """``lambda_n^T delta_n`` for every node."""
    return np.einsum("nd,nd->n", lam.nodes, delta.nodes)


@dataclass
class SensitivityResult:
    forward: float  # omega^T delta_N
    reverse: float  # lambda_0^T eta
    base: Trajectory
    delta: VariationalTrajectory
    lam: AdjointTrajectory

    @property
    def gap(self) -> float:
        return self.reverse - self.forward


def sensitivity_pair(problem: SensitivityProblem, tab: RkTableau, upper: RkTableau | None = None) -> SensitivityResult:
    """Run both propagations on one base trajectory; ``upper`` defaults to ``tab``."""
    upper = tab if upper is None else upper
    base = rk_integrate(problem.system, tab, problem.alpha, problem.grid)
    delta = forward_variational(base, problem.system, problem.eta)
    lam = adjoint_backward(base, problem.system, upper, problem.omega)
    return SensitivityResult(
        forward=float(problem.omega @ delta.nodes[-1]),
        reverse=float(lam.nodes[0] @ problem.eta),
        base=base,
        delta=delta,
        lam=lam,
    )


def gradient_of_terminal_cost(
    base: Trajectory, system: OdeSystem, upper: RkTableau, gradC: Callable[[np.ndarray], np.ndarray]
) -> np.ndarray:
    """``lambda_0`` from the backward pass with ``lambda_N = gradC(x_N)``.

    Exact gradient of the discrete map ``alpha -> C(x_N)`` when ``(base.tab, upper)``
    is a symplectic pair.
    """
    omega = np.asarray(gradC(base.nodes[-1]), dtype=float)
    return adjoint_backward(base, system, upper, omega).nodes[0]
