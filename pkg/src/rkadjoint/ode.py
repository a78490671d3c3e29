"""Fixed-grid RK and PRK time stepping.

Implicit stage equations are solved by Newton on the stacked slope system when
Jacobians are supplied, otherwise by fixed-point sweeps. Every step keeps its
internal stages and slopes so that sensitivity passes can reuse them verbatim.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from rkadjoint.errors import GridMismatch, NonFiniteValue, StageSolveFailed
from rkadjoint.tableau import PrkTableau, RkTableau

STAGE_TOL = 1e-12
NEWTON_MAXITER = 50
FIXED_POINT_MAXITER = 200

Array = np.ndarray


@dataclass(frozen=True)
class OdeSystem:
    """``dx/dt = f(x, t)`` with an optional Jacobian ``jac_x(x, t)``."""

    dim: int
    f: Callable[[Array, float], Array]
    jac_x: Optional[Callable[[Array, float], Array]] = None
    name: str = "ode"


@dataclass(frozen=True)
class PartitionedSystem:
    """``dq/dt = f(q, p, t)``, ``dp/dt = g(q, p, t)``.

    The four Jacobian blocks are optional; Newton is used only when all are given.
    """

    dim_q: int
    dim_p: int
    f: Callable[[Array, Array, float], Array]
    g: Callable[[Array, Array, float], Array]
    f_q: Optional[Callable] = None
    f_p: Optional[Callable] = None
    g_q: Optional[Callable] = None
    g_p: Optional[Callable] = None
    name: str = "partitioned"

    @property
    def has_jacobians(self) -> bool:
        return None not in (self.f_q, self.f_p, self.g_q, self.g_p)

    def stacked(self) -> OdeSystem:
        """The same vector field on ``y = [q, p]`` as a plain ODE."""
        dq = self.dim_q

        def f(y, t):
            return np.concatenate([self.f(y[:dq], y[dq:], t), self.g(y[:dq], y[dq:], t)])

        jac = None
        if self.has_jacobians:

            def jac(y, t):
                q, p = y[:dq], y[dq:]
                return np.block(
                    [[self.f_q(q, p, t), self.f_p(q, p, t)], [self.g_q(q, p, t), self.g_p(q, p, t)]]
                )

        return OdeSystem(self.dim_q + self.dim_p, f, jac, name=self.name)


class TimeGrid:
    """Nodes ``t_0 < t_1 < ... < t_N`` given by the start time and step lengths."""

    def __init__(self, t0: float, steps):
        steps = np.asarray(steps, dtype=float).ravel()
        if np.any(~(steps > 0.0)):
            raise ValueError("all step lengths must be positive")
        self.t0 = float(t0)
        self.steps = steps
        self.steps.setflags(write=False)
        self.nodes = self.t0 + np.concatenate([[0.0], np.cumsum(steps)])

    @classmethod
    def uniform(cls, t0: float, T: float, N: int) -> "TimeGrid":
        if N < 0:
            raise ValueError("N must be nonnegative")
        return cls(t0, np.full(N, T / N) if N else [])

    @classmethod
    def from_h(cls, t0: float, T: float, h: float) -> "TimeGrid":
        """Uniform grid with ``N = round(T / h)`` steps of exactly ``T / N``."""
        N = int(round(T / h))
        if N < 1 or abs(N * h - T) > 1e-9 * max(1.0, abs(T)):
            raise ValueError(f"h={h} does not divide T={T}")
        return cls.uniform(t0, T, N)

    @property
    def N(self) -> int:
        return self.steps.size

    @property
    def T(self) -> float:
        return float(self.nodes[-1] - self.t0)

    def __eq__(self, other):
        return (
            isinstance(other, TimeGrid)
            and self.t0 == other.t0
            and np.array_equal(self.steps, other.steps)
        )

    def __repr__(self):
        return f"TimeGrid(t0={self.t0}, N={self.N}, T={self.T})"


@dataclass
class Trajectory:
    """Nodes ``x_n`` (N+1, d) plus per-step stages ``X_{n,i}`` and slopes ``k_{n,i}`` (N, s, d)."""

    grid: TimeGrid
    tab: RkTableau
    nodes: Array
    stages: Array
    slopes: Array

    def step_residuals(self) -> tuple[float, float]:
        """Max-norm residuals of the step and stage relations, re-checked post hoc."""
        if self.grid.N == 0:
            return 0.0, 0.0
        h = self.grid.steps[:, None]
        step = self.nodes[1:] - self.nodes[:-1] - h * np.einsum("i,nid->nd", self.tab.b, self.slopes)
        stage = (
            self.stages
            - self.nodes[:-1, None, :]
            - h[:, :, None] * np.einsum("ij,njd->nid", self.tab.a, self.slopes)
        )
        return float(np.max(np.abs(step))), float(np.max(np.abs(stage)))


@dataclass
class PrkTrajectory:
    grid: TimeGrid
    ptab: PrkTableau
    q: Array
    p: Array
    Q: Array
    P: Array
    k: Array
    l: Array


# -- stage solvers -------------------------------------------------------------


def _check_finite(*arrays):
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValue("non-finite value in stage computation")


def newton(residual, jacobian, z0, tol=STAGE_TOL, maxiter=NEWTON_MAXITER, what="stage system"):
    """Plain Newton iteration on ``residual(z) = 0`` with a max-norm stop test.

    The tolerance is scaled by ``max(1, |z|)`` so that large state values do
    not push the target below roundoff. A converged iterate gets one more
    correction before it is returned.
    """
    z = np.array(z0, dtype=float)
    for _ in range(maxiter):
        r = residual(z)
        _check_finite(r)
        if np.max(np.abs(r), initial=0.0) <= tol * max(1.0, np.max(np.abs(z), initial=0.0)):
            if np.any(r != 0.0):
                # one polishing step so independent solves land on the same root
                z = z - np.linalg.solve(jacobian(z), r)
            return z
        z = z - np.linalg.solve(jacobian(z), r)
    r = residual(z)
    if np.max(np.abs(r), initial=0.0) <= tol * max(1.0, np.max(np.abs(z), initial=0.0)):
        return z
    raise StageSolveFailed(f"Newton failed on {what}: residual {np.max(np.abs(r)):.3e}")


def _fixed_point(update, z0, tol=STAGE_TOL, maxiter=FIXED_POINT_MAXITER):
    z = np.array(z0, dtype=float)
    for _ in range(maxiter):
        z_new = update(z)
        _check_finite(z_new)
        if np.max(np.abs(z_new - z), initial=0.0) <= tol * max(1.0, np.max(np.abs(z_new), initial=0.0)):
            return update(z_new)
        z = z_new
    raise StageSolveFailed(f"fixed-point iteration did not converge in {maxiter} sweeps")


def rk_step(system: OdeSystem, tab: RkTableau, x, t, h, tol=STAGE_TOL):
    """One step of ``tab``; returns ``(x_next, stages, slopes)`` with shapes (d,), (s, d), (s, d)."""
    x = np.asarray(x, dtype=float)
    s, d = tab.s, x.size
    a, b, c = tab.a, tab.b, tab.c
    order = tab.explicit_order()
    if order is not None:
        K = np.zeros((s, d))
        X = np.zeros((s, d))
        for i in order:
            X[i] = x + h * (a[i] @ K)
            K[i] = system.f(X[i], t + c[i] * h)
        _check_finite(K)
    else:
        times = t + c * h

        def stages_of(Kf):
            return x + h * (a @ Kf.reshape(s, d))

        def F(Kf):
            X = stages_of(Kf)
            return np.concatenate([system.f(X[i], times[i]) for i in range(s)])

        K0 = np.tile(system.f(x, t), s)
        if system.jac_x is not None:

            def jac(Kf):
                X = stages_of(Kf)
                Js = np.stack([system.jac_x(X[i], times[i]) for i in range(s)])
                blocks = a[:, :, None, None] * Js[:, None, :, :]
                return np.eye(s * d) - h * blocks.transpose(0, 2, 1, 3).reshape(s * d, s * d)

            Kf = newton(lambda K: K - F(K), jac, K0, tol=tol)
        else:
            Kf = _fixed_point(F, K0, tol=tol)
        K = Kf.reshape(s, d)
        X = stages_of(Kf)
    x_next = x + h * (b @ K)
    _check_finite(x_next)
    return x_next, X, K


def rk_integrate(system: OdeSystem, tab: RkTableau, x0, grid: TimeGrid, tol=STAGE_TOL) -> Trajectory:
    x0 = np.asarray(x0, dtype=float)
    N, s, d = grid.N, tab.s, x0.size
    nodes = np.zeros((N + 1, d))
    stages = np.zeros((N, s, d))
    slopes = np.zeros((N, s, d))
    nodes[0] = x0
    for n in range(N):
        nodes[n + 1], stages[n], slopes[n] = rk_step(
            system, tab, nodes[n], grid.nodes[n], grid.steps[n], tol=tol
        )
    return Trajectory(grid, tab, nodes, stages, slopes)


def prk_step(system: PartitionedSystem, ptab: PrkTableau, q, p, t, h, tol=STAGE_TOL):
    """One PRK step; returns ``(q_next, p_next, Q, P, k, l)``."""
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    lo, up = ptab.lower, ptab.upper
    s, dq, dp = ptab.s, q.size, p.size
    tq, tp = t + lo.c * h, t + up.c * h

    def unpack(z):
        Kq = z[: s * dq].reshape(s, dq)
        Lp = z[s * dq :].reshape(s, dp)
        return Kq, Lp, q + h * (lo.a @ Kq), p + h * (up.a @ Lp)

    def F(z):
        _, _, Q, P = unpack(z)
        fk = np.concatenate([system.f(Q[i], P[i], tq[i]) for i in range(s)])
        gl = np.concatenate([system.g(Q[i], P[i], tp[i]) for i in range(s)])
        return np.concatenate([fk, gl])

    z0 = np.concatenate([np.tile(system.f(q, p, t), s), np.tile(system.g(q, p, t), s)])
    if system.has_jacobians:

        def jac(z):
            _, _, Q, P = unpack(z)
            # d(k_i)/d(k_j) = h f_q(Q_i) a_ij, d(k_i)/d(l_j) = h f_p(Q_i) A_ij, etc.
            def block(fun, times, coef, nrow, ncol):
                Js = np.stack([fun(Q[i], P[i], times[i]) for i in range(s)])
                out = coef[:, :, None, None] * Js[:, None, :, :]
                return out.transpose(0, 2, 1, 3).reshape(s * nrow, s * ncol)

            Dk = np.hstack([block(system.f_q, tq, lo.a, dq, dq), block(system.f_p, tq, up.a, dq, dp)])
            Dl = np.hstack([block(system.g_q, tp, lo.a, dp, dq), block(system.g_p, tp, up.a, dp, dp)])
            return np.eye(s * (dq + dp)) - h * np.vstack([Dk, Dl])

        z = newton(lambda z: z - F(z), jac, z0, tol=tol)
    else:
        z = _fixed_point(F, z0, tol=tol)
    Kq, Lp, Q, P = unpack(z)
    q_next = q + h * (lo.b @ Kq)
    p_next = p + h * (up.b @ Lp)
    _check_finite(q_next, p_next)
    return q_next, p_next, Q, P, Kq, Lp


def prk_integrate(system: PartitionedSystem, ptab: PrkTableau, q0, p0, grid: TimeGrid, tol=STAGE_TOL) -> PrkTrajectory:
    q0 = np.asarray(q0, dtype=float)
    p0 = np.asarray(p0, dtype=float)
    N, s, dq, dp = grid.N, ptab.s, q0.size, p0.size
    q = np.zeros((N + 1, dq))
    p = np.zeros((N + 1, dp))
    Q = np.zeros((N, s, dq))
    P = np.zeros((N, s, dp))
    k = np.zeros((N, s, dq))
    l = np.zeros((N, s, dp))
    q[0], p[0] = q0, p0
    for n in range(N):
        q[n + 1], p[n + 1], Q[n], P[n], k[n], l[n] = prk_step(
            system, ptab, q[n], p[n], grid.nodes[n], grid.steps[n], tol=tol
        )
    return PrkTrajectory(grid, ptab, q, p, Q, P, k, l)


# -- quadratic invariants ------------------------------------------------------


@dataclass(frozen=True)
class QuadraticForm:
    """Bilinear form ``u^T M v``; ``kind`` is ``"rk"`` for I(y, y) or ``"prk"`` for S(q, p).

    The matrix is used as given; no symmetrisation is applied.
    """

    matrix: Array
    kind: str = "prk"

    def __call__(self, u, v) -> float:
        return float(np.asarray(u) @ np.asarray(self.matrix) @ np.asarray(v))


def quadratic_drift(traj, form: QuadraticForm, source=None, p_traj: Optional[Trajectory] = None) -> Array:
    """Per-step ``S(n+1) - S(n) - h_n sum_i b_i phi(stage_i)``.

    ``traj`` is a :class:`PrkTrajectory`, or a :class:`Trajectory` for an RK-form
    invariant ``I(y, y)``. Passing ``p_traj`` treats ``traj`` and ``p_traj`` as
    the q and p halves integrated separately on the same grid. ``source`` is
    ``phi(q, p, t)`` (PRK form) or ``phi(y, t)`` (RK form); ``None`` means zero.
    """
    if p_traj is not None:
        if traj.grid != p_traj.grid:
            raise GridMismatch("q and p trajectories live on different grids")
        if not np.array_equal(traj.tab.b, p_traj.tab.b):
            raise GridMismatch("q and p trajectories use different weights")
        q, p, Q, P = traj.nodes, p_traj.nodes, traj.stages, p_traj.stages
        b, c, grid = traj.tab.b, traj.tab.c, traj.grid
    elif isinstance(traj, PrkTrajectory):
        q, p, Q, P = traj.q, traj.p, traj.Q, traj.P
        b, c, grid = traj.ptab.lower.b, traj.ptab.lower.c, traj.grid
    else:
        q = p = traj.nodes
        Q = P = traj.stages
        b, c, grid = traj.tab.b, traj.tab.c, traj.grid
    rk_form = p_traj is None and not isinstance(traj, PrkTrajectory)
    N = grid.N
    drift = np.zeros(N)
    for n in range(N):
        h, t = grid.steps[n], grid.nodes[n]
        drift[n] = form(q[n + 1], p[n + 1]) - form(q[n], p[n])
        if source is not None:
            if rk_form:
                src = sum(b[i] * source(Q[n, i], t + c[i] * h) for i in range(b.size))
            else:
                src = sum(b[i] * source(Q[n, i], P[n, i], t + c[i] * h) for i in range(b.size))
            drift[n] -= h * src
    return drift


def bilinear_step_identity(ptab: PrkTableau, form: QuadraticForm, q, p, k, l, h) -> float:
    """Residual of the purely algebraic bilinear identity for one PRK step.

    ``k`` and ``l`` are arbitrary slopes (not from any ODE); the step and stage
    relations define everything else. Vanishes for symplectic pairs.
    """
    lo, up = ptab.lower, ptab.upper
    q1 = q + h * (lo.b @ k)
    p1 = p + h * (up.b @ l)
    Q = q + h * (lo.a @ k)
    P = p + h * (up.a @ l)
    rhs = sum(lo.b[i] * (form(k[i], P[i]) + form(Q[i], l[i])) for i in range(ptab.s))
    return form(q1, p1) - form(q, p) - h * rhs


def check_jacobian(fun, jac, x, t=0.0) -> float:
    """Max abs error of ``jac`` against central differences with step ``1e-6 (1 + |x_j|)``."""
    x = np.asarray(x, dtype=float)
    J = np.asarray(jac(x, t))
    fd = np.zeros_like(J)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = 1e-6 * (1.0 + abs(x[j]))
        fd[:, j] = (fun(x + e, t) - fun(x - e, t)) / (2 * e[j])
    return float(np.max(np.abs(J - fd)))
