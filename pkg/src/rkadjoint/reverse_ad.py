"""Reverse accumulation through Lagrange multipliers on block-triangular programs.

A :class:`ConstraintProgram` defines intermediate blocks ``gamma^r`` implicitly
through ``Omega^r(alpha, gamma^1..gamma^r) = 0`` and a scalar objective
``Psi(alpha, gamma)``. The gradient of ``psi(alpha) = Psi(alpha, gamma(alpha))``
is ``grad_alpha Psi + sum_r (d Omega^r / d alpha)^T lambda^r`` where the
multipliers solve ``(d_gamma Omega)^T lambda = -grad_gamma Psi`` by backward
block substitution.

Only block-triangular programs are supported (each block may depend on itself
and earlier blocks). This covers every RK tape: explicit tableaus give one
block per slope, implicit ones one block per step of coupled slopes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from rkadjoint.errors import BlockSolveFailed, SingularBlock, StageSolveFailed
from rkadjoint.ode import OdeSystem, TimeGrid, newton
from rkadjoint.tableau import RkTableau

BLOCK_TOL = 1e-12


@dataclass(frozen=True)
class Constraint:
    """One block ``Omega^r``.

    ``residual(alpha, gam)``, ``jac_alpha(alpha, gam)`` and ``jac_gamma(alpha, gam)``
    receive ``gam`` as the list of block values (entries after ``r`` are unused).
    ``jac_gamma`` returns ``{block_index: matrix}`` for the own block and every
    entry of ``deps``.
    """

    size: int
    deps: tuple[int, ...]
    residual: Callable
    jac_alpha: Callable
    jac_gamma: Callable
    guess: Optional[Callable] = None
    name: str = ""


@dataclass(frozen=True)
class Objective:
    value: Callable
    grad_alpha: Callable
    grad_gamma: Callable  # -> {block_index: vector}


@dataclass(frozen=True)
class ConstraintProgram:
    n_independent: int
    constraints: tuple[Constraint, ...]
    objective: Objective

    def __post_init__(self):
        object.__setattr__(self, "constraints", tuple(self.constraints))
        for r, con in enumerate(self.constraints):
            bad = [q for q in con.deps if not 0 <= q < r]
            if bad:
                raise ValueError(f"block {r} ({con.name}) depends on non-earlier blocks {bad}")

    @property
    def n_intermediate(self) -> int:
        return sum(c.size for c in self.constraints)


@dataclass
class MultiplierVector:
    blocks: list[np.ndarray] = field(default_factory=list)

    def stacked(self) -> np.ndarray:
        return np.concatenate(self.blocks) if self.blocks else np.zeros(0)


def evaluate_forward(prog: ConstraintProgram, alpha, tol: float = BLOCK_TOL) -> list[np.ndarray]:
    """Solve the blocks in order; explicit blocks converge in one Newton step."""
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    gam: list[np.ndarray] = []
    for r, con in enumerate(prog.constraints):
        z0 = np.zeros(con.size) if con.guess is None else np.asarray(con.guess(alpha, gam), dtype=float)

        def res(z):
            return np.asarray(con.residual(alpha, gam + [z]), dtype=float)

        def jac(z):
            return np.asarray(con.jac_gamma(alpha, gam + [z])[r], dtype=float)

        try:
            z = newton(res, jac, z0, tol=tol, what=f"block {r} ({con.name})")
        except (StageSolveFailed, np.linalg.LinAlgError) as exc:
            raise BlockSolveFailed(str(exc)) from exc
        gam.append(z)
    return gam


def _dependents(prog: ConstraintProgram) -> list[list[int]]:
    users: list[list[int]] = [[] for _ in prog.constraints]
    for r, con in enumerate(prog.constraints):
        for q in con.deps:
            users[q].append(r)
    return users


def reverse_gradient(prog: ConstraintProgram, alpha, gamma: Optional[Sequence[np.ndarray]] = None):
    """Return ``(psi, grad_alpha psi, multipliers)``."""
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    gam = list(evaluate_forward(prog, alpha) if gamma is None else gamma)
    obj = prog.objective
    g_gamma = obj.grad_gamma(alpha, gam)
    R = len(prog.constraints)
    jacs = [prog.constraints[r].jac_gamma(alpha, gam) for r in range(R)]
    users = _dependents(prog)
    lam: list[Optional[np.ndarray]] = [None] * R
    for r in range(R - 1, -1, -1):
        rhs = -np.asarray(g_gamma.get(r, np.zeros(prog.constraints[r].size)), dtype=float)
        for q in users[r]:
            rhs = rhs - np.asarray(jacs[q][r]).T @ lam[q]
        own = np.asarray(jacs[r][r], dtype=float)
        try:
            cond = np.linalg.cond(own)
            if not np.isfinite(cond) or cond > 1e14:
                raise np.linalg.LinAlgError
            lam[r] = np.linalg.solve(own.T, rhs)
        except np.linalg.LinAlgError:
            raise SingularBlock(f"d Omega / d gamma is singular for block {r}") from None
    grad = np.asarray(obj.grad_alpha(alpha, gam), dtype=float).copy()
    for r, con in enumerate(prog.constraints):
        grad += np.asarray(con.jac_alpha(alpha, gam)).T @ lam[r]
    return float(obj.value(alpha, gam)), grad, MultiplierVector(lam)


def forward_tangent(prog: ConstraintProgram, alpha, direction, gamma=None) -> float:
    """Directional derivative of ``psi`` along ``direction`` by forward accumulation."""
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    v = np.atleast_1d(np.asarray(direction, dtype=float))
    gam = list(evaluate_forward(prog, alpha) if gamma is None else gamma)
    dot: list[np.ndarray] = []
    for r, con in enumerate(prog.constraints):
        J = con.jac_gamma(alpha, gam)
        rhs = -np.asarray(con.jac_alpha(alpha, gam)) @ v
        for q in con.deps:
            rhs = rhs - np.asarray(J[q]) @ dot[q]
        dot.append(np.linalg.solve(np.asarray(J[r]), rhs))
    obj = prog.objective
    g = obj.grad_gamma(alpha, gam)
    out = float(np.asarray(obj.grad_alpha(alpha, gam)) @ v)
    for r, vec in g.items():
        out += float(np.asarray(vec) @ dot[r])
    return out


# -- a small worked example ----------------------------------------------------


def toy_function(alpha: float) -> float:
    return alpha * np.sqrt(1.0 + alpha * np.exp(alpha) * np.cos(np.exp(alpha)))


def toy_program() -> ConstraintProgram:
    """``alpha sqrt(1 + alpha exp(alpha) cos(exp(alpha)))`` split into four explicit blocks."""
    one = np.ones((1, 1))

    def scal(x):
        return np.array([[x]])

    cons = (
        Constraint(
            1, (), lambda a, g: g[0] - np.exp(a),
            lambda a, g: scal(-np.exp(a[0])), lambda a, g: {0: one}, name="exp",
        ),
        Constraint(
            1, (0,), lambda a, g: g[1] - np.cos(g[0]),
            lambda a, g: np.zeros((1, 1)), lambda a, g: {1: one, 0: scal(np.sin(g[0][0]))}, name="cos",
        ),
        Constraint(
            1, (0, 1), lambda a, g: g[2] - a * g[0] * g[1],
            lambda a, g: scal(-g[0][0] * g[1][0]),
            lambda a, g: {2: one, 0: scal(-a[0] * g[1][0]), 1: scal(-a[0] * g[0][0])}, name="prod",
        ),
        Constraint(
            1, (2,), lambda a, g: g[3] - np.sqrt(1.0 + g[2]),
            lambda a, g: np.zeros((1, 1)),
            lambda a, g: {3: one, 2: scal(-0.5 / np.sqrt(1.0 + g[2][0]))}, name="sqrt",
        ),
    )
    obj = Objective(
        value=lambda a, g: a[0] * g[3][0],
        grad_alpha=lambda a, g: g[3].copy(),
        grad_gamma=lambda a, g: {3: a.copy()},
    )
    return ConstraintProgram(1, cons, obj)


# -- the RK tape ---------------------------------------------------------------


@dataclass(frozen=True)
class RkTape:
    """A constraint program for an RK integration plus the block bookkeeping.

    Blocks are ``x_0``, then per step the slopes (one block per ``k_{n,i}`` for
    explicit tableaus, one stacked block otherwise) followed by ``x_{n+1}``.
    Constraints are scaled so that the multipliers are ``lambda_0``,
    ``Lambda_{n,i}`` and ``lambda_{n+1}`` of the costate integration.
    """

    program: ConstraintProgram
    tab: RkTableau
    grid: TimeGrid
    dim: int
    node_blocks: tuple[int, ...]
    slope_blocks: tuple[tuple[int, ...], ...]  # per step, block index per stage (or one stacked)
    per_slope: bool

    def nodes(self, gamma) -> np.ndarray:
        return np.stack([gamma[r] for r in self.node_blocks])

    def node_multipliers(self, mult: MultiplierVector) -> np.ndarray:
        return np.stack([mult.blocks[r] for r in self.node_blocks])

    def stage_multipliers(self, mult: MultiplierVector) -> np.ndarray:
        s, d = self.tab.s, self.dim
        out = np.zeros((self.grid.N, s, d))
        for n, blocks in enumerate(self.slope_blocks):
            if self.per_slope:
                for i, r in enumerate(blocks):
                    out[n, i] = mult.blocks[r]
            else:
                out[n] = mult.blocks[blocks[0]].reshape(s, d)
        return out


def build_rk_tape(
    system: OdeSystem,
    tab: RkTableau,
    grid: TimeGrid,
    alpha,
    gradC: Callable[[np.ndarray], np.ndarray],
    cost: Optional[Callable[[np.ndarray], float]] = None,
) -> RkTape:
    """Tape of ``x_{n+1} - x_n - h sum b_i k_i`` and ``k_i - f(X_i)`` with ``Psi = C(x_N)``.

    ``alpha`` fixes the dimension. Zero weights are rejected with ``ZeroWeight``
    because the corresponding slope constraint would drop out of the Lagrangian.
    """
    tab.require_nonzero_weights()
    d = np.atleast_1d(np.asarray(alpha)).size
    a, b, c, s = tab.a, tab.b, tab.c, tab.s
    I = np.eye(d)
    order = tab.explicit_order()
    per_slope = order is not None
    cons: list[Constraint] = []

    cons.append(
        Constraint(d, (), lambda al, g: al - g[0], lambda al, g: I, lambda al, g: {0: -I},
                   guess=lambda al, g: al, name="x0")
    )
    node_blocks = [0]
    slope_blocks = []
    for n in range(grid.N):
        h, t = grid.steps[n], grid.nodes[n]
        xb = node_blocks[-1]
        if per_slope:
            kb: dict[int, int] = {}
            for i in order:
                deps_k = {j: kb[j] for j in range(s) if a[i, j] != 0.0}
                r = len(cons)
                cons.append(_slope_constraint(system, a, b, c, h, t, i, xb, deps_k, r, d))
                kb[i] = r
            blocks = tuple(kb[i] for i in range(s))
        else:
            r = len(cons)
            cons.append(_stacked_slope_constraint(system, a, b, c, h, t, xb, r, d))
            blocks = (r,)
        slope_blocks.append(blocks)
        r = len(cons)
        cons.append(_node_constraint(b, h, xb, blocks, per_slope, r, d))
        node_blocks.append(r)

    last = node_blocks[-1]
    obj = Objective(
        value=(lambda al, g: float(cost(g[last]))) if cost is not None else (lambda al, g: float("nan")),
        grad_alpha=lambda al, g: np.zeros(d),
        grad_gamma=lambda al, g: {last: np.asarray(gradC(g[last]), dtype=float)},
    )
    prog = ConstraintProgram(d, tuple(cons), obj)
    return RkTape(prog, tab, grid, d, tuple(node_blocks), tuple(slope_blocks), per_slope)


def _slope_constraint(system, a, b, c, h, t, i, xb, deps_k, r, d):
    ti = t + c[i] * h
    I = np.eye(d)

    def stage(g):
        X = g[xb].copy()
        for j, q in deps_k.items():
            X = X + h * a[i, j] * g[q]
        return X

    def residual(al, g):
        return -h * b[i] * (g[r] - system.f(stage(g), ti))

    def jac_gamma(al, g):
        J = system.jac_x(stage(g), ti)
        out = {r: -h * b[i] * I, xb: h * b[i] * J}
        for j, q in deps_k.items():
            out[q] = h * b[i] * h * a[i, j] * J
        return out

    return Constraint(
        d, (xb, *deps_k.values()), residual, lambda al, g: np.zeros((d, al.size)), jac_gamma,
        guess=lambda al, g: system.f(stage(g), ti),
        name="k",
    )


def _stacked_slope_constraint(system, a, b, c, h, t, xb, r, d):
    s = b.size
    times = t + c * h

    def stages(g):
        K = g[r].reshape(s, d)
        return g[xb] + h * (a @ K)

    def residual(al, g):
        K = g[r].reshape(s, d)
        X = stages(g)
        F = np.stack([system.f(X[i], times[i]) for i in range(s)])
        return (-h * b[:, None] * (K - F)).ravel()

    def jac_gamma(al, g):
        X = stages(g)
        Js = np.stack([system.jac_x(X[i], times[i]) for i in range(s)])
        own = np.zeros((s * d, s * d))
        wrt_x = np.zeros((s * d, d))
        for i in range(s):
            rows = slice(i * d, (i + 1) * d)
            wrt_x[rows] = h * b[i] * Js[i]
            for j in range(s):
                blk = h * b[i] * h * a[i, j] * Js[i]
                if i == j:
                    blk = blk - h * b[i] * np.eye(d)
                own[rows, j * d:(j + 1) * d] = blk
        return {r: own, xb: wrt_x}

    return Constraint(
        s * d, (xb,), residual, lambda al, g: np.zeros((s * d, al.size)), jac_gamma,
        guess=lambda al, g: np.tile(system.f(g[xb], t), s), name="K",
    )


def _node_constraint(b, h, xb, blocks, per_slope, r, d):
    I = np.eye(d)
    s = b.size

    def slopes(g):
        if per_slope:
            return np.stack([g[q] for q in blocks])
        return g[blocks[0]].reshape(s, d)

    def residual(al, g):
        return -(g[r] - g[xb] - h * (b @ slopes(g)))

    def jac_gamma(al, g):
        out = {r: -I, xb: I}
        if per_slope:
            for i, q in enumerate(blocks):
                out[q] = h * b[i] * I
        else:
            out[blocks[0]] = np.hstack([h * b[i] * I for i in range(s)])
        return out

    return Constraint(
        d, (xb, *blocks), residual, lambda al, g: np.zeros((d, al.size)), jac_gamma,
        guess=lambda al, g: g[xb] + h * (b @ slopes(g)), name="x",
    )
