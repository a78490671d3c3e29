"""Discrete optimal control with unconstrained controls.

Two routes to the same discrete solution:

* :func:`solve_indirect` discretises the state/costate/stationarity system
  with a PRK pair and solves the resulting square system by Newton.
* :func:`solve_direct` discretises only the state equation with an RK
  tableau, then solves the KKT system of the finite-dimensional problem.

For a tableau with nonzero weights the two coincide when the indirect route
uses the adjoint partner of the tableau for the costates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from rkadjoint.errors import NewtonDiverged, SingularHuu, UnsupportedMode
from rkadjoint.ode import TimeGrid
from rkadjoint.tableau import PrkTableau, RkTableau, adjoint_partner

MODES = ("fixed", "free", "both")
SOLVE_TOL = 1e-12
ACCEPT_TOL = 1e-10
FD_STEP = 1e-5
HUU_COND_MAX = 1e12


@dataclass(frozen=True)
class ControlSystem:
    """``dx/dt = f(x, u, t)`` with Jacobians ``f_x`` (dx, dx) and ``f_u`` (dx, du).

    ``hess_lf(x, u, lam, t) -> (Hxx, Hxu, Huu)`` gives the second derivatives
    of ``lam^T f``; when absent they are taken by central differences of the
    first derivatives.
    """

    dim_x: int
    dim_u: int
    f: Callable
    f_x: Callable
    f_u: Callable
    hess_lf: Optional[Callable] = None
    name: str = "control"


@dataclass(frozen=True)
class CostSpec:
    """Mayer-Lagrange cost ``C(x_N) + int D(x, u, t) dt`` plus boundary mode.

    ``mode`` is ``"fixed"`` (x_0 = alpha), ``"free"`` (x_0 free, lambda_0 = 0)
    or ``"both"`` (x_0 = alpha and x_N = beta).
    """

    mode: str = "fixed"
    alpha: Optional[np.ndarray] = None
    beta: Optional[np.ndarray] = None
    C: Optional[Callable] = None
    grad_C: Optional[Callable] = None
    hess_C: Optional[Callable] = None
    D: Optional[Callable] = None
    D_x: Optional[Callable] = None
    D_u: Optional[Callable] = None
    D_hess: Optional[Callable] = None  # -> (Dxx, Dxu, Duu)

    def __post_init__(self):
        if self.mode not in MODES:
            raise UnsupportedMode(f"unknown boundary mode {self.mode!r}; use one of {MODES}")
        if self.mode in ("fixed", "both") and self.alpha is None:
            raise UnsupportedMode(f"mode {self.mode!r} needs alpha")
        if self.mode == "both" and self.beta is None:
            raise UnsupportedMode("mode 'both' needs beta")
        if self.mode == "both" and self.D is None and self.C is None:
            raise UnsupportedMode("mode 'both' needs a running cost or a terminal cost")
        if self.D is not None and (self.D_x is None or self.D_u is None):
            raise UnsupportedMode("a running cost needs D_x and D_u")
        if self.C is not None and self.grad_C is None:
            raise UnsupportedMode("a terminal cost needs grad_C")

    @property
    def has_running(self) -> bool:
        return self.D is not None

    def with_mode(self, mode: str, **kw) -> "CostSpec":
        d = dict(self.__dict__)
        d.update(mode=mode, **kw)
        return CostSpec(**d)


# -- pointwise derivatives of the pseudo-Hamiltonian ---------------------------


def _grad_H(sys: ControlSystem, cost: CostSpec, x, u, lam, t):
    gx = sys.f_x(x, u, t).T @ lam
    gu = sys.f_u(x, u, t).T @ lam
    if cost.has_running:
        gx = gx + cost.D_x(x, u, t)
        gu = gu + cost.D_u(x, u, t)
    return gx, gu


def _hess_H(sys: ControlSystem, cost: CostSpec, x, u, lam, t):
    """``(Hxx, Hxu, Huu)`` of ``H = lam^T f + D`` in (x, u) at fixed lam."""
    dx, du = x.size, u.size
    analytic = sys.hess_lf is not None and (not cost.has_running or cost.D_hess is not None)
    if analytic:
        Hxx, Hxu, Huu = (np.array(m, dtype=float) for m in sys.hess_lf(x, u, lam, t))
        if cost.has_running:
            Dxx, Dxu, Duu = cost.D_hess(x, u, t)
            Hxx, Hxu, Huu = Hxx + Dxx, Hxu + Dxu, Huu + Duu
        return Hxx, Hxu, Huu
    v = np.concatenate([x, u])
    H = np.zeros((dx + du, dx + du))
    for j in range(dx + du):
        e = np.zeros_like(v)
        e[j] = FD_STEP * (1.0 + abs(v[j]))
        gp = np.concatenate(_grad_H(sys, cost, (v + e)[:dx], (v + e)[dx:], lam, t))
        gm = np.concatenate(_grad_H(sys, cost, (v - e)[:dx], (v - e)[dx:], lam, t))
        H[:, j] = (gp - gm) / (2 * e[j])
    H = 0.5 * (H + H.T)
    return H[:dx, :dx], H[:dx, dx:], H[dx:, dx:]


def _grad_C(cost: CostSpec, x):
    if cost.C is None:
        return np.zeros_like(x)
    return np.asarray(cost.grad_C(x), dtype=float)


def _hess_C(cost: CostSpec, x):
    if cost.C is None:
        return np.zeros((x.size, x.size))
    if cost.hess_C is not None:
        return np.asarray(cost.hess_C(x), dtype=float)
    H = np.zeros((x.size, x.size))
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = FD_STEP * (1.0 + abs(x[j]))
        H[:, j] = (cost.grad_C(x + e) - cost.grad_C(x - e)) / (2 * e[j])
    return 0.5 * (H + H.T)


def _check_huu(Huu, where):
    cond = np.linalg.cond(Huu) if Huu.size else 1.0
    if not np.isfinite(cond) or cond > HUU_COND_MAX:
        raise SingularHuu(where, float(cond))


# -- solution container ----------------------------------------------------------


@dataclass
class ControlSolution:
    method: str
    ptab: PrkTableau
    grid: TimeGrid
    x: np.ndarray  # (N+1, dx)
    lam: np.ndarray  # (N+1, dx)
    u: np.ndarray  # (N+1, du)
    X: np.ndarray  # (N, s, dx)
    Lam: np.ndarray  # (N, s, dx)
    U: np.ndarray  # (N, s, du)
    k: np.ndarray
    ell: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def max_gap(self, other: "ControlSolution") -> float:
        """Largest componentwise difference over every unknown block."""
        return float(
            max(
                np.max(np.abs(getattr(self, name) - getattr(other, name)))
                for name in ("x", "lam", "u", "X", "Lam", "U")
            )
        )


# -- indirect approach -------------------------------------------------------------


class DiscreteOptimalitySystem:
    """Square residual map of the PRK-discretised optimality system.

    Unknowns are ``x_n, lambda_n, u_n`` at every node and ``k_{n,i}, l_{n,i},
    U_{n,i}`` at every stage; stages ``X`` and ``Lambda`` follow from the stage
    relations. Rows: state and costate steps, slope definitions, stage and node
    stationarity, and two boundary blocks chosen by ``cost.mode``.
    """

    def __init__(self, sys: ControlSystem, cost: CostSpec, ptab: PrkTableau, grid: TimeGrid):
        self.sys, self.cost, self.ptab, self.grid = sys, cost, ptab, grid
        dx, du, s, N = sys.dim_x, sys.dim_u, ptab.s, grid.N
        self.dx, self.du, self.s, self.N = dx, du, s, N
        self.node_w = 2 * dx + du
        self.step_w = s * (2 * dx + du)
        self.node_off = 0
        self.step_off = (N + 1) * self.node_w
        self.size = self.step_off + N * self.step_w

    # index helpers
    def ix(self, n):
        b = n * self.node_w
        return slice(b, b + self.dx)

    def ilam(self, n):
        b = n * self.node_w + self.dx
        return slice(b, b + self.dx)

    def iu(self, n):
        b = n * self.node_w + 2 * self.dx
        return slice(b, b + self.du)

    def ik(self, n, i):
        b = self.step_off + n * self.step_w + i * self.dx
        return slice(b, b + self.dx)

    def iell(self, n, i):
        b = self.step_off + n * self.step_w + (self.s + i) * self.dx
        return slice(b, b + self.dx)

    def iU(self, n, i):
        b = self.step_off + n * self.step_w + 2 * self.s * self.dx + i * self.du
        return slice(b, b + self.du)

    def unpack(self, z):
        N, s, dx, du = self.N, self.s, self.dx, self.du
        nodes = z[: self.step_off].reshape(N + 1, self.node_w)
        steps = z[self.step_off:].reshape(N, self.step_w)
        x, lam, u = nodes[:, :dx], nodes[:, dx:2 * dx], nodes[:, 2 * dx:]
        k = steps[:, : s * dx].reshape(N, s, dx)
        ell = steps[:, s * dx: 2 * s * dx].reshape(N, s, dx)
        U = steps[:, 2 * s * dx:].reshape(N, s, du)
        h = self.grid.steps[:, None, None]
        lo, up = self.ptab.lower, self.ptab.upper
        X = x[:-1, None, :] + h * np.einsum("ij,njd->nid", lo.a, k)
        Lam = lam[:-1, None, :] + h * np.einsum("ij,njd->nid", up.a, ell)
        return dict(x=x, lam=lam, u=u, k=k, ell=ell, U=U, X=X, Lam=Lam)

    def pack(self, x, lam, u, k, ell, U):
        nodes = np.hstack([x, lam, u])
        N = self.N
        steps = np.hstack([k.reshape(N, -1), ell.reshape(N, -1), U.reshape(N, -1)])
        return np.concatenate([nodes.ravel(), steps.ravel()])

    def residual(self, z):
        sys, cost, N, s = self.sys, self.cost, self.N, self.s
        lo, up = self.ptab.lower, self.ptab.upper
        v = self.unpack(z)
        rows = []
        for n in range(N):
            h, t = self.grid.steps[n], self.grid.nodes[n]
            rows.append(v["x"][n + 1] - v["x"][n] - h * (lo.b @ v["k"][n]))
            rows.append(v["lam"][n + 1] - v["lam"][n] - h * (up.b @ v["ell"][n]))
            for i in range(s):
                X, U, Lam = v["X"][n, i], v["U"][n, i], v["Lam"][n, i]
                tc, tC = t + lo.c[i] * h, t + up.c[i] * h
                rows.append(v["k"][n, i] - sys.f(X, U, tc))
                gx, gu = _grad_H(sys, cost, X, U, Lam, tC)
                rows.append(v["ell"][n, i] + gx)
                rows.append(gu)
        for n in range(N + 1):
            rows.append(_grad_H(sys, cost, v["x"][n], v["u"][n], v["lam"][n], self.grid.nodes[n])[1])
        rows.extend(self._boundary(v))
        return np.concatenate(rows)

    def _boundary(self, v):
        cost, N = self.cost, self.N
        if cost.mode == "fixed":
            return [v["x"][0] - cost.alpha, v["lam"][N] - _grad_C(cost, v["x"][N])]
        if cost.mode == "free":
            return [v["lam"][0], v["lam"][N] - _grad_C(cost, v["x"][N])]
        return [v["x"][0] - cost.alpha, v["x"][N] - cost.beta]

    def jacobian(self, z):
        sys, cost, N, s, dx, du = self.sys, self.cost, self.N, self.s, self.dx, self.du
        lo, up = self.ptab.lower, self.ptab.upper
        v = self.unpack(z)
        J = np.zeros((self.size, self.size))
        I = np.eye(dx)
        r = 0

        def rows(m):
            nonlocal r
            sl = slice(r, r + m)
            r += m
            return sl

        for n in range(N):
            h, t = self.grid.steps[n], self.grid.nodes[n]
            R = rows(dx)
            J[R, self.ix(n + 1)] += I
            J[R, self.ix(n)] -= I
            for i in range(s):
                J[R, self.ik(n, i)] -= h * lo.b[i] * I
            R = rows(dx)
            J[R, self.ilam(n + 1)] += I
            J[R, self.ilam(n)] -= I
            for i in range(s):
                J[R, self.iell(n, i)] -= h * up.b[i] * I
            for i in range(s):
                X, U, Lam = v["X"][n, i], v["U"][n, i], v["Lam"][n, i]
                tc, tC = t + lo.c[i] * h, t + up.c[i] * h
                # k_i - f(X_i, U_i)
                R = rows(dx)
                fx, fu = sys.f_x(X, U, tc), sys.f_u(X, U, tc)
                J[R, self.ik(n, i)] += I
                J[R, self.ix(n)] -= fx
                for j in range(s):
                    J[R, self.ik(n, j)] -= h * lo.a[i, j] * fx
                J[R, self.iU(n, i)] -= fu
                # l_i + grad_x H and grad_u H at (X_i, U_i, Lambda_i)
                fxC, fuC = sys.f_x(X, U, tC), sys.f_u(X, U, tC)
                Hxx, Hxu, Huu = _hess_H(sys, cost, X, U, Lam, tC)
                for blk, (dlam, Dx, Du) in (
                    ("x", (fxC.T, Hxx, Hxu)),
                    ("u", (fuC.T, Hxu.T, Huu)),
                ):
                    R = rows(dx if blk == "x" else du)
                    if blk == "x":
                        J[R, self.iell(n, i)] += I
                    J[R, self.ilam(n)] += dlam
                    for j in range(s):
                        J[R, self.iell(n, j)] += h * up.a[i, j] * dlam
                    J[R, self.ix(n)] += Dx
                    for j in range(s):
                        J[R, self.ik(n, j)] += h * lo.a[i, j] * Dx
                    J[R, self.iU(n, i)] += Du
        for n in range(N + 1):
            tn = self.grid.nodes[n]
            x, u, lam = v["x"][n], v["u"][n], v["lam"][n]
            _, Hxu, Huu = _hess_H(sys, cost, x, u, lam, tn)
            R = rows(du)
            J[R, self.ix(n)] += Hxu.T
            J[R, self.iu(n)] += Huu
            J[R, self.ilam(n)] += sys.f_u(x, u, tn).T
        R = rows(dx)
        if cost.mode == "free":
            J[R, self.ilam(0)] += I
        else:
            J[R, self.ix(0)] += I
        R = rows(dx)
        if cost.mode == "both":
            J[R, self.ix(N)] += I
        else:
            J[R, self.ilam(N)] += I
            J[R, self.ix(N)] -= _hess_C(cost, v["x"][N])
        assert r == self.size
        return J

    def initial_guess(self):
        """States by forward Euler with u = 0, costates by backward Euler from grad C, controls 0."""
        sys, cost, N, s, dx, du = self.sys, self.cost, self.N, self.s, self.dx, self.du
        grid = self.grid
        x = np.zeros((N + 1, dx))
        x[0] = cost.alpha if cost.alpha is not None else 0.0
        u0 = np.zeros(du)
        for n in range(N):
            x[n + 1] = x[n] + grid.steps[n] * sys.f(x[n], u0, grid.nodes[n])
        if cost.mode == "both":
            # straight-line blend towards the final condition
            w = (grid.nodes - grid.t0) / max(grid.T, 1e-300)
            x = x + w[:, None] * (cost.beta - x[-1])
        lam = np.zeros((N + 1, dx))
        lam[N] = _grad_C(cost, x[N])
        for n in range(N - 1, -1, -1):
            gx, _ = _grad_H(sys, cost, x[n + 1], u0, lam[n + 1], grid.nodes[n + 1])
            lam[n] = lam[n + 1] + grid.steps[n] * gx
        u = np.zeros((N + 1, du))
        k = np.zeros((N, s, dx))
        ell = np.zeros((N, s, dx))
        U = np.zeros((N, s, du))
        for n in range(N):
            h, t = grid.steps[n], grid.nodes[n]
            for i in range(s):
                k[n, i] = sys.f(x[n], u0, t + self.ptab.lower.c[i] * h)
                ell[n, i] = -_grad_H(sys, cost, x[n], u0, lam[n], t)[0]
        return self.pack(x, lam, u, k, ell, U)


def assemble_discrete_system(sys: ControlSystem, cost: CostSpec, ptab: PrkTableau, grid: TimeGrid, mode: Optional[str] = None) -> DiscreteOptimalitySystem:
    if mode is not None and mode != cost.mode:
        cost = cost.with_mode(mode)
    return DiscreteOptimalitySystem(sys, cost, ptab, grid)


def _newton_solve(residual, jacobian, z0, tol=SOLVE_TOL, maxiter=50, what="optimality system"):
    """Newton with backtracking on ``|R|^2``; returns ``(z, iterations, final residual)``."""
    z = np.array(z0, dtype=float)
    r = residual(z)
    norm = np.max(np.abs(r))
    it = 0
    for it in range(1, maxiter + 1):
        if norm <= tol:
            return z, it - 1, norm
        try:
            step = np.linalg.solve(jacobian(z), r)
        except np.linalg.LinAlgError:
            raise NewtonDiverged(f"singular Newton matrix for the {what}", iterate=z) from None
        t = 1.0
        base = np.dot(r, r)
        while True:
            z_try = z - t * step
            r_try = residual(z_try)
            if np.all(np.isfinite(r_try)) and np.dot(r_try, r_try) <= (1 - 1e-4 * t) * base:
                break
            t *= 0.5
            if t < 1e-10:
                # no decrease possible; at roundoff level this is convergence
                if norm <= ACCEPT_TOL:
                    return z, it, norm
                raise NewtonDiverged(f"line search failed on the {what} (residual {norm:.3e})")
        z, r = z_try, r_try
        norm = np.max(np.abs(r))
    if norm <= ACCEPT_TOL:
        return z, maxiter, norm
    raise NewtonDiverged(f"Newton did not converge on the {what} (residual {norm:.3e})")


def _node_controls(sys, cost, x, lam, grid, u_guess):
    """``u_n`` from node stationarity ``grad_u H(x_n, lambda_n, u_n, t_n) = 0``."""
    u = np.array(u_guess, dtype=float)
    for n in range(grid.N + 1):
        t = grid.nodes[n]

        def res(v):
            return _grad_H(sys, cost, x[n], v, lam[n], t)[1]

        def jac(v):
            return _hess_H(sys, cost, x[n], v, lam[n], t)[2]

        u[n], _, _ = _newton_solve(res, jac, u[n], what=f"node control {n}")
    return u


def _scan_stage_huu(sys, cost, tab: RkTableau, grid: TimeGrid, X, U, Lam):
    """Raise ``SingularHuu`` for the first stage whose ``d_uu H`` is singular."""
    for n in range(grid.N):
        for i in range(tab.s):
            t = grid.nodes[n] + tab.c[i] * grid.steps[n]
            _check_huu(_hess_H(sys, cost, X[n, i], U[n, i], Lam[n, i], t)[2], f"step {n} stage {i + 1}")


def _diagnostics(sys, cost, sol: ControlSolution) -> dict:
    grid, lo, up = sol.grid, sol.ptab.lower, sol.ptab.upper
    gu_max = 0.0
    huu_cond = 1.0
    H_nodes = []
    for n in range(grid.N + 1):
        t = grid.nodes[n]
        gu = _grad_H(sys, cost, sol.x[n], sol.u[n], sol.lam[n], t)[1]
        gu_max = max(gu_max, float(np.max(np.abs(gu), initial=0.0)))
        Huu = _hess_H(sys, cost, sol.x[n], sol.u[n], sol.lam[n], t)[2]
        _check_huu(Huu, f"node {n}")
        huu_cond = max(huu_cond, float(np.linalg.cond(Huu)))
        H = float(sol.lam[n] @ sys.f(sol.x[n], sol.u[n], t))
        if cost.has_running:
            H += float(cost.D(sol.x[n], sol.u[n], t))
        H_nodes.append(H)
    for n in range(grid.N):
        h, t = grid.steps[n], grid.nodes[n]
        for i in range(sol.ptab.s):
            tC = t + up.c[i] * h
            gu = _grad_H(sys, cost, sol.X[n, i], sol.U[n, i], sol.Lam[n, i], tC)[1]
            gu_max = max(gu_max, float(np.max(np.abs(gu), initial=0.0)))
            Huu = _hess_H(sys, cost, sol.X[n, i], sol.U[n, i], sol.Lam[n, i], tC)[2]
            _check_huu(Huu, f"step {n} stage {i + 1}")
            huu_cond = max(huu_cond, float(np.linalg.cond(Huu)))
    return {"max_grad_u_H": gu_max, "max_cond_Huu": huu_cond, "H": H_nodes}


def solve_indirect(dos: DiscreteOptimalitySystem, initial_guess=None) -> ControlSolution:
    """Newton on the full square system (states, costates, slopes, controls)."""
    z0 = dos.initial_guess() if initial_guess is None else initial_guess
    try:
        z, iters, norm = _newton_solve(dos.residual, dos.jacobian, z0)
    except NewtonDiverged as exc:
        if exc.iterate is not None:
            v = dos.unpack(exc.iterate)
            _scan_stage_huu(dos.sys, dos.cost, dos.ptab.upper, dos.grid, v["X"], v["U"], v["Lam"])
        raise
    v = dos.unpack(z)
    sol = ControlSolution(
        "indirect", dos.ptab, dos.grid, v["x"].copy(), v["lam"].copy(), v["u"].copy(),
        v["X"].copy(), v["Lam"].copy(), v["U"].copy(), v["k"].copy(), v["ell"].copy(),
    )
    sol.diagnostics.update(newton_iterations=iters, residual=float(norm))
    sol.diagnostics.update(_diagnostics(dos.sys, dos.cost, sol))
    return sol


# -- direct approach ---------------------------------------------------------------


class _DirectNlp:
    """KKT system of ``min C(x_N) + sum h b_i D(X_i, U_i)`` subject to the RK equations.

    Constraints are ``x_0 - alpha``, ``x_{n+1} - x_n - h sum b_i k_i``,
    ``h b_i (k_i - f(X_i, U_i))`` and ``x_N - beta`` (mode dependent); with
    the Lagrangian ``J - mu^T c`` the multipliers are then directly the
    costate nodes and stages.
    """

    def __init__(self, sys: ControlSystem, cost: CostSpec, tab: RkTableau, grid: TimeGrid):
        self.sys, self.cost, self.tab, self.grid = sys, cost, tab, grid
        dx, du, s, N = sys.dim_x, sys.dim_u, tab.s, grid.N
        self.dx, self.du, self.s, self.N = dx, du, s, N
        self.step_w = s * (dx + du)
        self.nz = (N + 1) * dx + N * self.step_w
        self.has_init = cost.mode in ("fixed", "both")
        self.has_final = cost.mode == "both"
        self.nc = (dx if self.has_init else 0) + N * (1 + s) * dx + (dx if self.has_final else 0)

    def ix(self, n):
        return slice(n * self.dx, (n + 1) * self.dx)

    def ik(self, n, i):
        b = (self.N + 1) * self.dx + n * self.step_w + i * self.dx
        return slice(b, b + self.dx)

    def iU(self, n, i):
        b = (self.N + 1) * self.dx + n * self.step_w + self.s * self.dx + i * self.du
        return slice(b, b + self.du)

    def split(self, z):
        N, s, dx, du = self.N, self.s, self.dx, self.du
        x = z[: (N + 1) * dx].reshape(N + 1, dx)
        steps = z[(N + 1) * dx:].reshape(N, self.step_w)
        k = steps[:, : s * dx].reshape(N, s, dx)
        U = steps[:, s * dx:].reshape(N, s, du)
        X = x[:-1, None, :] + self.grid.steps[:, None, None] * np.einsum("ij,njd->nid", self.tab.a, k)
        return x, k, U, X

    def mu_slices(self):
        """Multiplier layout: (init, step_n, stage_{n,i}, final)."""
        dx, s, N = self.dx, self.s, self.N
        off = 0
        init = None
        if self.has_init:
            init = slice(0, dx)
            off = dx
        step = [slice(off + n * (1 + s) * dx, off + n * (1 + s) * dx + dx) for n in range(N)]
        stage = [
            [slice(off + n * (1 + s) * dx + (1 + i) * dx, off + n * (1 + s) * dx + (2 + i) * dx) for i in range(s)]
            for n in range(N)
        ]
        final = slice(self.nc - dx, self.nc) if self.has_final else None
        return init, step, stage, final

    def constraints(self, z):
        sys, tab, cost = self.sys, self.tab, self.cost
        x, k, U, X = self.split(z)
        out = []
        if self.has_init:
            out.append(x[0] - cost.alpha)
        for n in range(self.N):
            h, t = self.grid.steps[n], self.grid.nodes[n]
            out.append(x[n + 1] - x[n] - h * (tab.b @ k[n]))
            for i in range(self.s):
                out.append(h * tab.b[i] * (k[n, i] - sys.f(X[n, i], U[n, i], t + tab.c[i] * h)))
        if self.has_final:
            out.append(x[self.N] - cost.beta)
        return np.concatenate(out) if out else np.zeros(0)

    def constraint_jacobian(self, z):
        sys, tab = self.sys, self.tab
        x, k, U, X = self.split(z)
        dx, s = self.dx, self.s
        I = np.eye(dx)
        Jc = np.zeros((self.nc, self.nz))
        r = 0
        if self.has_init:
            Jc[r:r + dx, self.ix(0)] = I
            r += dx
        for n in range(self.N):
            h, t = self.grid.steps[n], self.grid.nodes[n]
            R = slice(r, r + dx)
            Jc[R, self.ix(n + 1)] += I
            Jc[R, self.ix(n)] -= I
            for i in range(s):
                Jc[R, self.ik(n, i)] -= h * tab.b[i] * I
            r += dx
            for i in range(s):
                R = slice(r, r + dx)
                tc = t + tab.c[i] * h
                fx, fu = sys.f_x(X[n, i], U[n, i], tc), sys.f_u(X[n, i], U[n, i], tc)
                w = h * tab.b[i]
                Jc[R, self.ik(n, i)] += w * I
                Jc[R, self.ix(n)] -= w * fx
                for j in range(s):
                    Jc[R, self.ik(n, j)] -= w * h * tab.a[i, j] * fx
                Jc[R, self.iU(n, i)] -= w * fu
                r += dx
        if self.has_final:
            Jc[r:r + dx, self.ix(self.N)] = I
        return Jc

    def objective_gradient(self, z):
        cost, tab = self.cost, self.tab
        x, k, U, X = self.split(z)
        g = np.zeros(self.nz)
        g[self.ix(self.N)] += _grad_C(cost, x[self.N])
        if cost.has_running:
            for n in range(self.N):
                h, t = self.grid.steps[n], self.grid.nodes[n]
                for i in range(self.s):
                    tc = t + tab.c[i] * h
                    w = h * tab.b[i]
                    Dx, Du = cost.D_x(X[n, i], U[n, i], tc), cost.D_u(X[n, i], U[n, i], tc)
                    g[self.ix(n)] += w * Dx
                    for j in range(self.s):
                        g[self.ik(n, j)] += w * h * tab.a[i, j] * Dx
                    g[self.iU(n, i)] += w * Du
        return g

    def lagrangian_hessian(self, z, mu):
        """Second derivatives of ``J - mu^T c``; per stage this is ``h b_i`` times
        the Hessian of ``D + mu_stage^T f`` pulled back through ``X_i(x_n, k)``."""
        sys, cost, tab = self.sys, self.cost, self.tab
        x, k, U, X = self.split(z)
        _, _, stage, _ = self.mu_slices()
        Hm = np.zeros((self.nz, self.nz))
        Hm[self.ix(self.N), self.ix(self.N)] += _hess_C(cost, x[self.N])
        dx, du, s = self.dx, self.du, self.s
        for n in range(self.N):
            h, t = self.grid.steps[n], self.grid.nodes[n]
            for i in range(s):
                tc = t + tab.c[i] * h
                Hxx, Hxu, Huu = _hess_H(sys, cost, X[n, i], U[n, i], mu[stage[n][i]], tc)
                w = h * tab.b[i]
                # columns touched by (X_i, U_i) with their chain-rule weights
                xcols = [(self.ix(n), 1.0)] + [(self.ik(n, j), h * tab.a[i, j]) for j in range(s)]
                for ca, wa in xcols:
                    for cb, wb in xcols:
                        Hm[ca, cb] += w * wa * wb * Hxx
                    Hm[ca, self.iU(n, i)] += w * wa * Hxu
                    Hm[self.iU(n, i), ca] += w * wa * Hxu.T
                Hm[self.iU(n, i), self.iU(n, i)] += w * Huu
        return Hm

    def kkt(self, w):
        z, mu = w[: self.nz], w[self.nz:]
        Jc = self.constraint_jacobian(z)
        return np.concatenate([self.objective_gradient(z) - Jc.T @ mu, self.constraints(z)])

    def kkt_jacobian(self, w):
        z, mu = w[: self.nz], w[self.nz:]
        Jc = self.constraint_jacobian(z)
        Hl = self.lagrangian_hessian(z, mu)
        top = np.hstack([Hl, -Jc.T])
        bottom = np.hstack([Jc, np.zeros((self.nc, self.nc))])
        return np.vstack([top, bottom])

    def pack_multipliers(self, lam, Lam):
        mu = np.zeros(self.nc)
        init, step, stage, final = self.mu_slices()
        if init is not None:
            mu[init] = lam[0]
        for n in range(self.N):
            mu[step[n]] = lam[n + 1]
            for i in range(self.s):
                mu[stage[n][i]] = Lam[n, i]
        if final is not None:
            mu[final] = 0.0
        return mu

    def initial_guess(self):
        dos = DiscreteOptimalitySystem(self.sys, self.cost, PrkTableau.diagonal(self.tab), self.grid)
        v = dos.unpack(dos.initial_guess())
        z = np.concatenate([v["x"].ravel(), np.hstack([v["k"].reshape(self.N, -1), v["U"].reshape(self.N, -1)]).ravel()])
        return np.concatenate([z, self.pack_multipliers(v["lam"], v["Lam"])])


def solve_direct(sys: ControlSystem, cost: CostSpec, tab: RkTableau, grid: TimeGrid, mode: Optional[str] = None, initial_guess=None) -> ControlSolution:
    """Discretise, then optimise: Newton on the KKT system of the discrete problem.

    The costates are read off the multipliers; node controls come from node
    stationarity. Tableaus with a zero weight are rejected (``ZeroWeight``):
    the corresponding slope constraint would not appear in the Lagrangian.
    """
    tab.require_nonzero_weights()
    if mode is not None and mode != cost.mode:
        cost = cost.with_mode(mode)
    nlp = _DirectNlp(sys, cost, tab, grid)
    w0 = nlp.initial_guess() if initial_guess is None else initial_guess
    try:
        w, iters, norm = _newton_solve(nlp.kkt, nlp.kkt_jacobian, w0, what="KKT system")
    except NewtonDiverged as exc:
        if exc.iterate is not None:
            _, _, U, X = nlp.split(exc.iterate[: nlp.nz])
            _, _, stage, _ = nlp.mu_slices()
            Lam = np.array([[exc.iterate[nlp.nz:][sl] for sl in row] for row in stage]).reshape(X.shape)
            _scan_stage_huu(sys, cost, tab, grid, X, U, Lam)
        raise
    z, mu = w[: nlp.nz], w[nlp.nz:]
    x, k, U, X = nlp.split(z)
    init, step, stage, _ = nlp.mu_slices()
    N, s, dx = grid.N, tab.s, sys.dim_x
    lam = np.zeros((N + 1, dx))
    Lam = np.zeros((N, s, dx))
    if init is not None:
        lam[0] = mu[init]
    for n in range(N):
        lam[n + 1] = mu[step[n]]
        for i in range(s):
            Lam[n, i] = mu[stage[n][i]]
    ell = np.zeros((N, s, dx))
    for n in range(N):
        h, t = grid.steps[n], grid.nodes[n]
        for i in range(s):
            ell[n, i] = -_grad_H(sys, cost, X[n, i], U[n, i], Lam[n, i], t + tab.c[i] * h)[0]
    u_guess = np.vstack([U[:, 0, :], U[-1:, -1, :]]) if N else np.zeros((1, sys.dim_u))
    u = _node_controls(sys, cost, x, lam, grid, u_guess)
    sol = ControlSolution(
        "direct", adjoint_partner(tab), grid, x.copy(), lam, u, X.copy(), Lam, U.copy(), k.copy(), ell
    )
    sol.diagnostics.update(newton_iterations=iters, residual=float(norm))
    sol.diagnostics.update(_diagnostics(sys, cost, sol))
    sol.diagnostics["kkt_residual"] = float(norm)
    return sol


def kkt_residual(sol: ControlSolution, sys: ControlSystem, cost: CostSpec, tab: RkTableau, grid: TimeGrid) -> float:
    """Max-norm of the discrete first-order conditions evaluated at ``sol``.

    The state stages use ``tab``; the multipliers are taken from the solution's
    costate nodes and stages.
    """
    nlp = _DirectNlp(sys, cost, tab, grid)
    N = grid.N
    z = np.concatenate([sol.x.ravel(), np.hstack([sol.k.reshape(N, -1), sol.U.reshape(N, -1)]).ravel()])
    mu = nlp.pack_multipliers(sol.lam, sol.Lam)
    if nlp.has_final:
        # the multiplier of x_N = beta is whatever closes the x_N row
        _, _, _, final = nlp.mu_slices()
        mu[final] = 0.0
        g = nlp.kkt(np.concatenate([z, mu]))
        mu[final] = g[nlp.ix(N)]
    return float(np.max(np.abs(nlp.kkt(np.concatenate([z, mu])))))


# -- conservation audit ------------------------------------------------------------


@dataclass
class AuditReport:
    products: np.ndarray  # lambda_n^T delta_n
    sources: np.ndarray  # h sum b_i (D_x^T Delta_i + D_u^T Z_i) per step
    delta: np.ndarray

    @property
    def defects(self) -> np.ndarray:
        """``lambda_{n+1}^T delta_{n+1} - lambda_n^T delta_n + source_n``; zero for symplectic pairs."""
        return np.diff(self.products) + self.sources


def lambda_delta_audit(sol: ControlSolution, sys: ControlSystem, cost: CostSpec, delta0, Z) -> AuditReport:
    """Propagate a variation of the discrete state equations and audit ``lambda^T delta``.

    ``delta0`` is the initial variation and ``Z`` (N, s, du) arbitrary stage
    control variations; ``delta`` then solves the linearised RK equations.
    """
    grid, lo = sol.grid, sol.ptab.lower
    N, s, dx = grid.N, lo.s, sys.dim_x
    Z = np.asarray(Z, dtype=float).reshape(N, s, sys.dim_u)
    delta = np.zeros((N + 1, dx))
    delta[0] = delta0
    sources = np.zeros(N)
    for n in range(N):
        h, t = grid.steps[n], grid.nodes[n]
        tc = t + lo.c * h
        fx = np.stack([sys.f_x(sol.X[n, i], sol.U[n, i], tc[i]) for i in range(s)])
        fu = np.stack([sys.f_u(sol.X[n, i], sol.U[n, i], tc[i]) for i in range(s)])
        blocks = lo.a[:, :, None, None] * fx[:, None, :, :]
        M = np.eye(s * dx) - h * blocks.transpose(0, 2, 1, 3).reshape(s * dx, s * dx)
        rhs = (np.einsum("ijk,k->ij", fx, delta[n]) + np.einsum("ijk,ik->ij", fu, Z[n])).ravel()
        d = np.linalg.solve(M, rhs).reshape(s, dx)
        Delta = delta[n] + h * (lo.a @ d)
        delta[n + 1] = delta[n] + h * (lo.b @ d)
        if cost.has_running:
            sources[n] = h * sum(
                lo.b[i] * (cost.D_x(sol.X[n, i], sol.U[n, i], tc[i]) @ Delta[i]
                           + cost.D_u(sol.X[n, i], sol.U[n, i], tc[i]) @ Z[n, i])
                for i in range(s)
            )
    products = np.einsum("nd,nd->n", sol.lam, delta)
    return AuditReport(products, sources, delta)


# -- reference problems ------------------------------------------------------------


def lq_problem(T: float = 1.0):
    """``dx/dt = u``, minimise ``(1/2) int_0^T (x^2 + u^2) dt``, ``x(0) = 1``."""
    sys = ControlSystem(
        1, 1,
        f=lambda x, u, t: u.copy(),
        f_x=lambda x, u, t: np.zeros((1, 1)),
        f_u=lambda x, u, t: np.eye(1),
        hess_lf=lambda x, u, lam, t: (np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1))),
        name="lq",
    )
    cost = CostSpec(
        mode="fixed",
        alpha=np.array([1.0]),
        D=lambda x, u, t: 0.5 * float(x @ x + u @ u),
        D_x=lambda x, u, t: x.copy(),
        D_u=lambda x, u, t: u.copy(),
        D_hess=lambda x, u, t: (np.eye(1), np.zeros((1, 1)), np.eye(1)),
    )
    return sys, cost


def lq_exact(t, T: float = 1.0):
    """Closed-form optimum of :func:`lq_problem`: ``(x, lambda, u)`` at times ``t``."""
    t = np.asarray(t, dtype=float)
    x = np.cosh(T - t) / np.cosh(T)
    lam = np.sinh(T - t) / np.cosh(T)
    return x, lam, -lam


def lq_mayer_problem():
    """The LQ problem in Mayer form: the running cost becomes a second state."""
    sys = ControlSystem(
        2, 1,
        f=lambda x, u, t: np.array([u[0], 0.5 * (x[0] ** 2 + u[0] ** 2)]),
        f_x=lambda x, u, t: np.array([[0.0, 0.0], [x[0], 0.0]]),
        f_u=lambda x, u, t: np.array([[1.0], [u[0]]]),
        hess_lf=lambda x, u, lam, t: (
            np.array([[lam[1], 0.0], [0.0, 0.0]]), np.zeros((2, 1)), np.array([[lam[1]]])
        ),
        name="lq-mayer",
    )
    cost = CostSpec(
        mode="fixed",
        alpha=np.array([1.0, 0.0]),
        C=lambda x: float(x[1]),
        grad_C=lambda x: np.array([0.0, 1.0]),
        hess_C=lambda x: np.zeros((2, 2)),
    )
    return sys, cost


def nonlinear_problem():
    """``dx/dt = sin(x) + u``, cost ``x_N^2 / 2 + int (x^2 + u^2) / 2``; derivatives
    of ``lambda^T f`` are left to finite differences."""
    sys = ControlSystem(
        1, 1,
        f=lambda x, u, t: np.sin(x) + u,
        f_x=lambda x, u, t: np.array([[np.cos(x[0])]]),
        f_u=lambda x, u, t: np.eye(1),
        name="sine",
    )
    cost = CostSpec(
        mode="fixed",
        alpha=np.array([0.5]),
        C=lambda x: 0.5 * float(x @ x),
        grad_C=lambda x: x.copy(),
        D=lambda x, u, t: 0.5 * float(x @ x + u @ u),
        D_x=lambda x, u, t: x.copy(),
        D_u=lambda x, u, t: u.copy(),
    )
    return sys, cost


# -- mechanics ---------------------------------------------------------------------


@dataclass(frozen=True)
class MechanicalLagrangian:
    """``L(x, u, t)`` with gradients; ``hess`` optionally returns ``(Lxx, Lxu, Luu)``."""

    dim: int
    L: Callable
    L_x: Callable
    L_u: Callable
    hess: Optional[Callable] = None


def harmonic_lagrangian() -> MechanicalLagrangian:
    return MechanicalLagrangian(
        1,
        L=lambda x, u, t: 0.5 * float(u @ u - x @ x),
        L_x=lambda x, u, t: -x,
        L_u=lambda x, u, t: u.copy(),
        hess=lambda x, u, t: (-np.eye(1), np.zeros((1, 1)), np.eye(1)),
    )


def pendulum_lagrangian() -> MechanicalLagrangian:
    return MechanicalLagrangian(
        1,
        L=lambda x, u, t: 0.5 * float(u @ u) + float(np.cos(x[0])),
        L_x=lambda x, u, t: -np.sin(x),
        L_u=lambda x, u, t: u.copy(),
        hess=lambda x, u, t: (np.array([[-np.cos(x[0])]]), np.zeros((1, 1)), np.eye(1)),
    )


def free_particle_lagrangian(dim: int = 1) -> MechanicalLagrangian:
    return MechanicalLagrangian(
        dim,
        L=lambda x, u, t: 0.5 * float(u @ u),
        L_x=lambda x, u, t: np.zeros(dim),
        L_u=lambda x, u, t: u.copy(),
        hess=lambda x, u, t: (np.zeros((dim, dim)), np.zeros((dim, dim)), np.eye(dim)),
    )


def action_problem(lag: MechanicalLagrangian, x_start, x_end):
    """Stationary action as a control problem: ``dx/dt = u``, ``D = -L``, both ends fixed."""
    d = lag.dim
    sys = ControlSystem(
        d, d,
        f=lambda x, u, t: u.copy(),
        f_x=lambda x, u, t: np.zeros((d, d)),
        f_u=lambda x, u, t: np.eye(d),
        hess_lf=lambda x, u, lam, t: (np.zeros((d, d)), np.zeros((d, d)), np.zeros((d, d))),
        name="action",
    )
    D_hess = None
    if lag.hess is not None:
        D_hess = lambda x, u, t: tuple(-np.asarray(m) for m in lag.hess(x, u, t))  # noqa: E731
    cost = CostSpec(
        mode="both",
        alpha=np.atleast_1d(np.asarray(x_start, dtype=float)),
        beta=np.atleast_1d(np.asarray(x_end, dtype=float)),
        D=lambda x, u, t: -lag.L(x, u, t),
        D_x=lambda x, u, t: -np.asarray(lag.L_x(x, u, t)),
        D_u=lambda x, u, t: -np.asarray(lag.L_u(x, u, t)),
        D_hess=D_hess,
    )
    return sys, cost


def mechanics_demo(lag: MechanicalLagrangian, tab: RkTableau, grid: TimeGrid, endpoints) -> ControlSolution:
    """Make the discrete action stationary between fixed endpoints.

    Solved through the indirect system with the adjoint-partner pairing; the
    diagnostics record ``max |Lambda - grad_u L|`` over all stages, i.e. how
    far the costates are from the mechanical momenta.
    """
    tab.require_nonzero_weights()
    x_start, x_end = endpoints
    sys, cost = action_problem(lag, x_start, x_end)
    dos = DiscreteOptimalitySystem(sys, cost, adjoint_partner(tab), grid)
    sol = solve_indirect(dos)
    gap = 0.0
    for n in range(grid.N):
        for i in range(tab.s):
            t = grid.nodes[n] + tab.c[i] * grid.steps[n]
            gap = max(gap, float(np.max(np.abs(sol.Lam[n, i] - lag.L_u(sol.X[n, i], sol.U[n, i], t)))))
    sol.diagnostics["momentum_gap"] = gap
    return sol
