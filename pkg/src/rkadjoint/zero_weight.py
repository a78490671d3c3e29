"""Costate integration for RK tableaus with vanishing weights.

When some ``b_i`` vanish the adjoint partner does not exist. For partitioned
systems of the special form ``dq/dt = f(q, t)``, ``dp/dt = L(q, t) + M(q, t) p``
the limit of the epsilon-regularised partners still exists and gives the
"fancy" p update implemented by :func:`fancy_p_step`:

    p_{n+1} = p_n + h sum_{i<=r} b_i l_i + h^2 sum_{a>r} M_a m_a
    P_i     = p_n + h sum_{j<=r} (b_j - b_j a_ji / b_i) l_j
                  + h^2 sum_{b>r} (1 - a_bi / b_i) M_b m_b          (i <= r)
    m_a     = -sum_{j<=r} b_j a_ja l_j - h sum_{b>r} a_ba M_b m_b    (a > r)

with ``l_i = L(Q_i) + M(Q_i) P_i`` and ``M_a = M(Q_a, t_n + c_a h)``. Stages
are reordered so that nonzero weights come first.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from rkadjoint.errors import NotSpecialForm, SingularMSystem
from rkadjoint.ode import OdeSystem, PartitionedSystem, QuadraticForm, TimeGrid, rk_step
from rkadjoint.tableau import PrkTableau, RkTableau, adjoint_partner


@dataclass(frozen=True)
class SpecialPartitionedSystem:
    """``dq/dt = f(q, t)``, ``dp/dt = L(q, t) + M(q, t) p``."""

    dim_q: int
    dim_p: int
    f: Callable
    L: Callable
    M: Callable
    f_q: Callable | None = None
    name: str = "special"

    def q_system(self) -> OdeSystem:
        return OdeSystem(self.dim_q, self.f, self.f_q, name=f"{self.name}:q")

    def g(self, q, p, t):
        return self.L(q, t) + self.M(q, t) @ p

    def as_partitioned(self) -> PartitionedSystem:
        return PartitionedSystem(
            self.dim_q, self.dim_p, lambda q, p, t: self.f(q, t), self.g, name=self.name
        )


def linear_special_system(Mfun) -> SpecialPartitionedSystem:
    """``dq/dt = M(t) q``, ``dp/dt = -M(t)^T p`` written in special form."""
    d = Mfun(0.0).shape[0]
    return SpecialPartitionedSystem(
        d, d,
        f=lambda q, t: Mfun(t) @ q,
        L=lambda q, t: np.zeros(d),
        M=lambda q, t: -Mfun(t).T,
        f_q=lambda q, t: Mfun(t),
        name="linear-special",
    )


@dataclass(frozen=True)
class ZeroWeightScheme:
    """A tableau whose stages are permuted so that ``b_1..b_r != 0 = b_{r+1}..b_s``."""

    base: RkTableau
    tab: RkTableau = field(init=False)
    perm: tuple[int, ...] = field(init=False)
    r: int = field(init=False)

    def __post_init__(self):
        b = self.base.b
        perm = [i for i in range(b.size) if b[i] != 0.0] + [i for i in range(b.size) if b[i] == 0.0]
        r = int(np.count_nonzero(b))
        if r < 1:
            raise ValueError("at least one weight must be nonzero")
        P = np.array(perm)
        tab = RkTableau(self.base.a[np.ix_(P, P)], b[P], self.base.c[P], name=self.base.name)
        object.__setattr__(self, "tab", tab)
        object.__setattr__(self, "perm", tuple(perm))
        object.__setattr__(self, "r", r)


@dataclass
class FancyStep:
    p_next: np.ndarray
    P: np.ndarray  # (r, dp)
    ell: np.ndarray  # (r, dp)
    m: np.ndarray  # (s - r, dp)
    Ms: np.ndarray  # (s - r, dp, dp)


def _require_special(sys):
    if not isinstance(sys, SpecialPartitionedSystem):
        raise NotSpecialForm(
            "the zero-weight costate update needs dp/dt = L(q, t) + M(q, t) p; "
            "declare the system as SpecialPartitionedSystem"
        )


def fancy_p_step(sys: SpecialPartitionedSystem, scheme: ZeroWeightScheme, Q, p, t, h) -> FancyStep:
    """p update for one step given the q stages ``Q`` (in ``scheme.tab`` order)."""
    _require_special(sys)
    tab, r = scheme.tab, scheme.r
    a, b, c, s = tab.a, tab.b, tab.c, tab.s
    dp = sys.dim_p
    p = np.asarray(p, dtype=float)
    Ls = np.stack([sys.L(Q[i], t + c[i] * h) for i in range(r)])
    Mi = np.stack([sys.M(Q[i], t + c[i] * h) for i in range(r)])
    Ma = np.stack([sys.M(Q[al], t + c[al] * h) for al in range(r, s)]).reshape(s - r, dp, dp)
    nz = s - r
    I = np.eye(dp)
    # unknowns: P_1..P_r, m_{r+1}..m_s; l_j = L_j + M_j P_j is substituted
    n_unk = s * dp
    A = np.zeros((n_unk, n_unk))
    rhs = np.zeros(n_unk)

    def P_cols(j):
        return slice(j * dp, (j + 1) * dp)

    def m_cols(al):
        return slice((r + al) * dp, (r + al + 1) * dp)

    for i in range(r):
        rows = P_cols(i)
        A[rows, P_cols(i)] += I
        rhs[rows] = p.copy()
        for j in range(r):
            coef = h * (b[j] - b[j] * a[j, i] / b[i])
            A[rows, P_cols(j)] -= coef * Mi[j]
            rhs[rows] += coef * Ls[j]
        for be in range(nz):
            coef = h * h * (1.0 - a[r + be, i] / b[i])
            A[rows, m_cols(be)] -= coef * Ma[be]
    for al in range(nz):
        rows = m_cols(al)
        A[rows, m_cols(al)] += I
        for j in range(r):
            coef = -b[j] * a[j, r + al]
            A[rows, P_cols(j)] -= coef * Mi[j]
            rhs[rows] += coef * Ls[j]
        for be in range(nz):
            A[rows, m_cols(be)] += h * a[r + be, r + al] * Ma[be]
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > 1e14:
        raise SingularMSystem(f"linear system for the p stages is singular (cond {cond:.3e})")
    z = np.linalg.solve(A, rhs)
    P = z[: r * dp].reshape(r, dp)
    m = z[r * dp:].reshape(nz, dp)
    ell = Ls + np.einsum("ijk,ik->ij", Mi, P)
    p_next = p + h * (b[:r] @ ell) + h * h * np.einsum("ajk,ak->j", Ma, m)
    return FancyStep(p_next, P, ell, m, Ma)


@dataclass
class FancyTrajectory:
    grid: TimeGrid
    scheme: ZeroWeightScheme
    q: np.ndarray
    p: np.ndarray
    Q: np.ndarray
    k: np.ndarray
    steps: list[FancyStep]


def fancy_integrate(sys: SpecialPartitionedSystem, scheme: ZeroWeightScheme, q0, p0, grid: TimeGrid) -> FancyTrajectory:
    """q with ``scheme.tab``, p with :func:`fancy_p_step`."""
    _require_special(sys)
    qsys = sys.q_system()
    N = grid.N
    q = np.zeros((N + 1, sys.dim_q))
    p = np.zeros((N + 1, sys.dim_p))
    Q = np.zeros((N, scheme.tab.s, sys.dim_q))
    k = np.zeros_like(Q)
    q[0], p[0] = q0, p0
    steps = []
    for n in range(N):
        h, t = grid.steps[n], grid.nodes[n]
        q[n + 1], Q[n], k[n] = rk_step(qsys, scheme.tab, q[n], t, h)
        st = fancy_p_step(sys, scheme, Q[n], p[n], t, h)
        p[n + 1] = st.p_next
        steps.append(st)
    return FancyTrajectory(grid, scheme, q, p, Q, k, steps)


def fancy_identity_residual(scheme: ZeroWeightScheme, form: QuadraticForm, q, p, k, ell, Ms, h) -> float:
    """Residual of the bilinear identity for one fancy step with arbitrary data.

    ``k`` (s, dq) are arbitrary q slopes, ``ell`` (r, dp) arbitrary p slopes and
    ``Ms`` (s - r, dp, dp) arbitrary matrices; the step relations fix the rest.
    """
    tab, r = scheme.tab, scheme.r
    a, b, s = tab.a, tab.b, tab.s
    nz = s - r
    dp = np.asarray(p).size
    q1 = q + h * (b @ k)
    Q = q + h * (a @ k)
    # m from its own (linear) relation given ell
    A = np.eye(nz * dp)
    rhs = np.zeros(nz * dp)
    for al in range(nz):
        rows = slice(al * dp, (al + 1) * dp)
        rhs[rows] = -sum(b[j] * a[j, r + al] * ell[j] for j in range(r))
        for be in range(nz):
            A[rows, be * dp:(be + 1) * dp] += h * a[r + be, r + al] * Ms[be]
    m = np.linalg.solve(A, rhs).reshape(nz, dp)
    Mm = np.einsum("ajk,ak->aj", Ms, m)
    P = np.stack(
        [
            p
            + h * sum((b[j] - b[j] * a[j, i] / b[i]) * ell[j] for j in range(r))
            + h * h * sum((1.0 - a[r + be, i] / b[i]) * Mm[be] for be in range(nz))
            for i in range(r)
        ]
    )
    p1 = p + h * (b[:r] @ ell) + h * h * Mm.sum(axis=0)
    first = sum(b[i] * (form(k[i], P[i]) + form(Q[i], ell[i])) for i in range(r))
    second = sum(form(k[r + al], m[al]) + form(Q[r + al], Mm[al]) for al in range(nz))
    return form(q1, p1) - form(q, p) - h * first - h * h * second


def epsilon_regularized_pair(scheme: ZeroWeightScheme | RkTableau, eps: float) -> PrkTableau:
    """Replace zero weights by ``eps`` and pair with the adjoint partner."""
    if eps == 0.0:
        raise ValueError("eps must be nonzero")
    base = scheme.base if isinstance(scheme, ZeroWeightScheme) else scheme
    b = np.where(base.b == 0.0, eps, base.b)
    reg = RkTableau(base.a, b, base.c, name=f"{base.name}[eps={eps:g}]")
    return adjoint_partner(reg)


def special_prk_integrate(sys: SpecialPartitionedSystem, ptab: PrkTableau, q0, p0, grid: TimeGrid):
    """PRK integration exploiting that f ignores p and g is affine in p.

    The q stages come from the lower tableau alone; the p stages then solve one
    linear system per step. Returns ``(q, p)`` node arrays.
    """
    qsys = sys.q_system()
    lo, up = ptab.lower, ptab.upper
    s, dp = ptab.s, sys.dim_p
    N = grid.N
    q = np.zeros((N + 1, sys.dim_q))
    p = np.zeros((N + 1, dp))
    q[0], p[0] = q0, p0
    for n in range(N):
        h, t = grid.steps[n], grid.nodes[n]
        q[n + 1], Q, _ = rk_step(qsys, lo, q[n], t, h)
        times = t + up.c * h
        Ls = np.stack([sys.L(Q[i], times[i]) for i in range(s)])
        Ms = np.stack([sys.M(Q[i], times[i]) for i in range(s)])
        # P_i = p + h sum_j A_ij (L_j + M_j P_j)
        blocks = up.a[:, :, None, None] * Ms[None, :, :, :]
        A = np.eye(s * dp) - h * blocks.transpose(0, 2, 1, 3).reshape(s * dp, s * dp)
        rhs = (p[n][None, :] + h * (up.a @ Ls)).ravel()
        P = np.linalg.solve(A, rhs).reshape(s, dp)
        ell = Ls + np.einsum("ijk,ik->ij", Ms, P)
        p[n + 1] = p[n] + h * (up.b @ ell)
    return q, p


@dataclass
class LimitReport:
    eps: list[float]
    gaps: list[float]
    slope: float | None


def _fit_slope(x: Sequence[float], y: Sequence[float]) -> float | None:
    if len(x) < 2:
        return None
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def limit_validation(sys, scheme: ZeroWeightScheme, q0, p0, grid: TimeGrid, eps_sequence) -> LimitReport:
    """Gap between regularised PRK runs and the fancy integrator as ``eps -> 0``."""
    _require_special(sys)
    ref = fancy_integrate(sys, scheme, q0, p0, grid)
    gaps = []
    for eps in eps_sequence:
        q, p = special_prk_integrate(sys, epsilon_regularized_pair(scheme, eps), q0, p0, grid)
        gaps.append(float(max(np.max(np.abs(q - ref.q)), np.max(np.abs(p - ref.p)))))
    eps = [float(e) for e in eps_sequence]
    return LimitReport(eps, gaps, _fit_slope(eps, gaps))
