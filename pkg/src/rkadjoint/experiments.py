"""Reproduction targets and measurement sweeps shared by the CLI and the tests."""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Optional, Sequence

import numpy as np

from rkadjoint.control import (
    DiscreteOptimalitySystem,
    lq_exact,
    lq_problem,
    solve_indirect,
)
from rkadjoint.errors import MismatchReport
from rkadjoint.ode import OdeSystem, TimeGrid, quadratic_drift, QuadraticForm, rk_integrate
from rkadjoint.problems import LOTKA_X0, lotka_volterra, time_dependent_matrix
from rkadjoint.tableau import PrkTableau, RkTableau, adjoint_partner, builtin
from rkadjoint.variational import SensitivityProblem, sensitivity_pair
from rkadjoint.zero_weight import ZeroWeightScheme, fancy_integrate, limit_validation, linear_special_system

ETA = np.array([1.0, 0.0])
OMEGA = np.array([1.0, 0.0])

# reference sensitivity-table cells: h -> (lambda_0^T eta, omega^T delta_N, col3 - ref, col2 - ref)
TABLE1_PUBLISHED = {
    0.100: ("-0.1070", "-0.2497", "0.0717", "-0.0710"),
    0.050: ("-0.1401", "-0.2135", "0.0385", "-0.0348"),
    0.025: ("-0.1588", "-0.1959", "0.0199", "-0.0172"),
}
TABLE1_COLUMNS = ("h", "lam0_eta", "omega_deltaN", "lam0_eta_minus_ref", "omega_deltaN_minus_ref")
TABLE1_TOL = 5e-5
FIG1_VALUE = -0.1786
FIG1_TOL = 5e-4
FIG1_DUALITY_TOL = 1e-10


def round4(x: float) -> str:
    """Round half away from zero to four decimals, as printed tables do."""
    d = Decimal(repr(float(x))).quantize(Decimal("0.0001"), rounding=ROUND_HALF_UP)
    if d == 0:
        d = abs(d)
    return f"{d:.4f}"


def lotka_sensitivity(tab: RkTableau, h: float, upper: Optional[RkTableau] = None, eta=ETA, omega=OMEGA):
    problem = SensitivityProblem(lotka_volterra(), LOTKA_X0, eta, omega, TimeGrid.from_h(0.0, 1.0, h))
    return sensitivity_pair(problem, tab, upper)


# -- sensitivity table --


@dataclass
class Table1Result:
    rows: list[dict]
    radau_rows: list[dict]
    reference: float
    mismatches: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.mismatches


def reference_sensitivity(h: float = 1e-4) -> tuple[float, float]:
    """``(omega^T delta(1), lambda(0)^T eta)`` from Gauss s=2, which is symplectic."""
    res = lotka_sensitivity(builtin("gauss2"), h)
    return res.forward, res.reverse


def table1(hs: Sequence[float] = (0.1, 0.05, 0.025), reference: Optional[float] = None,
           reference_h: float = 1e-4, tol: float = TABLE1_TOL) -> Table1Result:
    """Euler/Euler sensitivities on Lotka-Volterra, plus the Radau IA costate variant.

    Cells are compared after half-away-from-zero rounding; the two raw
    sensitivity columns must also lie within ``tol`` of the printed values.
    """
    if reference is None:
        reference = reference_sensitivity(reference_h)[0]
    euler, radau = builtin("euler"), builtin("radau1a")
    rows, radau_rows, bad = [], [], []
    for h in hs:
        res = lotka_sensitivity(euler, h)
        row = {
            "h": float(h),
            "lam0_eta": res.reverse,
            "omega_deltaN": res.forward,
            "lam0_eta_minus_ref": res.reverse - reference,
            "omega_deltaN_minus_ref": res.forward - reference,
        }
        rows.append(row)
        rad = lotka_sensitivity(euler, h, upper=radau)
        radau_rows.append({"h": float(h), "lam0_eta": rad.reverse, "euler_omega_deltaN": res.forward,
                           "difference": rad.reverse - res.forward})
        published = TABLE1_PUBLISHED.get(round(float(h), 3))
        if published is None:
            continue
        for col, text in zip(TABLE1_COLUMNS[1:], published):
            if round4(row[col]) != text:
                bad.append(f"h={h:g} {col}: got {round4(row[col])} ({row[col]:.8f}), published {text}")
        for col, text in zip(TABLE1_COLUMNS[1:3], published[:2]):
            if not abs(row[col] - float(text)) <= tol:
                bad.append(f"h={h:g} {col}: |{row[col]:.8f} - {text}| > {tol:g}")
    return Table1Result(rows, radau_rows, reference, bad)


def check_table1(result: Table1Result, radau_tol: float = 1e-11) -> None:
    cells = list(result.mismatches)
    for r in result.radau_rows:
        if not abs(r["difference"]) <= radau_tol:
            cells.append(f"h={r['h']:g} radau lam0_eta differs from euler omega_deltaN by {r['difference']:.3e}")
    if cells:
        raise MismatchReport(cells)


# -- Lotka-Volterra paths --


@dataclass
class Fig1Result:
    times: np.ndarray
    x: np.ndarray
    x_perturbed: np.ndarray
    x_plus_delta: np.ndarray
    lam: np.ndarray
    forward: float  # omega^T delta(1)
    reverse: float  # lambda(0)^T eta

    def mismatches(self, duality_tol: float = FIG1_DUALITY_TOL, value_tol: float = FIG1_TOL) -> list[str]:
        bad = []
        if not abs(self.forward - self.reverse) <= duality_tol:
            bad.append(f"omega^T delta(1) - lambda(0)^T eta = {self.forward - self.reverse:.3e}")
        for name, v in (("omega^T delta(1)", self.forward), ("lambda(0)^T eta", self.reverse)):
            if not abs(v - FIG1_VALUE) <= value_tol:
                bad.append(f"{name} = {v:.6f}, published {FIG1_VALUE}")
        return bad


def fig1(h: float = 1e-4, sample_dt: float = 0.05, eta=ETA, omega=OMEGA) -> Fig1Result:
    """Unperturbed and perturbed Lotka-Volterra paths, variational points and costates."""
    gauss = builtin("gauss2")
    eta = np.asarray(eta, dtype=float)
    problem = SensitivityProblem(lotka_volterra(), LOTKA_X0, eta, omega, TimeGrid.from_h(0.0, 1.0, h))
    res = sensitivity_pair(problem, gauss)
    pert = rk_integrate(problem.system, gauss, LOTKA_X0 + eta, problem.grid)
    every = max(1, int(round(sample_dt / problem.grid.steps[0])))
    idx = np.arange(0, problem.grid.N + 1, every)
    return Fig1Result(
        times=problem.grid.nodes[idx],
        x=res.base.nodes[idx],
        x_perturbed=pert.nodes[idx],
        x_plus_delta=res.base.nodes[idx] + res.delta.nodes[idx],
        lam=res.lam.nodes[idx],
        forward=res.forward,
        reverse=res.reverse,
    )


# -- convergence -------------------------------------------------------------------


@dataclass
class ConvergenceReport:
    hs: list[float]
    errors: list[float]
    slope: Optional[float]
    r2: Optional[float]


def fit_slope(hs: Sequence[float], errors: Sequence[float]) -> tuple[Optional[float], Optional[float]]:
    """Least-squares slope of ``log error`` against ``log h`` and its R^2."""
    if len(hs) < 2:
        return None, None
    x, y = np.log(np.asarray(hs, dtype=float)), np.log(np.asarray(errors, dtype=float))
    slope, icpt = np.polyfit(x, y, 1)
    resid = y - (slope * x + icpt)
    ss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss if ss > 0 else 1.0
    return float(slope), r2


def convergence(tab: RkTableau, system: OdeSystem, x0, T: float, hs: Sequence[float],
                reference_h: Optional[float] = None) -> ConvergenceReport:
    """Max-norm error at ``T`` against a Gauss s=2 reference on a much finer grid."""
    if reference_h is None:
        reference_h = min(hs) / 16
    ref = rk_integrate(system, builtin("gauss2"), x0, TimeGrid.from_h(0.0, T, reference_h)).nodes[-1]
    errors = []
    for h in hs:
        xN = rk_integrate(system, tab, x0, TimeGrid.from_h(0.0, T, h)).nodes[-1]
        errors.append(float(np.max(np.abs(xN - ref))))
    slope, r2 = fit_slope(hs, errors)
    return ConvergenceReport([float(h) for h in hs], errors, slope, r2)


def lq_order_report(tab: RkTableau, Ns: Sequence[int] = (8, 16, 32, 64)) -> dict:
    """Errors of the indirect LQ solution with the adjoint-partner pairing.

    Reports node errors in x, lambda and u against the closed form, plus u_0,
    and the fitted slopes in h.
    """
    sys, cost = lq_problem()
    ptab = adjoint_partner(tab)
    hs, ex, el, eu, e0 = [], [], [], [], []
    for N in Ns:
        grid = TimeGrid.uniform(0.0, 1.0, N)
        sol = solve_indirect(DiscreteOptimalitySystem(sys, cost, ptab, grid))
        x, lam, u = lq_exact(grid.nodes)
        hs.append(1.0 / N)
        ex.append(float(np.max(np.abs(sol.x[:, 0] - x))))
        el.append(float(np.max(np.abs(sol.lam[:, 0] - lam))))
        eu.append(float(np.max(np.abs(sol.u[:, 0] - u))))
        e0.append(float(abs(sol.u[0, 0] - u[0])))
    out = {"tableau": tab.name, "h": hs, "err_x": ex, "err_lam": el, "err_u": eu, "err_u0": e0}
    for key in ("err_x", "err_lam", "err_u", "err_u0"):
        out["slope_" + key[4:]] = fit_slope(hs, out[key])[0]
    return out


# -- zero weights ------------------------------------------------------------------


def zero_weight_demo(tab: Optional[RkTableau] = None, steps: int = 100, T: float = 1.0,
                     eps_sequence: Sequence[float] = (1e-2, 3e-3, 1e-3, 3e-4, 1e-4)) -> dict:
    """Fancy integration on ``dq/dt = M(t) q``, ``dp/dt = -M(t)^T p``.

    Returns the worst per-step ``q^T p`` drift and the epsilon-limit report.
    """
    tab = builtin("runge1895") if tab is None else tab
    scheme = ZeroWeightScheme(tab)
    sys = linear_special_system(time_dependent_matrix)
    q0, p0 = np.array([1.0, 0.5]), np.array([-0.3, 2.0])
    grid = TimeGrid.uniform(0.0, T, steps)
    traj = fancy_integrate(sys, scheme, q0, p0, grid)
    S = np.einsum("nd,nd->n", traj.q, traj.p)
    limit = limit_validation(sys, scheme, q0, p0, TimeGrid.uniform(0.0, T, max(1, steps // 10)), eps_sequence)
    return {
        "tableau": tab.name,
        "steps": steps,
        "qp": S.tolist(),
        "max_step_drift": float(np.max(np.abs(np.diff(S)), initial=0.0)),
        "eps": limit.eps,
        "gaps": limit.gaps,
        "limit_slope": limit.slope,
    }


def euler_energy_gain(steps: int = 1000, h: float = 0.01) -> np.ndarray:
    """Per-step ``|y_{n+1}|^2 / 2 - |y_n|^2 / 2 - (h^2 / 2) |y_n|^2`` for Euler on the oscillator.

    Euler multiplies ``|y|^2`` by exactly ``1 + h^2`` per step.
    """
    from rkadjoint.problems import harmonic_oscillator

    traj = rk_integrate(harmonic_oscillator(), builtin("euler"), np.array([1.0, 0.0]), TimeGrid.uniform(0.0, steps * h, steps))
    form = QuadraticForm(0.5 * np.eye(2), kind="rk")
    drift = quadratic_drift(traj, form)
    energy = 0.5 * np.einsum("nd,nd->n", traj.nodes, traj.nodes)[:-1]
    return drift - h * h * energy


__all__ = [
    "Fig1Result", "PrkTableau", "Table1Result", "ConvergenceReport", "check_table1", "convergence",
    "euler_energy_gain", "fig1", "fit_slope", "lotka_sensitivity", "lq_order_report", "reference_sensitivity",
    "round4", "table1", "zero_weight_demo",
]
