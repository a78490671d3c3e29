import numpy as np
import pytest

from rkadjoint.control import (
    CostSpec,
    ControlSystem,
    DiscreteOptimalitySystem,
    assemble_discrete_system,
    free_particle_lagrangian,
    harmonic_lagrangian,
    kkt_residual,
    lambda_delta_audit,
    lq_exact,
    lq_mayer_problem,
    lq_problem,
    mechanics_demo,
    nonlinear_problem,
    pendulum_lagrangian,
    solve_direct,
    solve_indirect,
)
from rkadjoint.errors import SingularHuu, UnsupportedMode, ZeroWeight
from rkadjoint.experiments import lq_order_report
from rkadjoint.ode import TimeGrid, rk_integrate
from rkadjoint.problems import LOTKA_X0, lotka_volterra
from rkadjoint.tableau import CATALOG, PrkTableau, RkTableau, adjoint_partner, builtin
from rkadjoint.variational import gradient_of_terminal_cost

NONZERO = [n for n, t in CATALOG.items() if isinstance(t, RkTableau) and t.nonzero_weights()]
PROBLEMS = {"lq": lq_problem, "mayer": lq_mayer_problem, "sine": nonlinear_problem}


def indirect(sys, cost, tab, grid):
    return solve_indirect(assemble_discrete_system(sys, cost, adjoint_partner(tab), grid))


@pytest.mark.parametrize("name", NONZERO)
def test_direct_equals_indirect_on_lq(name):
    sys, cost = lq_problem()
    grid = TimeGrid.uniform(0, 1, 16)
    si = indirect(sys, cost, builtin(name), grid)
    sd = solve_direct(sys, cost, builtin(name), grid)
    assert si.max_gap(sd) <= 1e-9


@pytest.mark.parametrize("name", ["euler", "rk4", "gauss2"])
@pytest.mark.parametrize("problem", ["mayer", "sine"])
def test_direct_equals_indirect_nonlinear(name, problem):
    sys, cost = PROBLEMS[problem]()
    grid = TimeGrid.uniform(0, 1, 10)
    assert indirect(sys, cost, builtin(name), grid).max_gap(solve_direct(sys, cost, builtin(name), grid)) <= 1e-9


@pytest.mark.parametrize("name", ["euler", "midpoint", "rk4", "gauss2"])
@pytest.mark.parametrize("problem", sorted(PROBLEMS))
def test_kkt_residual_of_symplectic_pairs(name, problem):
    sys, cost = PROBLEMS[problem]()
    grid = TimeGrid.uniform(0, 1, 12)
    sol = indirect(sys, cost, builtin(name), grid)
    assert kkt_residual(sol, sys, cost, builtin(name), grid) <= 1e-10
    assert sol.diagnostics["max_grad_u_H"] <= 1e-10


def test_nonsymplectic_pairing_fails_kkt():
    sys, cost = lq_problem()
    grid = TimeGrid.uniform(0, 1, 10)
    euler = builtin("euler")
    sol = solve_indirect(assemble_discrete_system(sys, cost, PrkTableau.diagonal(euler), grid))
    assert kkt_residual(sol, sys, cost, euler, grid) > 1e-3


def test_lq_optimal_control_matches_closed_form():
    sys, cost = lq_problem()
    grid = TimeGrid.uniform(0, 1, 64)
    sol = indirect(sys, cost, builtin("gauss2"), grid)
    assert abs(sol.u[0, 0] + np.tanh(1.0)) <= 1e-4
    x, lam, u = lq_exact(grid.nodes)
    assert np.max(np.abs(sol.x[:, 0] - x)) <= 1e-6
    assert np.max(np.abs(sol.lam[:, 0] - lam)) <= 1e-6
    assert np.max(np.abs(sol.u[:, 0] - u)) <= 1e-6


def test_affine_system_needs_one_newton_step():
    sys, cost = lq_problem()
    sol = indirect(sys, cost, builtin("rk4"), TimeGrid.uniform(0, 1, 8))
    assert sol.diagnostics["newton_iterations"] == 1


def test_uncontrolled_dynamics_reduce_to_terminal_gradient():
    ode = lotka_volterra()
    w = np.array([1.0, -0.5])
    sys = ControlSystem(2, 1, f=lambda x, u, t: ode.f(x, t), f_x=lambda x, u, t: ode.jac_x(x, t),
                        f_u=lambda x, u, t: np.zeros((2, 1)))
    cost = CostSpec(
        mode="fixed", alpha=LOTKA_X0, C=lambda x: float(w @ x), grad_C=lambda x: w,
        D=lambda x, u, t: 0.5 * float(u @ u), D_x=lambda x, u, t: np.zeros(2), D_u=lambda x, u, t: u.copy(),
    )
    grid = TimeGrid.uniform(0, 1, 10)
    tab = builtin("rk4")
    sol = indirect(sys, cost, tab, grid)
    base = rk_integrate(ode, tab, LOTKA_X0, grid)
    grad = gradient_of_terminal_cost(base, ode, adjoint_partner(tab).upper, lambda x: w)
    np.testing.assert_allclose(sol.lam[0], grad, rtol=0, atol=1e-11)
    assert np.max(np.abs(sol.u)) <= 1e-12


def test_single_tiny_step():
    sys, cost = nonlinear_problem()
    sol = indirect(sys, cost, builtin("gauss2"), TimeGrid.uniform(0, 1e-6, 1))
    assert sol.diagnostics["max_grad_u_H"] <= 1e-10
    # costate sits at grad C; control balances it
    assert sol.lam[-1, 0] == pytest.approx(sol.x[-1, 0], abs=1e-12)
    assert sol.u[0, 0] == pytest.approx(-sol.lam[0, 0], abs=1e-10)


@pytest.mark.parametrize("name", ["rk4", "gauss2", "euler"])
def test_lq_audit(name):
    sys, cost = lq_problem()
    grid = TimeGrid.uniform(0, 1, 16)
    sol = indirect(sys, cost, builtin(name), grid)
    Z = np.random.default_rng(0).normal(size=(16, builtin(name).s, 1))
    rep = lambda_delta_audit(sol, sys, cost, np.zeros(1), Z)
    assert np.max(np.abs(rep.defects)) <= 1e-12
    assert rep.products[0] == 0.0


def test_mayer_audit_with_euler_radau():
    sys, cost = lq_mayer_problem()
    grid = TimeGrid.uniform(0, 1, 16)
    sol = solve_indirect(assemble_discrete_system(sys, cost, builtin("euler-radau"), grid))
    rng = np.random.default_rng(1)
    rep = lambda_delta_audit(sol, sys, cost, rng.normal(size=2), rng.normal(size=(16, 1, 1)))
    assert np.ptp(rep.products) <= 1e-12
    assert not np.any(rep.sources)


def test_mayer_and_lagrange_forms_agree():
    grid = TimeGrid.uniform(0, 1, 16)
    tab = builtin("gauss2")
    lag = indirect(*lq_problem(), tab, grid)
    may = indirect(*lq_mayer_problem(), tab, grid)
    np.testing.assert_allclose(may.x[:, 0], lag.x[:, 0], atol=1e-11)
    np.testing.assert_allclose(may.u, lag.u, atol=1e-11)
    np.testing.assert_allclose(may.lam[:, 0], lag.lam[:, 0], atol=1e-11)
    np.testing.assert_allclose(may.lam[:, 1], 1.0, atol=1e-12)


def test_nonlinear_audit():
    sys, cost = nonlinear_problem()
    grid = TimeGrid.uniform(0, 1, 12)
    sol = indirect(sys, cost, builtin("rk4"), grid)
    rep = lambda_delta_audit(sol, sys, cost, np.zeros(1), np.random.default_rng(2).normal(size=(12, 4, 1)))
    assert np.max(np.abs(rep.defects)) <= 1e-11


def test_free_initial_state():
    sys, cost = lq_problem()
    cost = cost.with_mode("free")
    grid = TimeGrid.uniform(0, 1, 8)
    si = indirect(sys, cost, builtin("gauss2"), grid)
    assert np.max(np.abs(si.lam[0])) <= 1e-12
    # the cost is minimised by staying at the origin
    assert np.max(np.abs(si.x)) <= 1e-12
    sd = solve_direct(sys, lq_problem()[1], builtin("gauss2"), grid, mode="free")
    assert si.max_gap(sd) <= 1e-9


def test_both_ends_fixed():
    sys, cost = lq_problem()
    cost = cost.with_mode("both", beta=np.array([0.5]))
    grid = TimeGrid.uniform(0, 1, 10)
    si = indirect(sys, cost, builtin("rk4"), grid)
    assert si.x[0, 0] == pytest.approx(1.0, abs=1e-14) and si.x[-1, 0] == pytest.approx(0.5, abs=1e-12)
    sd = solve_direct(sys, cost, builtin("rk4"), grid)
    assert si.max_gap(sd) <= 1e-9
    assert kkt_residual(si, sys, cost, builtin("rk4"), grid) <= 1e-10


def test_unsupported_modes():
    with pytest.raises(UnsupportedMode):
        CostSpec(mode="periodic", alpha=np.zeros(1))
    with pytest.raises(UnsupportedMode):
        CostSpec(mode="fixed")
    with pytest.raises(UnsupportedMode):
        lq_problem()[1].with_mode("both")


def test_direct_rejects_zero_weights():
    sys, cost = lq_problem()
    with pytest.raises(ZeroWeight):
        solve_direct(sys, cost, builtin("runge1895"), TimeGrid.uniform(0, 1, 4))


def _degenerate_cost():
    return CostSpec(
        mode="fixed", alpha=np.array([1.0]),
        D=lambda x, u, t: 0.5 * float(x @ x), D_x=lambda x, u, t: x.copy(), D_u=lambda x, u, t: np.zeros(1),
        D_hess=lambda x, u, t: (np.eye(1), np.zeros((1, 1)), np.zeros((1, 1))),
    )


def test_singular_huu_is_reported():
    sys, _ = lq_problem()
    grid = TimeGrid.uniform(0, 1, 4)
    with pytest.raises(SingularHuu, match="stage"):
        indirect(sys, _degenerate_cost(), builtin("gauss2"), grid)
    # the KKT matrix stays regular here; the node controls expose the degeneracy
    with pytest.raises(SingularHuu, match="node 0"):
        solve_direct(sys, _degenerate_cost(), builtin("gauss2"), grid)


def test_discrete_system_roundtrip():
    sys, cost = nonlinear_problem()
    dos = DiscreteOptimalitySystem(sys, cost, adjoint_partner(builtin("rk4")), TimeGrid.uniform(0, 1, 3))
    z = np.random.default_rng(0).normal(size=dos.initial_guess().size)
    v = dos.unpack(z)
    np.testing.assert_array_equal(dos.pack(v["x"], v["lam"], v["u"], v["k"], v["ell"], v["U"]), z)
    # analytic Jacobian against differences of the residual
    J = dos.jacobian(z)
    Jfd = np.column_stack([(dos.residual(z + e) - dos.residual(z - e)) / 2e-6 for e in 1e-6 * np.eye(z.size)])
    assert np.max(np.abs(J - Jfd)) <= 1e-5


@pytest.mark.parametrize("lag", [harmonic_lagrangian, pendulum_lagrangian])
def test_mechanics_momenta(lag):
    grid = TimeGrid.uniform(0, 1, 20)
    sol = mechanics_demo(lag(), builtin("gauss2"), grid, (0.0, 0.8))
    assert sol.diagnostics["momentum_gap"] <= 1e-12
    assert sol.x[-1, 0] == pytest.approx(0.8, abs=1e-12)


def test_harmonic_action_conserves_energy_form():
    sol = mechanics_demo(harmonic_lagrangian(), builtin("gauss2"), TimeGrid.uniform(0, 1, 20), (0.0, 0.8))
    # Lambda = u and dx/dt = u, dLambda/dt = -x, so x^2 + lambda^2 is a quadratic invariant
    E = sol.x[:, 0] ** 2 + sol.lam[:, 0] ** 2
    assert np.ptp(E) <= 1e-13


def test_free_particle_is_a_straight_line():
    grid = TimeGrid.uniform(0, 2, 8)
    sol = mechanics_demo(free_particle_lagrangian(2), builtin("rk4"), grid, (np.zeros(2), np.array([1.0, -2.0])))
    np.testing.assert_allclose(sol.x, np.outer(grid.nodes / 2, [1.0, -2.0]), atol=1e-13)
    np.testing.assert_allclose(sol.u, np.tile([0.5, -1.0], (9, 1)), atol=1e-13)


def test_rk4_order_reduction_report():
    rep = lq_order_report(builtin("rk4"))
    assert rep["slope_u"] >= 1.0
    assert rep["slope_x"] >= 1.0
