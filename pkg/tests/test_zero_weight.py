import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rkadjoint.errors import NotSpecialForm, SingularMSystem
from rkadjoint.experiments import fit_slope, zero_weight_demo
from rkadjoint.ode import OdeSystem, PartitionedSystem, QuadraticForm, TimeGrid, rk_integrate
from rkadjoint.tableau import RkTableau, builtin, symplectic_defect_prk
from rkadjoint.zero_weight import (
    SpecialPartitionedSystem,
    ZeroWeightScheme,
    epsilon_regularized_pair,
    fancy_identity_residual,
    fancy_integrate,
    fancy_p_step,
    limit_validation,
    linear_special_system,
)

RUNGE = ZeroWeightScheme(builtin("runge1895"))


def rotation_field(t):
    return np.array([[0.1 * t, 1.0 + 0.5 * np.sin(t)], [-1.0, -0.2 * np.cos(t)]])


def nonlinear_special():
    sys = SpecialPartitionedSystem(
        1, 1,
        f=lambda q, t: np.sin(q) + np.cos(t),
        L=lambda q, t: q ** 2 + np.sin(t),
        M=lambda q, t: np.array([[t * np.cos(q[0])]]),
        f_q=lambda q, t: np.array([[np.cos(q[0])]]),
    )
    full = OdeSystem(2, lambda y, t: np.array([np.sin(y[0]) + np.cos(t), y[0] ** 2 + np.sin(t) + t * np.cos(y[0]) * y[1]]))
    return sys, full


def test_runge_scheme_layout():
    assert RUNGE.perm == (0, 1) and RUNGE.r == 1


def test_runge_step_matches_limit_formulas():
    sys = SpecialPartitionedSystem(
        2, 2, f=lambda q, t: q, L=lambda q, t: np.array([q[0], t]),
        M=lambda q, t: np.array([[q[1], 1.0], [t, -q[0]]]),
    )
    rng = np.random.default_rng(1)
    Q, p, t, h = rng.normal(size=(2, 2)), rng.normal(size=2), 0.3, 0.1
    st_ = fancy_p_step(sys, RUNGE, Q, p, t, h)
    ell = st_.ell[0]
    np.testing.assert_allclose(st_.m[0], -0.5 * ell, atol=1e-15)
    M2 = sys.M(Q[1], t)
    np.testing.assert_allclose(st_.p_next, p + h * ell + h * h * M2 @ st_.m[0], atol=1e-15)
    np.testing.assert_allclose(st_.P[0], st_.p_next, atol=1e-15)
    np.testing.assert_allclose(ell, sys.g(Q[0], st_.P[0], t + 0.5 * h), atol=1e-15)


def test_zero_M_reduces_to_weighted_quadrature():
    sys = SpecialPartitionedSystem(1, 2, f=lambda q, t: -q, L=lambda q, t: np.array([np.sin(q[0]), t]),
                                   M=lambda q, t: np.zeros((2, 2)))
    Q, p = np.array([[0.4], [-0.2]]), np.array([1.0, 2.0])
    st_ = fancy_p_step(sys, RUNGE, Q, p, 0.0, 0.2)
    np.testing.assert_allclose(st_.p_next, p + 0.2 * sys.L(Q[0], 0.1), atol=1e-16)


def test_requires_special_form():
    ps = PartitionedSystem(1, 1, lambda q, p, t: q, lambda q, p, t: p)
    with pytest.raises(NotSpecialForm):
        fancy_p_step(ps, RUNGE, np.zeros((2, 1)), np.zeros(1), 0.0, 0.1)
    with pytest.raises(NotSpecialForm):
        fancy_integrate(ps, RUNGE, np.zeros(1), np.zeros(1), TimeGrid.uniform(0, 1, 2))


def test_singular_m_system():
    # a_22 = -1 and h M(Q_2) = 1 make the m block vanish
    tab = RkTableau([[0.0, 0.5], [0.0, -1.0]], [1.0, 0.0], [0.5, 0.0])
    sys = SpecialPartitionedSystem(1, 1, f=lambda q, t: q, L=lambda q, t: q, M=lambda q, t: np.array([[q[0]]]))
    h = 0.5
    Q = np.array([[0.0], [1.0 / h]])
    with pytest.raises(SingularMSystem):
        fancy_p_step(sys, ZeroWeightScheme(tab), Q, np.ones(1), 0.0, h)


def test_interleaved_weights_are_permuted():
    base = RkTableau(
        [[0.0, 0.0, 0.0], [0.5, 0.0, 0.0], [-1.0, 2.0, 0.0]], [1 / 6, 0.0, 5 / 6], [0.0, 0.5, 1.0]
    )
    sch = ZeroWeightScheme(base)
    assert sch.perm == (0, 2, 1) and sch.r == 2
    np.testing.assert_array_equal(sch.tab.b, [1 / 6, 5 / 6, 0.0])
    np.testing.assert_array_equal(sch.tab.a[1], [-1.0, 0.0, 2.0])
    sys = linear_special_system(rotation_field)
    grid = TimeGrid.uniform(0, 1, 20)
    q0, p0 = np.array([1.0, 0.5]), np.array([-0.3, 2.0])
    tr = fancy_integrate(sys, sch, q0, p0, grid)
    np.testing.assert_allclose(tr.q, rk_integrate(sys.q_system(), base, q0, grid).nodes, atol=1e-14)
    S = np.einsum("nd,nd->n", tr.q, tr.p)
    assert np.max(np.abs(np.diff(S))) <= 1e-13


def test_regularized_coefficients():
    eps = 1e-3
    ptab = epsilon_regularized_pair(RUNGE, eps)
    assert ptab.upper.a[1, 0] == pytest.approx(1 - 1 / (2 * eps), rel=1e-14)
    np.testing.assert_array_equal(ptab.lower.b, [1.0, eps])


@pytest.mark.parametrize("eps", [1e-2, 1e-4])
def test_regularized_pairs_are_symplectic(eps):
    assert symplectic_defect_prk(epsilon_regularized_pair(RUNGE, eps)).max_defect <= 1e-12


def test_eps_one_on_symplectic_base_is_diagonal():
    ptab = epsilon_regularized_pair(builtin("gauss2"), 1.0)
    np.testing.assert_allclose(ptab.upper.a, ptab.lower.a, atol=1e-15)
    with pytest.raises(ValueError):
        epsilon_regularized_pair(RUNGE, 0.0)


def test_qp_conservation_over_100_steps():
    sys = linear_special_system(rotation_field)
    tr = fancy_integrate(sys, RUNGE, np.array([1.0, 0.5]), np.array([-0.3, 2.0]), TimeGrid.uniform(0, 1, 100))
    S = np.einsum("nd,nd->n", tr.q, tr.p)
    assert np.max(np.abs(np.diff(S))) <= 1e-12


def test_limit_converges_at_rate_eps():
    sys = linear_special_system(rotation_field)
    rep = limit_validation(sys, RUNGE, np.array([1.0, 0.5]), np.array([-0.3, 2.0]), TimeGrid.uniform(0, 1, 10),
                           [1e-1, 1e-2, 1e-3, 1e-4])
    assert abs(rep.slope - 1.0) <= 0.3
    assert rep.gaps[-1] < 1e-3 * rep.gaps[0] * 10


def test_limit_on_nonlinear_special_system():
    sys, _ = nonlinear_special()
    rep = limit_validation(sys, RUNGE, np.array([0.5]), np.array([1.0]), TimeGrid.uniform(0, 1, 10), [1e-2, 1e-3, 1e-4])
    assert abs(rep.slope - 1.0) <= 0.3


def test_single_eps_report():
    sys = linear_special_system(rotation_field)
    rep = limit_validation(sys, RUNGE, np.ones(2), np.ones(2), TimeGrid.uniform(0, 1, 4), [1e-3])
    assert len(rep.gaps) == 1 and rep.slope is None


def _runge_errors():
    sys, full = nonlinear_special()
    ref = rk_integrate(full, builtin("gauss2"), np.array([0.5, 1.0]), TimeGrid.uniform(0, 1, 4000)).nodes[-1]
    hs, errs = [], []
    for N in (10, 20, 40, 80):
        tr = fancy_integrate(sys, RUNGE, np.array([0.5]), np.array([1.0]), TimeGrid.uniform(0, 1, N))
        hs.append(1.0 / N)
        errs.append(abs(tr.p[-1, 0] - ref[1]))
    return fit_slope(hs, errs)[0]


def test_runge_limit_is_at_least_first_order():
    assert _runge_errors() >= 1.0 - 0.2


def test_runge_limit_observed_order_is_two():
    # the h^2 M m correction cancels the O(h^2) defect of the implicit p stage
    assert abs(_runge_errors() - 2.0) <= 0.2


def test_demo_summary():
    out = zero_weight_demo()
    assert out["max_step_drift"] <= 1e-12
    assert abs(out["limit_slope"] - 1.0) <= 0.3


@st.composite
def zero_weight_data(draw):
    s = draw(st.integers(2, 4))
    r = draw(st.integers(1, s - 1))
    d = draw(st.integers(1, 3))
    rng = np.random.default_rng(draw(st.integers(0, 2**31 - 1)))
    b = np.concatenate([rng.uniform(0.3, 1.0, r) * rng.choice([-1, 1], r), np.zeros(s - r)])
    tab = RkTableau(rng.normal(size=(s, s)), b, rng.uniform(0, 1, s))
    return tab, r, d, rng


@settings(max_examples=50, deadline=None)
@given(data=zero_weight_data(), h=st.floats(0.01, 0.5))
def test_bilinear_identity_with_random_data(data, h):
    tab, r, d, rng = data
    sch = ZeroWeightScheme(tab)
    s = tab.s
    form = QuadraticForm(rng.normal(size=(d, d)))
    q, p = rng.normal(size=d), rng.normal(size=d)
    k, ell = rng.normal(size=(s, d)), rng.normal(size=(r, d))
    Ms = rng.normal(size=(s - r, d, d))
    res = fancy_identity_residual(sch, form, q, p, k, ell, Ms, h)
    scale = 1 + np.abs(tab.a).max() ** 2 / np.abs(tab.b[:r]).min()
    assert abs(res) <= 1e-12 * scale * 10
