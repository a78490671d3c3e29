import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rkadjoint.errors import UnknownTableau, ZeroWeight
from rkadjoint.tableau import (
    CATALOG,
    PrkTableau,
    RkTableau,
    adjoint_partner,
    builtin,
    from_json,
    load,
    order_residuals_prk,
    order_residuals_rk,
    random_symplectic,
    reflect,
    symplectic_defect_prk,
    symplectic_defect_rk,
    to_json,
    transpose,
)

SINGLE = [name for name, tab in CATALOG.items() if isinstance(tab, RkTableau)]
NONZERO = [name for name in SINGLE if CATALOG[name].nonzero_weights()]
SYMPLECTIC = [name for name in NONZERO if symplectic_defect_rk(CATALOG[name]).symplectic]


def assert_tab_equal(t1, t2, atol=1e-15):
    np.testing.assert_allclose(t1.a, t2.a, rtol=0, atol=atol)
    np.testing.assert_allclose(t1.b, t2.b, rtol=0, atol=atol)
    np.testing.assert_allclose(t1.c, t2.c, rtol=0, atol=atol)


def test_dimension_check():
    with pytest.raises(ValueError):
        RkTableau([[0.0, 0.0]], [1.0], [0.0])
    with pytest.raises(ValueError):
        PrkTableau(builtin("euler"), builtin("gauss2"))


def test_explicit_flag_follows_stored_order():
    assert builtin("euler").explicit
    assert builtin("rk4").explicit
    assert not builtin("midpoint").explicit
    # Runge 1895 is stored with a[0, 1] != 0, so it is not lower triangular as stored
    runge = builtin("runge1895")
    assert not runge.explicit
    assert runge.explicit_order() == [1, 0]
    assert builtin("gauss2").explicit_order() is None


def test_midpoint_symplectic():
    rep = symplectic_defect_rk(builtin("midpoint"))
    assert rep.max_defect == 0.0
    assert rep.symplectic


def test_euler_defect_is_minus_one():
    rep = symplectic_defect_rk(builtin("euler"))
    assert rep.defect_matrix[0, 0] == -1.0
    assert rep.max_defect == 1.0
    assert not rep.symplectic


def test_gauss2_symplectic():
    assert symplectic_defect_rk(builtin("gauss2")).max_defect <= 1e-15


def test_max_defect_is_max_over_all_arrays():
    rep = symplectic_defect_prk(PrkTableau(builtin("euler"), builtin("midpoint")))
    expected = max(np.abs(rep.defect_matrix).max(), np.abs(rep.weight_defect).max(), np.abs(rep.abscissa_defect).max())
    assert rep.max_defect == expected


def test_euler_radau_pair():
    ptab = PrkTableau(builtin("euler"), builtin("radau1a"))
    rep = symplectic_defect_prk(ptab)
    assert rep.max_defect == 0.0
    assert rep.symplectic and rep.symplectic_autonomous


def test_symplectic_rk_paired_with_itself():
    for name in SYMPLECTIC:
        assert symplectic_defect_prk(PrkTableau.diagonal(CATALOG[name])).max_defect <= 1e-15


def test_verlet_pair_symplectic():
    assert symplectic_defect_prk(builtin("verlet")).max_defect == 0.0


def test_abscissa_defect_only_affects_full_flag():
    lo = builtin("midpoint")
    up = RkTableau(lo.a, lo.b, [0.3])
    rep = symplectic_defect_prk(PrkTableau(lo, up))
    assert rep.symplectic_autonomous
    assert not rep.symplectic


def test_reflect_examples():
    assert_tab_equal(reflect(builtin("euler")), builtin("implicit-euler"))
    assert_tab_equal(reflect(builtin("midpoint")), builtin("midpoint"))


def test_transpose_examples():
    assert_tab_equal(transpose(builtin("midpoint")), builtin("midpoint"))
    g = builtin("gauss2")
    assert_tab_equal(reflect(transpose(g)), g)


def test_transpose_rejects_zero_weight():
    with pytest.raises(ZeroWeight) as info:
        transpose(builtin("runge1895"))
    assert info.value.index == 1


@pytest.mark.parametrize("name", NONZERO)
def test_involutions_and_commutation(name):
    tab = CATALOG[name]
    assert_tab_equal(reflect(reflect(tab)), tab)
    assert_tab_equal(transpose(transpose(tab)), tab)
    assert_tab_equal(reflect(transpose(tab)), transpose(reflect(tab)))


@pytest.mark.parametrize("name", NONZERO)
def test_adjoint_partner_is_symplectic(name):
    ptab = adjoint_partner(CATALOG[name])
    assert ptab.lower is CATALOG[name]
    assert symplectic_defect_prk(ptab).max_defect <= 1e-14
    # upper is the reflected transpose with the abscissas kept
    rt = reflect(transpose(CATALOG[name]))
    np.testing.assert_allclose(ptab.upper.a, rt.a, rtol=0, atol=1e-15)
    np.testing.assert_array_equal(ptab.upper.c, CATALOG[name].c)


def test_partner_of_euler_is_radau1a():
    assert_tab_equal(adjoint_partner(builtin("euler")).upper, builtin("radau1a"))


@pytest.mark.parametrize("name", SYMPLECTIC)
def test_partner_of_symplectic_is_itself(name):
    assert_tab_equal(adjoint_partner(CATALOG[name]).upper, CATALOG[name])


def test_partner_of_rk4():
    ptab = adjoint_partner(builtin("rk4"))
    assert symplectic_defect_prk(ptab).symplectic
    assert not ptab.upper.explicit


def test_partner_rejects_zero_weight():
    with pytest.raises(ZeroWeight):
        adjoint_partner(builtin("runge1895"))


def test_order_residuals_euler():
    res = dict(order_residuals_rk(builtin("euler")))
    assert [res[k] for k in ("b", "ba", "baa", "bcc")] == [0.0, -0.5, -1.0 / 6.0, -1.0 / 3.0]
    assert res["c1"] == 0.0


def test_order_residuals_gauss2():
    assert max(abs(v) for _, v in order_residuals_rk(builtin("gauss2"))) <= 1e-15


def test_order_residuals_runge1895():
    res = order_residuals_rk(builtin("runge1895"))
    assert res[0][1] == 0.0 and res[1][1] == 0.0


def test_order_residuals_prk_examples():
    assert all(v == 0.0 for _, v in order_residuals_prk(builtin("verlet")))
    res = dict(order_residuals_prk(PrkTableau(builtin("euler"), builtin("radau1a"))))
    assert res["BA"] == 0.5
    g = builtin("gauss2")
    prk = [v for _, v in order_residuals_prk(PrkTableau.diagonal(g))]
    rk = [v for _, v in order_residuals_rk(g)][:2]
    np.testing.assert_allclose(prk, [rk[0], rk[0], rk[1], rk[1], rk[1], rk[1]], atol=1e-16)


def test_catalog_entries():
    r = builtin("runge1895")
    np.testing.assert_array_equal(r.a, [[0.0, 0.5], [0.0, 0.0]])
    np.testing.assert_array_equal(r.b, [1.0, 0.0])
    np.testing.assert_array_equal(r.c, [0.5, 0.0])
    m = builtin("midpoint")
    assert (m.s, m.a[0, 0], m.b[0], m.c[0]) == (1, 0.5, 1.0, 0.5)
    with pytest.raises(UnknownTableau, match="gauss2"):
        builtin("gauss7")


def test_json_roundtrip(tmp_path):
    for name, tab in CATALOG.items():
        back = from_json(to_json(tab))
        if isinstance(tab, PrkTableau):
            assert_tab_equal(back.lower, tab.lower, atol=0)
            assert_tab_equal(back.upper, tab.upper, atol=0)
        else:
            assert_tab_equal(back, tab, atol=0)
    path = tmp_path / "tab.json"
    path.write_text(json.dumps({"name": "heun", "s": 2, "a": [0, 0, 1, 0], "b": [0.5, 0.5], "c": [0, 1]}))
    heun = load(str(path))
    assert heun.name == "heun" and heun.explicit


def test_tableaus_are_immutable():
    tab = builtin("rk4")
    with pytest.raises(ValueError):
        tab.a[0, 0] = 1.0


weights = st.lists(
    st.floats(min_value=0.05, max_value=2.0) | st.floats(min_value=-2.0, max_value=-0.05), min_size=1, max_size=5
)


@settings(max_examples=60, deadline=None)
@given(b=weights, seed=st.integers(0, 2**31 - 1))
def test_random_symplectic_defects_vanish(b, seed):
    b = np.array(b)
    b = b / b.sum() if abs(b.sum()) > 0.1 else b
    tab = random_symplectic(b, np.random.default_rng(seed))
    assert symplectic_defect_rk(tab).max_defect <= 1e-13
    # symplectic tableaus are fixed by the partner recipe
    up = adjoint_partner(tab).upper
    np.testing.assert_allclose(up.a, tab.a, rtol=0, atol=1e-12 * max(1.0, np.abs(tab.a).max()))


@settings(max_examples=60, deadline=None)
@given(b=weights, seed=st.integers(0, 2**31 - 1))
def test_second_order_follows_from_symplecticness(b, seed):
    b = np.array(b)
    if abs(b.sum()) < 0.1:
        return
    b = b / b.sum()
    tab = random_symplectic(b, np.random.default_rng(seed))
    res = dict(order_residuals_rk(tab))
    assert abs(res["b"]) <= 1e-14
    assert abs(res["ba"]) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(s=st.integers(1, 5), seed=st.integers(0, 2**31 - 1))
def test_involutions_on_random_tableaus(s, seed):
    rng = np.random.default_rng(seed)
    b = rng.uniform(0.2, 1.0, s) * rng.choice([-1.0, 1.0], s)
    tab = RkTableau(rng.normal(size=(s, s)), b, rng.uniform(0, 1, s))
    tol = 1e-15 * max(1.0, np.abs(tab.a).max() * np.abs(b).max() / np.abs(b).min()) * 10
    assert_tab_equal(reflect(reflect(tab)), tab, atol=tol)
    assert_tab_equal(transpose(transpose(tab)), tab, atol=tol)
    assert_tab_equal(reflect(transpose(tab)), transpose(reflect(tab)), atol=tol)
    assert symplectic_defect_prk(adjoint_partner(tab)).max_defect <= 1e-13 * max(1.0, np.abs(tab.a).max() * 10)
