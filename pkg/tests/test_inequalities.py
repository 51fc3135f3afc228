import json
import math
import pathlib

import numpy as np
import pytest
import sympy
from hypothesis import given, settings, strategies as st

from subelliptic import families as fam
from subelliptic import frames as F
from subelliptic import inequalities as Q
from subelliptic import integrate as I
from subelliptic.errors import DegenerateFamily, ExponentOutOfRange, InsufficientCurve, KindMismatch

H1 = F.heisenberg()
FIXTURE = pathlib.Path(__file__).parent / "fixtures" / "beta_hat_h1_p4.json"


@pytest.fixture(scope="module")
def mu4():
    return I.build_measure(H1, 4.0)


@pytest.fixture(scope="module")
def tube_integrals(mu4):
    family = fam.make_family("AxisConcentrated", H1, 4.0)
    return Q._spi_integrals(mu4, 2.0, family, 1e-5, 1)


# ---------------------------------------------------------------------------
# integration by parts


def _zero_member():
    return fam.Member("zero", lambda x: np.zeros(len(x)), lambda x: np.zeros_like(x),
                      I.Domain([-1, -1, -1], [1, 1, 1]))


def test_ibp_vanishes_for_zero_function(mu4):
    res, _ = Q.ibp_residual(mu4, _zero_member(), Q.position_field(H1), Q.power_weight(H1, 0.0), 2.0)
    assert res == 0.0


def test_ibp_vanishes_for_zero_field(mu4):
    bump, _ = Q.ibp_bumps(H1)
    res, _ = Q.ibp_residual(mu4, bump, Q.zero_field(H1), Q.power_weight(H1, 0.0), 2.0)
    assert res == 0.0


def test_ibp_residual_shrinks_with_tolerance(mu4):
    bump, _ = Q.ibp_bumps(H1)
    args = (mu4, bump, Q.position_field(H1), Q.power_weight(H1, 0.0), 2.0)
    res, scale = Q.ibp_residual(*args, tol=1e-6)
    res2, _ = Q.ibp_residual(*args, tol=1e-9)
    assert abs(res) < 1e-3 * scale
    assert abs(res2) < abs(res)


def test_ibp_rejects_bad_exponent(mu4):
    bump, _ = Q.ibp_bumps(H1)
    with pytest.raises(ExponentOutOfRange):
        Q.ibp_residual(mu4, bump, Q.position_field(H1), Q.power_weight(H1, 0.0), 2.5)


def test_ibp_suite_needs_x_block_fields():
    gr = F.grushin(1, 1, 1.0)
    with pytest.raises(KindMismatch):
        Q.ibp_suite(I.build_measure(gr, 4.0))


# ---------------------------------------------------------------------------
# checks and fits


def test_ubound_holds_for_constants(mu4):
    spec = Q.ubound_spec(H1, 4.0, 2.0)
    eta = I.expect_mu(lambda x: F.eta_weight(H1, 4.0, 2.0, x), mu4).value
    rep = Q.check_inequality(spec, fam.constants_family(H1), mu4, constants={"A": 1.0, "B": eta * 1.01})
    assert rep.verdict == "Holds"
    assert all(abs(r.terms[0][0]) < 1e-12 for r in rep.rows)


def test_constants_only_fit_gives_eta_mass(mu4):
    spec = Q.ubound_spec(H1, 4.0, 2.0)
    rows = Q.make_rows(spec, Q.family_integrals(spec, fam.constants_family(H1), mu4))
    constants, _ = Q.fit_from_rows(spec, rows)
    eta = I.expect_mu(lambda x: F.eta_weight(H1, 4.0, 2.0, x), mu4).value
    assert constants["B"] == pytest.approx(eta * 1.05, rel=1e-6)


def test_synthetic_multiplier_fit():
    spec = Q.InequalitySpec("SYN", H1, 4.0, 2.0, rhs=(Q.Term("C", "grad_q"),), fit="C")
    rows = [Q.MemberRow(f"m{i}", 2.0 * g, 0.0, [(g, 0.0)]) for i, g in enumerate((0.5, 1.0, 3.0))]
    constants, _ = Q.fit_from_rows(spec, rows)
    assert constants["C"] == pytest.approx(2.0 * 1.05, abs=1e-6)


def test_fit_needs_enough_members(mu4):
    with pytest.raises(DegenerateFamily):
        Q.fit_constants(Q.ubound_spec(H1, 4.0, 2.0), fam.constants_family(H1), mu4)


def test_general_hardy_refused_on_heisenberg(mu4):
    spec = Q.hardy_general_spec(H1, 4.0, r=2.0, potential="log")
    rep = Q.check_inequality(spec, fam.make_family("ShellBumps", H1, 4.0), mu4)
    assert rep.verdict is None
    assert rep.precondition["status"] == "unmet" and "2n > 2" in rep.precondition["reason"]


def test_dimension_free_hardy_on_radial_bumps(mu4):
    spec = Q.hardy_dimfree_spec(H1, 4.0, 0.1)
    rep = Q.check_inequality(spec, fam.make_family("RadialBumps", H1, 4.0), mu4)
    assert rep.verdict == "Holds"
    assert all(r.margin > 0 for r in rep.rows)


def test_dimension_free_hardy_is_metivier_only():
    with pytest.raises(KindMismatch):
        Q.hardy_dimfree_spec(F.grushin(), 4.0, 0.1)


def test_ubound_lq_bootstrap_is_stable(mu4):
    spec = Q.ubound_spec(H1, 4.0, 4.0 / 3.0)
    full, boots = Q.bootstrap_constants(spec, fam.make_family("Mixed", H1, 4.0), mu4, n_boot=200, seed=0)
    assert math.isfinite(full["A"]) and math.isfinite(full["B"])
    for key in ("A", "B"):
        med = float(np.median([b[key] for b in boots]))
        assert abs(med - full[key]) <= 0.1 * full[key]
    within = [all(abs(b[k] - full[k]) <= 0.1 * full[k] for k in ("A", "B")) for b in boots]
    assert np.mean(within) >= 2.0 / 3.0


# ---------------------------------------------------------------------------
# super-Poincare growth


def test_beta_hat_is_one_for_constants(mu4):
    for eps in (0.5, 0.1, 0.01):
        beta, _ = Q.beta_hat(mu4, 2.0, eps, fam.constants_family(H1))
        assert beta == pytest.approx(1.0, rel=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.01, 0.6), st.floats(0.01, 0.6))
def test_beta_hat_nonincreasing(tube_integrals, a, b):
    lo, hi = sorted((a, b))
    assert Q._beta_from(tube_integrals, hi).log_beta <= Q._beta_from(tube_integrals, lo).log_beta


def test_beta_curve_matches_fixture(mu4, tube_integrals):
    fixture = json.loads(FIXTURE.read_text())
    family = fam.make_family("AxisConcentrated", H1, 4.0)
    curve = Q.beta_curve(mu4, 2.0, fixture["eps_grid"], family, integrals=tube_integrals)
    got = [pt.__dict__ for pt in curve.points]
    assert got == fixture["result"]["points"]
    assert np.all(np.diff(curve.log_beta) > 0)


def test_growth_exponent_synthetic():
    eps = np.geomspace(0.5, 0.02, 8)
    pts = [Q.BetaPoint(e, math.inf, 0.0, "syn", e**-2.0) for e in eps]
    fit = Q.fit_growth_exponent(Q.BetaCurve(2.0, "syn", pts))
    assert fit.sigma == pytest.approx(2.0, abs=1e-3)


def test_growth_exponent_with_noise():
    rng = np.random.default_rng(0)
    eps = np.geomspace(0.5, 0.05, 8)
    logb = 3.0 * eps**-3.0 + np.log1p(0.01 * rng.standard_normal(len(eps)))
    pts = [Q.BetaPoint(e, math.exp(min(v, 700)), 0.0, "syn", v) for e, v in zip(eps, logb)]
    fit = Q.fit_growth_exponent(Q.BetaCurve(2.0, "syn", pts))
    assert fit.sigma == pytest.approx(3.0, rel=0.05)


def test_growth_exponent_needs_five_points():
    pts = [Q.BetaPoint(e, 10.0, 0.0, "syn", math.log(10.0)) for e in (0.4, 0.3, 0.2, 0.1)]
    with pytest.raises(InsufficientCurve):
        Q.fit_growth_exponent(Q.BetaCurve(2.0, "syn", pts))


# ---------------------------------------------------------------------------
# certificates


def test_certificate_l2():
    c = Q.certificate(H1, 4, 2, sympy.Rational(1, 100))
    assert c.R == 10 and c.sigma == 2


def test_certificate_lq():
    c = Q.certificate(H1, 4, sympy.Rational(4, 3), sympy.Rational(1, 10000))
    assert c.R == 1000 and c.R_exponent == sympy.Rational(3, 4) and c.sigma == 3


def test_certificate_grushin():
    c = Q.certificate(F.grushin(1, 1, 2.0), 4, sympy.Rational(4, 3), sympy.Rational(1, 10))
    assert sympy.simplify(c.R - sympy.Integer(10) ** sympy.Rational(9, 4)) == 0
    assert c.sigma == 9


@pytest.mark.parametrize("setting, kw, expected", [
    ("metivier-l2", {}, 2),
    ("metivier-lq", {}, 3),
    ("hg-lq", {"zeta": 1}, 3),
    ("grushin-l2", {"gamma": 1}, 2),
    ("grushin-lq", {"gamma": 2}, 9),
])
def test_exponent_table(setting, kw, expected):
    assert Q.exponent_table(setting, 4, **kw) == expected


@given(st.fractions(min_value="21/10", max_value=20, max_denominator=50))
def test_exponent_consistency(p):
    assert all(Q.certificate_consistency(sympy.Rational(p.numerator, p.denominator)).values())


def test_certificate_rejects_other_q():
    with pytest.raises(ExponentOutOfRange):
        Q.certificate(H1, 4, sympy.Rational(3, 2), sympy.Rational(1, 10))


def test_decomposition_links_hold(mu4):
    q = 2.0
    mixed = fam.make_family("Mixed", H1, 4.0)
    ub = Q.check_inequality(Q.ubound_spec(H1, 4.0, q), mixed, mu4).constants
    hardy = Q.joint_check([Q.hardy_dimfree_spec(H1, 4.0, e, q=q) for e in (0.5, 0.1, 0.02)], [mixed], mu4)
    cert = Q.certificate(H1, 4, 2, sympy.Rational(1, 2))
    members = fam.make_family("ShellBumps", H1, 4.0).subset(range(0, 24, 6))
    rows = Q.decomposition_check(cert, members, mu4, hardy_C=hardy[0].constants["C"], ubound=ub,
                                 lebesgue_C=1.0)
    assert any(r.outer > 0 for r in rows)
    for r in rows:
        assert all(m > 0 for m in r.margins.values()), r.member_id
