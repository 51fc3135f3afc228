import numpy as np
import pytest
from hypothesis import given, strategies as st

from subelliptic import families as fam
from subelliptic import frames as F

H1 = F.heisenberg()


@pytest.fixture(scope="module", params=fam.FAMILY_IDS)
def family(request):
    return fam.make_family(request.param, H1, 4.0)


@given(st.integers(1, 60))
def test_sweep_split_keeps_both_endpoints(n):
    pick = fam.sweep_split(n)
    assert 0 in pick and (n - 1) in pick
    # every held-out position lies strictly between two training positions
    for j in set(range(n)) - pick:
        assert min(pick) < j < max(pick)
    assert len(pick) >= n / 2


def test_family_sizes():
    sizes = {name: len(fam.make_family(name, H1, 4.0)) for name in fam.FAMILY_IDS}
    assert sizes == {"RadialBumps": 24, "ShellBumps": 24, "AxisConcentrated": 180, "GaussHermite": 12,
                     "Constants": 3, "Mixed": 48}


def test_mixed_split_is_disjoint_and_even():
    train, test = fam.make_family("Mixed", H1, 4.0).split()
    assert len(train) == len(test) == 24
    assert not set(train.ids()) & set(test.ids())


def test_unknown_family():
    with pytest.raises(ValueError):
        fam.make_family("Nope", H1)


def test_members_vanish_outside_support(family):
    rng = np.random.default_rng(0)
    for m in family:
        if m.support is None:
            continue
        pts = rng.uniform(m.support.lo - 1.0, m.support.hi + 1.0, size=(400, 3))
        out = np.any((pts < m.support.lo) | (pts > m.support.hi), axis=1)
        vals = m.value(pts[out])
        if m.id.startswith("tube"):
            # tubes continue upwards; their box ends where the measure is negligible
            U = F.kaplan_norm(H1, pts[out]) ** 4.0
            assert np.all((vals == 0.0) | (U - m.gauge_floor**4.0 >= 45.0 - 1e-9)), m.id
        else:
            assert np.all(vals == 0.0), m.id


def test_member_gradients_match_finite_differences(family):
    pts = F.random_points(H1, 40, seed=4, scale=1.2, min_ratio=0.05)
    for m in list(family)[::5]:
        f = m.field()
        ga = f.grad(pts)
        gf = f.with_mode("fd").grad(pts)
        # kinks of the C^1 profiles only cost accuracy at isolated points
        close = np.isclose(ga, gf, rtol=1e-3, atol=1e-5).all(axis=1)
        assert close.mean() > 0.9, m.id


def test_families_are_reproducible(family):
    again = fam.make_family(family.id, H1, 4.0)
    pts = F.random_points(H1, 50, seed=9)
    assert again.ids() == family.ids()
    for a, b in zip(again, family):
        assert np.array_equal(a.value(pts), b.value(pts))


def test_axis_tube_sits_on_the_axis():
    m = fam.axis_tube(H1, 0.5, 0.3, p=4.0)
    assert m.value(np.array([[0.0, 0.0, 0.2]]))[0] == 0.0
    assert m.value(np.array([[0.6, 0.0, 0.9]]))[0] == 0.0
    assert m.value(np.array([[0.0, 0.0, 1.0]]))[0] > 0.0
