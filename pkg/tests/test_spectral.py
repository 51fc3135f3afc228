import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from subelliptic import frames as F
from subelliptic import spectral as S
from subelliptic.errors import KindMismatch, OriginSingularity
from subelliptic.integrate import Domain

H1 = F.heisenberg()


def open_grid(half, n):
    """A grid without Dirichlet walls."""
    return S.GridSpec(Domain(-np.asarray(half, float), np.asarray(half, float)), (n, n, n), mass_floor=None)


def test_fields_kill_constants():
    grid = open_grid([2, 2, 2], 10)
    X1, X2 = S.discretize_fields(H1, grid)
    f = np.ones(X1.dimension)
    inner = np.all(np.abs(grid.nodes()) < 2 - 2 * grid.spacing, axis=1)
    assert np.allclose((X1.matrix @ f)[inner], 0.0) and np.allclose((X2.matrix @ f)[inner], 0.0)


def test_first_field_on_linear_function():
    grid = open_grid([2, 2, 2], 10)
    X1, _ = S.discretize_fields(H1, grid)
    pts = grid.nodes()
    inner = np.all(np.abs(pts) < 2 - 2 * grid.spacing, axis=1)
    assert np.allclose((X1.matrix @ pts[:, 0])[inner], 1.0, atol=1e-12)


def test_second_field_on_vertical_coordinate():
    grid = S.GridSpec(Domain([-3.25, -3.75, -2.0], [4.75, 4.25, 2.0]), (16, 16, 16), mass_floor=None)
    _, X2 = S.discretize_fields(H1, grid)
    pts = grid.nodes()
    target = np.argmin(np.sum((pts - [1.0, 0.0, 0.0]) ** 2, axis=1))
    assert np.allclose(pts[target, :2], [1.0, 0.0])
    assert (X2.matrix @ pts[:, 2])[target] == pytest.approx(-0.5, abs=1e-12)


def test_centred_fields_are_second_order():
    def f(x):
        return np.exp(-np.sum(x * x, axis=1)) * np.sin(x[:, 0] + 0.5 * x[:, 2])

    Nf = F.ScalarField(f, mode="fd")
    errs = []
    for n in (40, 80):
        grid = open_grid([4, 4, 4], n)
        X1, _ = S.discretize_fields(H1, grid)
        pts = grid.nodes()
        exact = F.subgradient(H1, Nf, pts)[:, 0]
        errs.append(np.max(np.abs(X1.matrix @ f(pts) - exact)))
    assert math.log2(errs[0] / errs[1]) >= 1.8


def test_operators_exactly_symmetric():
    grid = S.default_grid(H1, 4.0, 12)
    H, A, M = S.assemble_operators(H1, 4.0, grid)
    assert H.asymmetry() == 0.0 and A.asymmetry() == 0.0 and M.asymmetry() == 0.0
    assert H.symmetric and len(H.row_offsets) == H.dimension + 1
    assert len(H.column_indices) == len(H.values)


def test_no_potential_no_weight_collapses():
    grid = S.default_grid(H1, 4.0, 10)
    H, A, _ = S.assemble_operators(H1, 4.0, grid, potential=False, weight=False)
    assert (H.matrix != A.matrix).nnz == 0
    res_h = S.lowest_eigenvalues(H, 4)
    res_a = S.lowest_eigenvalues(A, 4)
    assert np.allclose(res_h.eigenvalues, res_a.eigenvalues, rtol=1e-10)


def test_kinetic_part_is_positive_semidefinite():
    grid = S.default_grid(H1, 4.0, 8)
    H, _, _ = S.assemble_operators(H1, 4.0, grid, potential=False, weight=False)
    assert np.linalg.eigvalsh(H.matrix.toarray())[0] >= -1e-12


def test_odd_grid_hits_origin():
    with pytest.raises(OriginSingularity):
        S.assemble_operators(H1, 4.0, S.default_grid(H1, 4.0, 9))


def test_only_first_heisenberg_group():
    with pytest.raises(KindMismatch):
        S.default_grid(F.quaternionic(), 4.0, 16)


def test_diagonal_spectrum():
    res = S.lowest_eigenvalues(sp.diags([5.0, 1.0, 3.0]), 2)
    assert np.allclose(res.eigenvalues, [1.0, 3.0])


@pytest.mark.parametrize("n", [60, 900])
def test_one_dimensional_laplacian(n):
    h = 1.0 / (n + 1)
    lap = sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1]) / h**2
    k = 4
    exact = (2 / h**2) * (1 - np.cos(np.pi * np.arange(1, k + 1) / (n + 1)))
    res = S.lowest_eigenvalues(lap, k)
    assert np.allclose(res.eigenvalues, exact, rtol=1e-9)


@settings(max_examples=10, deadline=None)
@given(st.floats(0.1, 10.0))
def test_mass_scaling(c):
    n = 40
    lap = sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1])
    plain = S.lowest_eigenvalues(lap, 3).eigenvalues
    scaled = S.lowest_eigenvalues(lap, 3, mass=c * sp.identity(n)).eigenvalues
    assert np.allclose(scaled, plain / c, rtol=1e-10)


def test_counting_convention():
    res = S.lowest_eigenvalues(sp.diags([5.0, 1.0, 3.0, 7.0]), 4)
    assert S.counting_function(res, 0.5) == 0
    assert S.counting_function(res, 5.0) == 3


def test_count_below_enlarges_k():
    n = 300
    lap = sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1])
    exact = 2 * (1 - np.cos(np.pi * np.arange(1, n + 1) / (n + 1)))
    count, _ = S.count_below(lap, 0.05, k0=2)
    assert count == int(np.sum(exact <= 0.05))


def test_smaller_domain_raises_eigenvalues():
    big = S.default_grid(H1, 4.0, 16)
    h = big.spacing
    small = S.GridSpec(Domain(big.box.lo + 2 * h, big.box.hi - 2 * h), (12, 12, 12), p=4.0)
    assert np.allclose(small.spacing, h)
    lam = []
    for grid in (big, small):
        H, A, M = S.assemble_operators(H1, 4.0, grid)
        lam.append((S.lowest_eigenvalues(H, 3).eigenvalues, S.lowest_eigenvalues(A, 3, mass=M).eigenvalues))
    (hb, ab), (hs, as_) = lam
    assert np.all(hs >= hb - 1e-9) and np.all(as_ >= ab - 1e-9)
    assert as_[0] > ab[0]


def test_pencil_ground_state_is_near_constant():
    grid = S.default_grid(H1, 4.0, 16)
    _, A, M = S.assemble_operators(H1, 4.0, grid)
    res = S.lowest_eigenvalues(A, 1, mass=M, vectors=True)
    assert 0.0 < res.eigenvalues[0] < 1e-3
    v = res.vectors[:, 0]
    w = M.matrix.diagonal()
    mean = np.sum(w * v) / np.sum(w)
    spread = np.sqrt(np.sum(w * (v - mean) ** 2) / np.sum(w))
    assert spread < 0.05 * abs(mean)


def test_relative_gaps_use_first_nontrivial_scale():
    gaps, scale = S.relative_gaps([0.01, 2.0, 4.1], [0.0, 2.0, 4.0])
    assert scale == 2.0
    assert np.allclose(gaps, [0.005, 0.0, 0.025])
