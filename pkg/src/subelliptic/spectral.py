"""Finite differences for the Schrodinger operator -Delta + V and the weighted Dirichlet form on H^1.

Both operators are assembled from first-order difference matrices as sums of
D^T W D, so they are symmetric and positive semidefinite (up to the diagonal
potential) by construction.  Eigenvalues come from ARPACK's Lanczos iteration;
the generalized pencil (A, M) with diagonal M is reduced to the standard
problem M^(-1/2) A M^(-1/2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh

from .errors import KindMismatch, NoConvergence, OriginSingularity
from .frames import FrameSpec, Kind, coefficient_matrix, kaplan_norm, schrodinger_potential
from .integrate import Domain

MASS_FLOOR = 1e-12  # Dirichlet walls where exp(-N^p) drops below this fraction of its maximum
RESIDUAL_TOL = 1e-8
DENSE_LIMIT = 400


@dataclass
class GridSpec:
    """Cell-centred tensor grid: node i sits at lo + (i + 1/2) h, so no node is on a cell wall."""

    box: Domain
    shape: tuple
    boundary: str = "dirichlet"
    # nodes with exp(-N^p) below this are outside the Dirichlet walls; None keeps the full box
    mass_floor: float | None = MASS_FLOOR
    p: float | None = None

    def __post_init__(self):
        self.shape = tuple(int(n) for n in self.shape)
        if len(self.shape) != self.box.D:
            raise ValueError("one point count per axis is required")
        if min(self.shape) < 8:
            raise ValueError("at least 8 points per axis are required")
        if self.boundary != "dirichlet":
            raise ValueError("only Dirichlet boundaries are supported")

    @property
    def spacing(self):
        return (self.box.hi - self.box.lo) / np.asarray(self.shape, float)

    @property
    def axes(self):
        h = self.spacing
        return [self.box.lo[j] + (np.arange(n) + 0.5) * h[j] for j, n in enumerate(self.shape)]

    @property
    def cell_volume(self):
        return float(np.prod(self.spacing))

    def nodes(self):
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def meta(self):
        return {"lo": self.box.lo.tolist(), "hi": self.box.hi.tolist(), "shape": list(self.shape),
                "spacing": self.spacing.tolist(), "mass_floor": self.mass_floor}


def default_grid(frame: FrameSpec, p, n, mass_floor=MASS_FLOOR):
    """Bounding box of {exp(-N^p) >= mass_floor}, with n points per axis (or a tuple)."""
    _require_h1(frame)
    n_wall = (-math.log(mass_floor)) ** (1.0 / p)
    half = np.array([n_wall, n_wall, n_wall**2 / math.sqrt(frame.gauge_kappa)])
    shape = (n, n, n) if np.isscalar(n) else tuple(n)
    return GridSpec(Domain(-half, half), shape, mass_floor=mass_floor, p=float(p))


@dataclass
class SparseOperator:
    """A CSR matrix together with its symmetry flag."""

    matrix: sp.csr_matrix
    symmetric: bool = False

    @property
    def dimension(self):
        return self.matrix.shape[0]

    @property
    def row_offsets(self):
        return self.matrix.indptr

    @property
    def column_indices(self):
        return self.matrix.indices

    @property
    def values(self):
        return self.matrix.data

    def asymmetry(self):
        d = self.matrix - self.matrix.T
        return float(np.max(np.abs(d.data))) if d.nnz else 0.0


def _symmetric(m):
    m = m.tocsr()
    # (a + b) == (b + a) in floating point, so this is exactly symmetric
    return SparseOperator(((m + m.T) * 0.5).tocsr(), symmetric=True)


@dataclass
class EigenResult:
    eigenvalues: np.ndarray
    residuals: np.ndarray
    iterations: int
    grid: dict = field(default_factory=dict)
    vectors: np.ndarray | None = None

    def to_dict(self):
        return {"eigenvalues": [float(v) for v in self.eigenvalues],
                "residuals": [float(v) for v in self.residuals],
                "iterations": int(self.iterations), "grid": self.grid}


def _require_h1(frame: FrameSpec):
    if frame.kind is not Kind.METIVIER or frame.D != 3:
        raise KindMismatch("only the first Heisenberg group is discretized")


def active_nodes(frame: FrameSpec, grid: GridSpec, p=None):
    """Indices of nodes inside the Dirichlet walls (all nodes if the grid has no mass floor)."""
    pts = grid.nodes()
    p = grid.p if p is None else p
    if grid.mass_floor is None or p is None:
        return np.arange(len(pts)), pts
    keep = kaplan_norm(frame, pts) ** p <= -math.log(grid.mass_floor)
    return np.flatnonzero(keep), pts


def _difference(n, h, scheme):
    e = np.ones(n)
    if scheme == "centered":
        return sp.diags([-e[:-1], e[:-1]], [-1, 1], shape=(n, n)) / (2.0 * h)
    if scheme == "forward":
        return sp.diags([-e, e[:-1]], [0, 1], shape=(n, n)) / h
    if scheme == "backward":
        return sp.diags([e, -e[:-1]], [0, -1], shape=(n, n)) / h
    raise ValueError(f"unknown difference scheme {scheme!r}")


def _kron_all(mats):
    out = mats[0]
    for m in mats[1:]:
        out = sp.kron(out, m, format="csr")
    return out.tocsr()


def _field_operators(frame: FrameSpec, grid: GridSpec, scheme, p, ghosts):
    """Difference matrices of X_i with columns on the active nodes.

    ghosts=False: rows on the active nodes too (square operators).
    ghosts=True: rows on the grid padded by one node per side, so every
    difference across a Dirichlet wall or the box edge has its own row. The
    Dirichlet energy of a zero-extended function is then the same on any larger
    aligned grid.
    Returns (operators, row node coordinates).
    """
    idx, pts = active_nodes(frame, grid, p)
    restrict = sp.csr_matrix((np.ones(len(idx)), (np.arange(len(idx)), idx)), shape=(len(idx), len(pts)))
    h = grid.spacing
    if ghosts:
        embeds = [sp.eye(n + 2, n, k=-1, format="csr") for n in grid.shape]
        diffs = [(_difference(n + 2, h[j], scheme) @ embeds[j]).tocsr() for j, n in enumerate(grid.shape)]
        axes = [grid.box.lo[j] + (np.arange(-1, n + 1) + 0.5) * h[j] for j, n in enumerate(grid.shape)]
        mesh = np.meshgrid(*axes, indexing="ij")
        rows = np.stack([m.ravel() for m in mesh], axis=-1)
    else:
        embeds = [sp.identity(n, format="csr") for n in grid.shape]
        diffs = [_difference(n, h[j], scheme).tocsr() for j, n in enumerate(grid.shape)]
        rows = pts
    partials = []
    for j in range(frame.D):
        mats = list(embeds)
        mats[j] = diffs[j]
        partials.append((_kron_all(mats) @ restrict.T).tocsr())
    if not ghosts:
        partials = [(restrict @ m).tocsr() for m in partials]
        rows = rows[idx]
    live = np.flatnonzero(np.diff(sum(abs(m) for m in partials).tocsr().indptr) > 0)
    partials = [m[live] for m in partials] if ghosts else partials
    rows = rows[live] if ghosts else rows
    A = coefficient_matrix(frame, rows)
    ops = []
    for i in range(frame.ell):
        X = None
        for j in range(frame.D):
            if np.any(A[:, i, j] != 0.0):
                term = sp.diags(A[:, i, j]) @ partials[j]
                X = term if X is None else X + term
        ops.append(X.tocsr())
    return ops, rows


def discretize_fields(frame: FrameSpec, grid: GridSpec, scheme="centered", p=None):
    """One square difference operator per horizontal field X_i = sum_j A_ij d_j, on the active nodes.

    Values beyond the box or the Dirichlet walls are taken as zero.
    """
    _require_h1(frame)
    ops, _ = _field_operators(frame, grid, scheme, p, ghosts=False)
    return [SparseOperator(X) for X in ops]


def assemble_operators(frame: FrameSpec, p, grid: GridSpec, potential=True, weight=True):
    """(H, A, M): the Schrodinger operator, the Dirichlet-form matrix and the mass matrix.

    Gradients average the forward and backward one-sided schemes,
    1/2 sum_i (D+_i^T W D+_i + D-_i^T W D-_i), which has no checkerboard null
    modes (centred differences decouple odd and even nodes). H uses W = 1 and adds
    diag(V); A uses W = diag(exp(-N^p) cell volume) and M = W on the active nodes.
    potential=False sets V = 0 and weight=False sets W = 1, for the degenerate checks.
    """
    _require_h1(frame)
    idx, pts = active_nodes(frame, grid, p)
    nodes = pts[idx]
    N = kaplan_norm(frame, nodes)
    if np.any(N == 0.0):
        raise OriginSingularity("a grid node sits at the origin; use an even number of points per axis")
    vol = grid.cell_volume

    def weights(x):
        return np.exp(-(kaplan_norm(frame, x) ** p)) * vol if weight else np.ones(len(x))

    V = schrodinger_potential(frame, p, nodes) if potential else np.zeros(len(nodes))
    kin = None
    form = None
    for scheme in ("forward", "backward"):
        ops, rows = _field_operators(frame, grid, scheme, p, ghosts=True)
        W = sp.diags(weights(rows))
        for D in ops:
            kin = D.T @ D if kin is None else kin + D.T @ D
            form = D.T @ W @ D if form is None else form + D.T @ W @ D
    H = _symmetric(0.5 * kin + sp.diags(V))
    A = _symmetric(0.5 * form)
    M = SparseOperator(sp.diags(weights(nodes)).tocsr(), symmetric=True)
    return H, A, M


def _dense_eigs(B, k):
    vals, vecs = np.linalg.eigh(B.toarray() if sp.issparse(B) else np.asarray(B))
    return vals[:k], vecs[:, :k], 1


def lowest_eigenvalues(op, k, mass=None, tol=0.0, maxiter=None, vectors=False, v0_seed=0):
    """The k smallest eigenvalues of op, or of the pencil (op, mass) with diagonal positive mass."""
    mat = op.matrix if isinstance(op, SparseOperator) else sp.csr_matrix(op)
    if isinstance(op, SparseOperator) and not op.symmetric:
        raise ValueError("operator must be symmetric")
    n = mat.shape[0]
    if not 0 < k <= n:
        raise ValueError(f"k must lie in 1..{n}")
    scale = None
    if mass is not None:
        m = mass.matrix if isinstance(mass, SparseOperator) else sp.csr_matrix(mass)
        if (m - sp.diags(m.diagonal())).nnz and np.any((m - sp.diags(m.diagonal())).data != 0):
            raise ValueError("mass must be diagonal")
        d = m.diagonal()
        if np.any(d <= 0):
            raise ValueError("mass must be positive")
        scale = 1.0 / np.sqrt(d)
        S = sp.diags(scale)
        mat = (S @ mat @ S).tocsr()
        mat = ((mat + mat.T) * 0.5).tocsr()
    if n <= DENSE_LIMIT or k >= n - 1:
        vals, vecs, iters = _dense_eigs(mat, k)
    else:
        maxiter = maxiter or max(1000, 10 * int(math.sqrt(n)) * k)
        v0 = np.random.default_rng(v0_seed).standard_normal(n)
        count = [0]

        def matvec(v):
            count[0] += 1
            return mat @ v

        lin = LinearOperator((n, n), matvec=matvec, dtype=float)
        try:
            vals, vecs = eigsh(lin, k=k, which="SA", tol=tol, maxiter=maxiter, v0=v0,
                               ncv=min(n, max(2 * k + 1, k + 35)))
        except ArpackNoConvergence as exc:
            raise NoConvergence(f"Lanczos did not converge: {len(exc.eigenvalues)} of {k} modes") from exc
        order = np.argsort(vals)
        vals, vecs = vals[order], vecs[:, order]
        iters = count[0]
    res = np.linalg.norm(mat @ vecs - vecs * vals, axis=0) / np.linalg.norm(vecs, axis=0)
    if np.any(res > RESIDUAL_TOL * max(1.0, float(np.max(np.abs(vals))))):
        raise NoConvergence(f"residual {np.max(res):.3e} above tolerance")
    out = vecs * scale[:, None] if (vectors and scale is not None) else vecs
    return EigenResult(np.asarray(vals, float), res, int(iters), vectors=out if vectors else None)


def counting_function(result: EigenResult, level):
    """Number of computed eigenvalues <= level (inclusive)."""
    return int(np.sum(np.asarray(result.eigenvalues) <= level))


def count_below(op, level, mass=None, k0=8):
    """Eigenvalue count <= level, enlarging k until a computed eigenvalue exceeds level."""
    n = op.dimension if isinstance(op, SparseOperator) else op.shape[0]
    k = min(k0, n)
    while True:
        res = lowest_eigenvalues(op, k, mass)
        if res.eigenvalues[-1] > level or k == n:
            return counting_function(res, level), res
        k = min(2 * k, n)


@dataclass
class EquivalenceReport:
    grid: dict
    schrodinger: np.ndarray
    dirichlet: np.ndarray
    gaps: np.ndarray
    gap_scale: float
    lowest_dirichlet: float

    def to_dict(self):
        return {"grid": self.grid, "lambda_schrodinger": self.schrodinger.tolist(),
                "lambda_dirichlet": self.dirichlet.tolist(), "rel_gap": self.gaps.tolist(),
                "gap_scale": self.gap_scale, "lowest_dirichlet": self.lowest_dirichlet}

    def csv_rows(self):
        return ["mode", "lambda_schrodinger", "lambda_dirichlet", "rel_gap"], [
            [i + 1, a, b, g] for i, (a, b, g) in enumerate(zip(self.schrodinger, self.dirichlet, self.gaps))]


def relative_gaps(lam_h, lam_a):
    """|lam_h - lam_a| / max(|lam_a|, lam_a[1]).

    The ground state of both problems is 0 in the continuum, so each gap is
    measured against at least the first nontrivial Dirichlet-form eigenvalue.
    """
    lam_h, lam_a = np.asarray(lam_h), np.asarray(lam_a)
    scale = float(lam_a[1]) if len(lam_a) > 1 else float(abs(lam_a[0]))
    return np.abs(lam_h - lam_a) / np.maximum(np.abs(lam_a), scale), scale


def equivalence_report(frame: FrameSpec, p, grid: GridSpec, k=5):
    """The k lowest eigenvalues of H against those of the pencil (A, M), mode by mode."""
    H, A, M = assemble_operators(frame, p, grid)
    lh = lowest_eigenvalues(H, k).eigenvalues
    la = lowest_eigenvalues(A, k, mass=M).eigenvalues
    gaps, scale = relative_gaps(lh, la)
    # with Dirichlet walls the constant is not admissible, so the lowest pencil value is > 0
    return EquivalenceReport(grid.meta(), lh, la, gaps, scale, float(la[0]))


def refinement_trend(frame: FrameSpec, p, sizes=(32, 48), k=5):
    """Equivalence reports on successively finer default grids."""
    return [equivalence_report(frame, p, default_grid(frame, p, n), k) for n in sizes]


__all__ = [
    "GridSpec", "SparseOperator", "EigenResult", "EquivalenceReport", "default_grid", "active_nodes",
    "discretize_fields", "assemble_operators", "lowest_eigenvalues", "counting_function", "count_below",
    "relative_gaps", "equivalence_report", "refinement_trend", "MASS_FLOOR",
]
