"""Inequality specifications and the verification engine.

Each specification names a left-hand integrand and a list of right-hand terms.
Member integrals are computed once per member as one vector-valued integral.
For compact members they are accumulated against exp(-(U - floor)) with a
per-member floor, so rows are in per-member units.  Every check except the
L1-defect term is linear in the measure, so those units cancel.  Squared
terms pick up a factor exp(-floor).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import sympy
from scipy import stats
from scipy.optimize import linprog

from .errors import (
    DegenerateFamily,
    ExponentOutOfRange,
    InsufficientCurve,
    KindMismatch,
    SupportLeak,
    UnusableSamples,
)
from .families import Member, TestFamily, anisotropic_bump, sweep_split
from .frames import (
    FrameSpec,
    GroupPoint,
    Kind,
    ScalarField,
    coefficient_matrix,
    conjugate,
    eta_parameters,
    horizontal_norm,
    kaplan_norm,
    norm_field,
    potential_field,
)
from .integrate import Domain, IntegralEstimate, MeasureSpec, integrate_box, sample_mean, sphere_area

SPEC_IDS = (
    "UBOUND_L2",
    "UBOUND_LQ",
    "HARDY_GENERAL",
    "HARDY_DIMFREE_L2",
    "HARDY_DIMFREE_LQ",
    "LEBESGUE_SPI",
    "SPI_L2",
    "SPI_LQ",
    "GRUSHIN_UBOUND_LQ",
    "GRUSHIN_UBOUND_L2",
    "HG_UBOUND_LQ",
)
VERDICTS = ("Holds", "HoldsWithinError", "Violated")
FIT_SLACK = 0.05
SIGMA_THRESHOLD = 3.0
LEAK_TOL = 1e-12


def _close(a, b):
    return abs(a - b) <= 1e-12 * max(1.0, abs(b))


# ---------------------------------------------------------------------------
# specifications


@dataclass(frozen=True)
class Term:
    """One right-hand term: coefficient role, integrand role and a fixed factor."""

    coefficient: str
    integrand: str
    factor: float = 1.0


@dataclass(eq=False)
class InequalitySpec:
    id: str
    frame: FrameSpec
    p: float
    q: float
    r: Optional[float] = None
    eps: Optional[float] = None
    lhs_weight: str = "1"
    lhs: str = "f_q"
    rhs: tuple = ()
    fit: str = "C"  # "AB", "C" (one multiplier) or "defect" (fixed terms plus a fitted last one)
    potential: Optional[str] = None
    precondition: Optional[str] = None

    def describe(self):
        return {
            "id": self.id,
            "frame": self.frame.describe(),
            "p": self.p,
            "q": self.q,
            "r": self.r,
            "eps": self.eps,
            "lhs_weight": self.lhs_weight,
            "lhs": self.lhs,
            "rhs": [[t.coefficient, t.integrand, t.factor] for t in self.rhs],
            "fit": self.fit,
            "potential": self.potential,
        }


def _require(cond, msg):
    if not cond:
        raise ExponentOutOfRange(msg)


def ubound_spec(frame: FrameSpec, p, q) -> InequalitySpec:
    """int eta |f|^q <= A int |grad f|^q + B int |f|^q."""
    p, q = float(p), float(q)
    eta_parameters(frame, p, q)  # validates the exponent ranges
    lq = not _close(q, 2.0)
    if frame.kind is Kind.METIVIER:
        sid = "UBOUND_LQ" if lq else "UBOUND_L2"
    elif frame.kind is Kind.GRUSHIN:
        sid = "GRUSHIN_UBOUND_LQ" if lq else "GRUSHIN_UBOUND_L2"
    else:
        _require(lq, "the Heisenberg-Greiner U-bound is stated for q = p/(p-1)")
        sid = "HG_UBOUND_LQ"
    return InequalitySpec(sid, frame, p, q, lhs_weight="eta", lhs="weighted_f_q",
                          rhs=(Term("A", "grad_q"), Term("B", "f_q")), fit="AB")


def hardy_general_spec(frame: FrameSpec, p, r=2.0, potential="log") -> InequalitySpec:
    """Weighted Hardy inequality with a radial potential V of |x|.

    ``potential="log"`` is V = log|x| and ``"power"`` is V = |x|^(2-r).
    """
    p, r = float(p), float(r)
    _require(p > 2, f"need p > 2, got {p}")
    _require(1.0 < r <= 2.0, f"r must lie in (1, 2], got {r}")
    h = frame.horizontal_dim
    if potential == "log":
        pre = None if h > 2 else f"horizontal dimension 2n > 2 required (2n = {h})"
    elif potential == "power":
        pre = None if h > r else f"horizontal dimension above r required ({h} <= {r})"
    else:
        raise ValueError(f"unknown potential {potential!r}")
    return InequalitySpec("HARDY_GENERAL", frame, p, r, r=r, lhs_weight="|lap V|", lhs="hardy_lhs",
                          rhs=(Term("C", "hardy_grad"), Term("C", "hardy_drift")), fit="C",
                          potential=potential, precondition=pre)


def hardy_dimfree_spec(frame: FrameSpec, p, eps, q=2.0) -> InequalitySpec:
    """int |f|^q <= C (eps int |grad f|^q + eps^-1 int |x|^q |f|^q)."""
    p, q, eps = float(p), float(q), float(eps)
    if frame.kind is not Kind.METIVIER:
        raise KindMismatch("dimension-free Hardy specs are defined on Metivier frames")
    _require(p > 2, f"need p > 2, got {p}")
    _require(eps > 0, "eps must be positive")
    if _close(q, 2.0):
        sid = "HARDY_DIMFREE_L2"
    else:
        _require(_close(q, conjugate(p)), f"q must be 2 or p/(p-1), got {q}")
        sid = "HARDY_DIMFREE_LQ"
    return InequalitySpec(sid, frame, p, q, eps=eps, lhs="f_q",
                          rhs=(Term("eps", "grad_q", eps), Term("1/eps", "xw_f_q", 1.0 / eps)), fit="C")


def lebesgue_spi_spec(frame: FrameSpec, q, delta) -> InequalitySpec:
    """Lebesgue super-Poincare: int |f|^q <= delta int |grad f|^q + C (1 + delta^(-Q/q)) (int |f|^(q/2))^2."""
    q, delta = float(q), float(delta)
    _require(1.0 < q <= 2.0, f"q must lie in (1, 2], got {q}")
    _require(delta > 0, "delta must be positive")
    defect = 1.0 + delta ** (-frame.Qdim / q)
    return InequalitySpec("LEBESGUE_SPI", frame, 0.0, q, eps=delta, lhs="f_q",
                          rhs=(Term("delta", "grad_q", delta), Term("beta", "f_half_q_sq", defect)), fit="defect")


def spi_spec(frame: FrameSpec, p, q, eps) -> InequalitySpec:
    """int |f|^q <= eps int |grad f|^q + beta (int |f|^(q/2))^2 with beta fitted."""
    p, q, eps = float(p), float(q), float(eps)
    _require(p > 2, f"need p > 2, got {p}")
    _require(eps > 0, "eps must be positive")
    if _close(q, 2.0):
        sid = "SPI_L2"
    else:
        _require(_close(q, conjugate(p)), f"q must be 2 or p/(p-1), got {q}")
        sid = "SPI_LQ"
    return InequalitySpec(sid, frame, p, q, eps=eps, lhs="f_q",
                          rhs=(Term("eps", "grad_q", eps), Term("beta", "f_half_q_sq")), fit="defect")


# ---------------------------------------------------------------------------
# integrands


@dataclass
class VectorField:
    """A horizontal vector field h (values (P, ell)) with its divergence sum_i X_i(h_i)."""

    value: object
    div: object
    name: str = ""


def position_field(frame: FrameSpec) -> VectorField:
    h = frame.horizontal_dim

    def value(xi):
        return GroupPoint.split(frame, xi).x

    def div(xi):
        return np.full(np.shape(xi)[:-1], float(h))

    return VectorField(value, div, "x")


def log_gradient_field(frame: FrameSpec) -> VectorField:
    """h = grad log|x| = x / |x|^2, with divergence (2n - 2)/|x|^2."""
    h = frame.horizontal_dim

    def value(xi):
        x = GroupPoint.split(frame, xi).x
        return x / np.sum(x * x, axis=-1)[..., None]

    def div(xi):
        x = GroupPoint.split(frame, xi).x
        return (h - 2.0) / np.sum(x * x, axis=-1)

    return VectorField(value, div, "grad log|x|")


def zero_field(frame: FrameSpec) -> VectorField:
    return VectorField(lambda xi: np.zeros(np.shape(xi)[:-1] + (frame.ell,)),
                       lambda xi: np.zeros(np.shape(xi)[:-1]), "0")


def power_weight(frame: FrameSpec, s) -> ScalarField:
    """omega = |x|^s as a scalar field (smooth away from the axis)."""
    h = frame.horizontal_dim
    s = float(s)

    def value(xi):
        return horizontal_norm(frame, xi) ** s

    def grad(xi):
        xi = np.asarray(xi, dtype=float)
        x = GroupPoint.split(frame, xi).x
        r2 = np.sum(x * x, axis=-1)
        g = np.zeros(xi.shape)
        if s != 0.0:
            with np.errstate(divide="ignore", invalid="ignore"):
                c = np.where(r2 > 0, s * r2 ** (s / 2.0 - 1.0), 0.0)
            g[..., :h] = c[..., None] * x
        return g

    return ScalarField(value, grad, mode="analytic")


def _radial_potential(kind, r, h, rr):
    """(phi'(|x|), Delta V) for V = phi(|x|)."""
    if kind == "log":
        return 1.0 / rr, (h - 2.0) / rr**2
    s = 2.0 - r
    return s * rr ** (s - 1.0), s * (h - 2.0 + s) * rr ** (s - 2.0)


class _Integrands:
    """Evaluates the named integrands of a spec at a batch of points."""

    def __init__(self, spec: InequalitySpec, names: Sequence[str]):
        self.spec = spec
        self.names = list(names)
        self.frame = spec.frame
        self.Nf = norm_field(spec.frame)

    def __call__(self, member: Member, pts):
        spec, frame = self.spec, self.frame
        q = spec.q
        A = coefficient_matrix(frame, pts)
        f = np.asarray(member.value(pts), dtype=float)
        sg = np.einsum("...ij,...j->...i", A, member.grad(pts))
        af = np.abs(f)
        gnorm = np.sqrt(np.sum(sg * sg, axis=-1))
        x = GroupPoint.split(frame, pts).x
        rr = np.sqrt(np.sum(x * x, axis=-1))
        out = []
        for name in self.names:
            if name == "f_q":
                v = af**q
            elif name == "grad_q":
                v = gnorm**q
            elif name == "f_half_q":
                v = af ** (q / 2.0)
            elif name == "weighted_f_q":
                a, b = eta_parameters(frame, spec.p, q)
                N = kaplan_norm(frame, pts)
                v = rr**a * N**b * af**q
            elif name == "xw_f_q":
                v = rr ** (frame.gamma_equiv * q) * af**q
            elif name.startswith("hardy_"):
                v = self._hardy(name, pts, A, af, gnorm, rr)
            else:
                raise ValueError(f"unknown integrand {name!r}")
            out.append(np.where(af == 0.0, 0.0, v) if name != "grad_q" else v)
        return np.stack(out, axis=-1)

    def lap_v(self, rr):
        return _radial_potential(self.spec.potential, self.spec.r, self.frame.horizontal_dim, rr)[1]

    def _hardy(self, name, pts, A, af, gnorm, rr):
        spec = self.spec
        r = spec.r
        with np.errstate(divide="ignore", invalid="ignore"):
            dphi, lap = _radial_potential(spec.potential, r, self.frame.horizontal_dim, rr)
            alap = np.abs(lap)
            if name == "hardy_lhs":
                return alap * af**r
            if name == "hardy_grad":
                return np.abs(dphi) ** r / alap ** (r - 1.0) * gnorm**r
            # grad U . grad V = p N^(p-1) phi'(|x|) (grad N . x/|x|)
            N = kaplan_norm(self.frame, pts)
            gN = np.einsum("...ij,...j->...i", A, self.Nf.grad(pts))
            x = GroupPoint.split(self.frame, pts).x
            dot = spec.p * N ** (spec.p - 1.0) * dphi * np.sum(gN * x, axis=-1) / rr
            return np.abs(dot) ** r / alap ** (r - 1.0) * af**r


def _names_for(spec: InequalitySpec):
    names = [spec.lhs]
    for t in spec.rhs:
        base = "f_half_q" if t.integrand == "f_half_q_sq" else t.integrand
        if base not in names:
            names.append(base)
    return names


# ---------------------------------------------------------------------------
# member integrals


@dataclass
class MemberIntegrals:
    member_id: str
    names: list
    values: np.ndarray
    errors: np.ndarray
    log_floor: float = 0.0
    method: str = "AdaptiveQuad"

    def get(self, name):
        i = self.names.index(name)
        return float(self.values[i]), float(self.errors[i])


def polar_ok(frame: FrameSpec, member: Member):
    """Whether the member's integrals reduce to (|x|, |z|) polar coordinates.

    Integrands of biradial members are invariant under rotations of each block
    on H-type, Grushin and Heisenberg-Greiner frames.
    """
    return member.biradial and (frame.is_h_type or frame.kind is not Kind.METIVIER)


def member_integrals(spec: InequalitySpec, member: Member, measure: MeasureSpec, rtol=1e-5, tol=1e-13,
                     names=None, max_evals=20_000_000, method="auto") -> MemberIntegrals:
    """All integrands of ``spec`` for one member, normalised by Z.

    ``method`` is "polar" (two-dimensional reduction), "box" (quadrature over
    the support box, D <= 3), "mcmc" (sample mean) or "auto".
    """
    names = names or _names_for(spec)
    evaluator = _Integrands(spec, names)
    frame = measure.frame
    p = measure.p
    floor = member.log_floor if (member.support is not None and p > 0) else 0.0

    def integrand(pts):
        out = np.zeros((len(pts), len(names)))
        live = np.asarray(member.value(pts)) != 0.0
        if "grad_q" in names and not member.compact:
            live[:] = True
        sub = pts[live]
        if len(sub):
            vals = evaluator(member, sub)
            if p > 0:
                vals = vals * np.exp(floor - kaplan_norm(frame, sub) ** p)[:, None]
            out[live] = vals
        return out

    if method == "auto":
        method = "polar" if polar_ok(frame, member) else ("box" if frame.D <= 3 else "mcmc")
    if method == "polar":
        est = _polar_integral(integrand, frame, measure, member, tol, rtol, max_evals)
    elif method == "box":
        # compact members are integrated over their own support; the floor keeps them in range
        dom = measure.box if member.support is None else member.support
        est = integrate_box(integrand, dom, tol=tol, rtol=rtol, max_evals=max_evals)
    else:
        if measure.samples is None:
            raise UnusableSamples(f"member {member.id} needs MCMC samples on a D = {frame.D} frame")
        est = sample_mean(lambda pts: evaluator(member, pts), measure.samples)
        return MemberIntegrals(member.id, names, np.atleast_1d(est.value), np.atleast_1d(est.error), 0.0,
                               "MCMCRatio")
    Z, eZ = measure.Z.value, measure.Z.error
    val = np.atleast_1d(est.value) / Z
    err = np.atleast_1d(est.error) / Z + np.abs(val) * eZ / Z
    return MemberIntegrals(member.id, names, val, err, floor, "AdaptiveQuad")


def _polar_integral(integrand, frame, measure, member, tol, rtol, max_evals):
    """Integrals of functions of (|x|, |z|) through a two-dimensional polar reduction."""
    h, v = frame.horizontal_dim, frame.vertical_dim
    if member.radial_box is not None:
        r_lo, r_hi, z_lo, z_hi = member.radial_box
    else:
        r_lo, r_hi = 0.0, measure.R_box
        z_lo, z_hi = 0.0, measure.R_box**frame.vertical_degree / math.sqrt(frame.gauge_kappa)

    def reduced(rp):
        pts = np.zeros((len(rp), frame.D))
        pts[:, 0] = rp[:, 0]
        pts[:, h] = rp[:, 1]
        jac = rp[:, 0] ** (h - 1) * rp[:, 1] ** (v - 1)
        return integrand(pts) * jac[:, None]

    rb, zb = getattr(member, "radial_breaks", ((), ()))
    r_cuts = [r_lo] + [b for b in rb if r_lo < b < r_hi] + [r_hi]
    z_cuts = [z_lo] + [b for b in zb if z_lo < b < z_hi] + [z_hi]
    value, error, evals, conv = 0.0, 0.0, 0, True
    for r0, r1 in zip(r_cuts[:-1], r_cuts[1:]):
        for z0, z1 in zip(z_cuts[:-1], z_cuts[1:]):
            est = integrate_box(reduced, Domain([r0, z0], [r1, z1]), tol=tol, rtol=rtol, max_evals=max_evals)
            value = value + np.asarray(est.value)
            error = error + np.asarray(est.error)
            evals += est.evals
            conv = conv and est.converged
    c = sphere_area(h) * sphere_area(v)
    return IntegralEstimate(value * c, error * c, "AdaptiveQuad", evals, conv)


def family_integrals(spec, family: TestFamily, measure, rtol=1e-5, workers=1, names=None):
    """Member integrals for a whole family, in member order."""
    def one(m):
        return member_integrals(spec, m, measure, rtol=rtol, names=names)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(one, family.members))
    return [one(m) for m in family.members]


# ---------------------------------------------------------------------------
# rows, fitting and reports


@dataclass
class MemberRow:
    member_id: str
    lhs: float
    lhs_err: float
    terms: list  # [(value, error)] in row units, squared terms already combined
    rhs: float = float("nan")
    rhs_err: float = float("nan")
    margin: float = float("nan")

    @property
    def combined_error(self):
        return self.lhs_err + self.rhs_err


def make_rows(spec: InequalitySpec, integrals: Sequence[MemberIntegrals]):
    rows = []
    for mi in integrals:
        lhs, elhs = mi.get(spec.lhs)
        terms = []
        for t in spec.rhs:
            if t.integrand == "f_half_q_sq":
                m, em = mi.get("f_half_q")
                s = math.exp(-mi.log_floor)
                terms.append((t.factor * m * m * s, t.factor * 2.0 * m * em * s))
            else:
                v, e = mi.get(t.integrand)
                terms.append((t.factor * v, t.factor * e))
        rows.append(MemberRow(mi.member_id, lhs, elhs, terms))
    return rows


def _coefficients(spec, constants):
    if spec.fit == "AB":
        return [constants["A"], constants["B"]]
    if spec.fit == "C":
        return [constants["C"]] * len(spec.rhs)
    return [1.0] * (len(spec.rhs) - 1) + [constants["beta"]]


def evaluate_rows(spec, rows, constants):
    coef = _coefficients(spec, constants)
    for row in rows:
        row.rhs = float(sum(c * v for c, (v, _) in zip(coef, row.terms)))
        row.rhs_err = float(sum(c * e for c, (_, e) in zip(coef, row.terms)))
        row.margin = (row.rhs - row.lhs) / row.lhs if row.lhs > 0 else math.inf
    return rows


def verdict_of(rows):
    if any(r.lhs - r.rhs > SIGMA_THRESHOLD * r.combined_error for r in rows):
        return "Violated"
    if any(r.rhs < r.lhs for r in rows):
        return "HoldsWithinError"
    return "Holds"


def fit_from_rows(spec: InequalitySpec, rows, slack=FIT_SLACK):
    """Smallest constants making every row hold, times (1 + slack); returns (constants, extremal id)."""
    active = [r for r in rows if r.lhs > 0]
    if spec.fit == "C":
        denom = np.array([sum(v for v, _ in r.terms) for r in active])
        ok = denom > 0
        if len(active) == 0 or not np.any(ok):
            raise DegenerateFamily("every member has a vanishing right-hand side")
        if np.any(~ok):
            # a positive left side against a zero right side cannot be fitted
            raise DegenerateFamily(f"member {active[int(np.argmin(ok))].member_id} has a zero right-hand side")
        ratios = np.array([r.lhs for r in active]) / denom
        k = int(np.argmax(ratios))
        return {"C": float(ratios[k] * (1.0 + slack))}, active[k].member_id
    if spec.fit == "defect":
        fixed = np.array([r.lhs - sum(v for v, _ in r.terms[:-1]) for r in active])
        last = np.array([r.terms[-1][0] for r in active])
        if len(active) == 0 or not np.any(last > 0):
            raise DegenerateFamily("every member has a vanishing defect term")
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = np.where(last > 0, fixed / last, np.where(fixed > 0, np.inf, -np.inf))
        k = int(np.argmax(ratios))
        return {"beta": float(max(ratios[k], 0.0) * (1.0 + slack))}, active[k].member_id
    G = np.array([r.terms[0][0] for r in active])
    F = np.array([r.terms[1][0] for r in active])
    L = np.array([r.lhs for r in active])
    if len(active) == 0 or np.all((G == 0) & (F == 0)):
        raise DegenerateFamily("every member has a vanishing right-hand side")
    # rows in relative units: A g_i + B f_i >= 1
    g, fq = G / L, F / L
    res = linprog([1.0, 1.0], A_ub=-np.stack([g, fq], axis=1), b_ub=-np.ones(len(L)),
                  bounds=[(0, None), (0, None)], method="highs")
    if res.status != 0:
        raise DegenerateFamily(f"no finite (A, B) exists for this family: {res.message}")
    A, B = (float(v) for v in res.x)
    k = int(np.argmin(A * g + B * fq))
    return {"A": A * (1.0 + slack), "B": B * (1.0 + slack)}, active[k].member_id


@dataclass
class CheckReport:
    spec_id: str
    family_id: str
    rows: list
    constants: dict
    extremal_member: Optional[str]
    worst_margin: float
    verdict: Optional[str]
    precondition: dict = field(default_factory=lambda: {"status": "ok"})
    train_family: Optional[str] = None

    def to_dict(self):
        return {
            "spec_id": self.spec_id,
            "family_id": self.family_id,
            "train_family": self.train_family,
            "precondition": self.precondition,
            "constants": self.constants,
            "extremal_member": self.extremal_member,
            "worst_margin": self.worst_margin,
            "verdict": self.verdict,
            "rows": [
                {
                    "member_id": r.member_id,
                    "lhs": r.lhs,
                    "lhs_err": r.lhs_err,
                    "terms": [[v, e] for v, e in r.terms],
                    "rhs": r.rhs,
                    "rhs_err": r.rhs_err,
                    "margin": r.margin,
                }
                for r in self.rows
            ],
        }

    def csv_rows(self):
        head = ["member_id", "lhs", "lhs_err", "rhs", "rhs_err", "margin"]
        k = max((len(r.terms) for r in self.rows), default=0)
        for i in range(k):
            head += [f"term{i}", f"term{i}_err"]
        body = []
        for r in self.rows:
            line = [r.member_id, r.lhs, r.lhs_err, r.rhs, r.rhs_err, r.margin]
            for v, e in r.terms:
                line += [v, e]
            body.append(line)
        return head, body


def _hardy_precondition(spec: InequalitySpec, family: TestFamily, n_probe=2000, seed=0):
    """Static dimension condition, then Delta V >= 0 sampled on each member's support."""
    if spec.precondition:
        return {"status": "unmet", "reason": spec.precondition}
    ev = _Integrands(spec, [])
    rng = np.random.default_rng(seed)
    bad = []
    for m in family:
        if m.support is None:
            continue
        pts = rng.uniform(m.support.lo, m.support.hi, size=(n_probe, spec.frame.D))
        on = np.abs(m.value(pts)) > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            lap = ev.lap_v(horizontal_norm(spec.frame, pts[on]))
        if np.any(lap < 0):
            bad.append(m.id)
    if bad:
        return {"status": "flagged", "reason": "Delta V < 0 on the support", "members": bad}
    return {"status": "ok"}


def check_inequality(spec: InequalitySpec, family: TestFamily, measure: MeasureSpec, constants=None,
                     rtol=1e-5, workers=1) -> CheckReport:
    """Evaluate a spec on a family.

    Without ``constants`` the family is split into interleaved halves: the
    constants are fitted on the first and the report is for the second.
    """
    if spec.frame is not family.frame and spec.frame.digest() != family.frame.digest():
        raise KindMismatch("family and spec live on different frames")
    if spec.id == "LEBESGUE_SPI":
        for m in family:
            if m.support is None or m.support.intersect(measure.box) is None or np.any(
                m.support.lo < measure.box.lo) or np.any(m.support.hi > measure.box.hi):
                raise SupportLeak(f"member {m.id} is not compactly supported in the Lebesgue box")
    pre = {"status": "ok"}
    if spec.id == "HARDY_GENERAL":
        pre = _hardy_precondition(spec, family)
        if pre["status"] == "unmet":
            return CheckReport(spec.id, family.id, [], {}, None, float("nan"), None, pre)
    train_id = None
    if constants is None:
        train, test = family.split()
        rows_train = make_rows(spec, family_integrals(spec, train, measure, rtol, workers))
        constants, extremal = fit_from_rows(spec, rows_train)
        family, train_id = test, train.id
    else:
        extremal = None
    rows = evaluate_rows(spec, make_rows(spec, family_integrals(spec, family, measure, rtol, workers)), constants)
    margins = [r.margin for r in rows if r.lhs > 0]
    worst = float(min(margins)) if margins else float("inf")
    return CheckReport(spec.id, family.id, rows, constants, extremal, worst, verdict_of(rows), pre, train_id)


def joint_check(specs: Sequence[InequalitySpec], families: Sequence[TestFamily], measure: MeasureSpec,
                rtol=1e-5, workers=1):
    """One set of constants for several specs (e.g. an eps grid) and families.

    The specs must share their integrands.  Constants are fitted on the union
    of the training halves; one report is returned per (spec, family) test half.
    """
    names = _names_for(specs[0])
    for s in specs[1:]:
        if _names_for(s) != names or s.fit != specs[0].fit:
            raise ValueError("joint checks need specs with identical integrands and fit mode")
    halves = []
    train_rows = []
    for fam in families:
        tr, te = fam.split()
        itr = family_integrals(specs[0], tr, measure, rtol, workers, names=names)
        ite = family_integrals(specs[0], te, measure, rtol, workers, names=names) if len(te) else []
        halves.append((tr, te, ite))
        for s in specs:
            train_rows += make_rows(s, itr)
    constants, extremal = fit_from_rows(specs[0], train_rows)
    reports = []
    for s in specs:
        for tr, te, ite in halves:
            rows = evaluate_rows(s, make_rows(s, ite), constants)
            margins = [r.margin for r in rows if r.lhs > 0]
            worst = float(min(margins)) if margins else float("inf")
            reports.append(CheckReport(s.id, te.id, rows, constants, extremal, worst,
                                       verdict_of(rows), {"status": "ok"}, tr.id))
    return reports


def fit_constants(spec: InequalitySpec, family: TestFamily, measure: MeasureSpec, rtol=1e-5, workers=1):
    """Fitted constants (dict) and the extremal member id."""
    if len(family) < 8:
        raise DegenerateFamily(f"fitting needs at least 8 members, got {len(family)}")
    rows = make_rows(spec, family_integrals(spec, family, measure, rtol, workers))
    return fit_from_rows(spec, rows)


def bootstrap_constants(spec: InequalitySpec, family: TestFamily, measure: MeasureSpec, n_boot=40, seed=0,
                        rtol=1e-5, workers=1):
    """Constants refitted on members resampled with replacement.

    Returns (full-family constants, list of bootstrap constants). Member integrals
    are computed once and shared by every resample.
    """
    rows = make_rows(spec, family_integrals(spec, family, measure, rtol, workers))
    full, _ = fit_from_rows(spec, rows)
    rng = np.random.default_rng(seed)
    boots = []
    for _ in range(n_boot):
        idx = rng.integers(0, len(rows), len(rows))
        boots.append(fit_from_rows(spec, [rows[i] for i in idx])[0])
    return full, boots


# ---------------------------------------------------------------------------
# integration by parts identity


def _leak_check(member_value, dom: Domain, n=9):
    D = dom.D
    grid = [np.linspace(a, b, n) for a, b in zip(dom.lo, dom.hi)]
    pts = []
    for k in range(D):
        for side in (dom.lo[k], dom.hi[k]):
            g = list(grid)
            g[k] = np.array([side])
            mesh = np.meshgrid(*g, indexing="ij")
            pts.append(np.stack([m.ravel() for m in mesh], axis=-1))
    pts = np.concatenate(pts)
    peak = float(np.max(np.abs(member_value(pts))))
    if peak > LEAK_TOL:
        raise SupportLeak(f"|f| = {peak:.3e} on the integration box boundary")


def ibp_terms(measure: MeasureSpec, f, h: VectorField, omega: ScalarField, r, domain=None, tol=1e-8,
              max_evals=20_000_000):
    """The four integrals whose sum vanishes by integration by parts, with their errors."""
    r = float(r)
    if not 1.0 < r <= 2.0:
        raise ExponentOutOfRange(f"r must lie in (1, 2], got {r}")
    frame, p = measure.frame, measure.p
    if isinstance(f, Member):
        domain = domain or f.support
    value, grad = f.value, f.grad
    domain = domain or measure.box
    _leak_check(value, domain)
    Uf = potential_field(frame, p)

    def integrand(pts):
        A = coefficient_matrix(frame, pts)
        fv = np.asarray(value(pts), dtype=float)
        sg = np.einsum("...ij,...j->...i", A, grad(pts))
        hv = h.value(pts)
        w = omega.value(pts)
        sgw = np.einsum("...ij,...j->...i", A, omega.grad(pts))
        N = kaplan_norm(frame, pts)
        gU = np.einsum("...ij,...j->...i", A, Uf.grad(pts))
        af = np.abs(fv)
        fr = af**r
        with np.errstate(divide="ignore", invalid="ignore"):
            fr2f = np.where(af > 0, af ** (r - 1.0) * np.sign(fv), 0.0)
        t1 = fr * h.div(pts) * w
        t2 = r * fr2f * np.sum(sg * hv, axis=-1) * w
        t3 = -fr * np.sum(gU * hv, axis=-1) * w
        t4 = fr * np.sum(sgw * hv, axis=-1)
        out = np.stack([t1, t2, t3, t4], axis=-1)
        out = np.where(af[:, None] > 0, out, 0.0)
        return out * np.exp(-(N**p))[:, None] / measure.Z.value

    return integrate_box(integrand, domain, tol=tol, max_evals=max_evals)


def ibp_residual(measure: MeasureSpec, f, h: VectorField, omega: ScalarField, r, domain=None, tol=1e-8):
    """(residual, scale): the sum of the four terms and the sum of their absolute values."""
    est = ibp_terms(measure, f, h, omega, r, domain=domain, tol=tol)
    v = np.asarray(est.value)
    return float(np.sum(v)), float(np.sum(np.abs(v)))


IBP_TOL = 1e-3


def ibp_bumps(frame: FrameSpec):
    """Two compact bumps kept away from the axis x = 0, so |x|^s weights stay smooth on them."""
    h, v = frame.horizontal_dim, frame.vertical_dim
    cx1 = np.resize([0.8, 0.3], h)
    cx2 = np.resize([-0.5, 0.6], h)
    c1 = np.concatenate([cx1, np.full(v, 0.2)])
    c2 = np.concatenate([cx2, np.full(v, -0.3)])
    return anisotropic_bump(frame, c1, 0.4), anisotropic_bump(frame, c2, 0.35)


def ibp_suite(measure: MeasureSpec, tol=1e-8, tighten=100.0):
    """Residuals of the integration-by-parts identity over fields, weights, exponents and bumps.

    Each of the two fields h = x and h = grad log|x| is paired with three
    (r, omega, bump) combinations. Every case is integrated at tol and at
    tol / tighten; the rows report both relative residuals and their ratio.
    """
    frame = measure.frame
    if frame.ell != frame.horizontal_dim:
        raise KindMismatch("the suite's fields live in the x block; Grushin frames have more horizontal fields")
    b1, b2 = ibp_bumps(frame)
    one = power_weight(frame, 0.0)
    combos = [(2.0, one, "1", b1), (1.5, power_weight(frame, -0.5), "|x|^(r-2)", b2), (1.5, one, "1", b1)]
    rows = []
    for field_ in (position_field(frame), log_gradient_field(frame)):
        for r, omega, wname, bump_ in combos:
            res, scale = ibp_residual(measure, bump_, field_, omega, r, tol=tol)
            res2, scale2 = ibp_residual(measure, bump_, field_, omega, r, tol=tol / tighten)
            rows.append({
                "p": measure.p, "h": field_.name, "r": r, "omega": wname, "member": bump_.id,
                "residual": res, "scale": scale, "rel": abs(res) / scale,
                "rel_tight": abs(res2) / scale2,
                "reduction": abs(res) / abs(res2) if res2 != 0 else math.inf,
            })
    return rows


# ---------------------------------------------------------------------------
# super-Poincare growth


@dataclass
class BetaPoint:
    eps: float
    beta: float
    err: float
    argmax: str
    log_beta: float


@dataclass
class BetaCurve:
    q: float
    family_id: str
    points: list

    @property
    def eps(self):
        return np.array([pt.eps for pt in self.points])

    @property
    def beta(self):
        return np.array([pt.beta for pt in self.points])

    @property
    def log_beta(self):
        return np.array([pt.log_beta for pt in self.points])

    def csv_rows(self):
        return ["eps", "beta_hat", "err", "argmax_member"], [
            [pt.eps, pt.beta, pt.err, pt.argmax] for pt in self.points]


def _spi_integrals(measure, q, family, rtol, workers):
    spec = InequalitySpec("SPI_LQ", measure.frame, measure.p, float(q), lhs="f_q")
    return family_integrals(spec, family, measure, rtol, workers, names=["f_q", "grad_q", "f_half_q"])


def _beta_from(integrals, eps):
    best = (-math.inf, 0.0, None)
    any_mass = False
    for mi in integrals:
        L, eL = mi.get("f_q")
        G, eG = mi.get("grad_q")
        M, eM = mi.get("f_half_q")
        if not M > 0:
            continue
        any_mass = True
        top = L - eps * G
        if top <= SIGMA_THRESHOLD * (eL + eps * eG):
            # unresolved cancellation: the member certifies nothing
            lb = -math.inf
        else:
            lb = math.log(top) + mi.log_floor - 2.0 * math.log(M)
        if lb > best[0]:
            rel = (eL + eps * eG) / top + 2.0 * eM / M if top > 0 else 0.0
            best = (lb, rel, mi.member_id)
    if not any_mass:
        raise DegenerateFamily("no member has positive L^(q/2) mass")
    lb, rel, arg = best
    if lb == -math.inf:
        return BetaPoint(float(eps), 0.0, 0.0, arg or integrals[0].member_id, -math.inf)
    beta = math.exp(lb) if lb < 709.0 else math.inf
    return BetaPoint(float(eps), beta, beta * rel, arg, lb)


def beta_hat(measure: MeasureSpec, q, eps, family: TestFamily, rtol=1e-5, workers=1, integrals=None):
    """Lower bound for the growth function at eps: (value, argmax member id)."""
    if not eps > 0:
        raise ExponentOutOfRange("eps must be positive")
    integrals = integrals or _spi_integrals(measure, q, family, rtol, workers)
    pt = _beta_from(integrals, float(eps))
    return pt.beta, pt.argmax


def beta_curve(measure: MeasureSpec, q, eps_grid, family: TestFamily, rtol=1e-5, workers=1,
               integrals=None) -> BetaCurve:
    """beta_hat over an eps grid (sorted to strictly decreasing eps), sharing member integrals."""
    grid = sorted({float(e) for e in eps_grid}, reverse=True)
    if any(e <= 0 for e in grid):
        raise ExponentOutOfRange("eps must be positive")
    integrals = integrals or _spi_integrals(measure, q, family, rtol, workers)
    return BetaCurve(float(q), family.id, [_beta_from(integrals, e) for e in grid])


@dataclass
class ExponentFit:
    sigma: float
    C: float
    residual: float
    half_width: float
    n: int

    def as_dict(self):
        return {"sigma": self.sigma, "C": self.C, "residual": self.residual,
                "half_width": self.half_width, "n": self.n}


def fit_growth_exponent(curve: BetaCurve, level=0.95) -> ExponentFit:
    """Least squares of log log beta on log(1/eps)."""
    pts = [pt for pt in curve.points if pt.log_beta > 0]
    if len(pts) < 5:
        raise InsufficientCurve(f"need at least 5 points with beta > 1, got {len(pts)}")
    x = np.log(1.0 / np.array([pt.eps for pt in pts]))
    y = np.log(np.array([pt.log_beta for pt in pts]))
    res = stats.linregress(x, y)
    resid = y - (res.slope * x + res.intercept)
    dof = len(x) - 2
    half = float(stats.t.ppf(0.5 + level / 2.0, dof) * res.stderr)
    return ExponentFit(float(res.slope), float(math.exp(res.intercept)),
                       float(np.sqrt(np.mean(resid**2))), half, len(x))


def fit_growth_envelope(curve: BetaCurve, sigma, slack=FIT_SLACK):
    """(C, K) such that beta <= exp(C eps^-sigma) + K on every point of the curve."""
    beta = curve.beta
    K = float(np.min(beta))
    C = 0.0
    for pt in curve.points:
        excess = pt.beta - K
        if excess > 1.0:
            C = max(C, pt.eps**sigma * math.log(excess))
    return C * (1.0 + slack), K * (1.0 + slack)


def split_curve(curve: BetaCurve):
    """Disjoint training and test curves, with both ends of the eps grid in training."""
    pick = sweep_split(len(curve.points))
    train = [pt for j, pt in enumerate(curve.points) if j in pick]
    test = [pt for j, pt in enumerate(curve.points) if j not in pick]
    return BetaCurve(curve.q, curve.family_id, train), BetaCurve(curve.q, curve.family_id, test)


def envelope_holds(curve: BetaCurve, sigma, C, K):
    """Per point: beta - err <= exp(C eps^-sigma) + K."""
    out = []
    for pt in curve.points:
        bound = math.exp(min(C * pt.eps ** (-sigma), 709.0)) + K
        out.append(pt.beta - SIGMA_THRESHOLD * pt.err <= bound)
    return out


# ---------------------------------------------------------------------------
# certificates (exact arithmetic)


def rational(v):
    """Exact rational from an int, a string like '4/3' or a float (nearest simple fraction)."""
    if isinstance(v, sympy.Basic):
        return sympy.nsimplify(v)
    if isinstance(v, str):
        return sympy.Rational(v)
    if isinstance(v, int):
        return sympy.Integer(v)
    return sympy.nsimplify(repr(float(v)), rational=True) if abs(float(v)) >= 1e-4 else sympy.Rational(
        repr(float(v)))


def _setting(frame_or_kind, q, p):
    kind = frame_or_kind.kind if isinstance(frame_or_kind, FrameSpec) else Kind.parse(frame_or_kind)
    lq = q != 2
    if kind is Kind.METIVIER:
        return "metivier-lq" if lq else "metivier-l2"
    if kind is Kind.GRUSHIN:
        return "grushin-lq" if lq else "grushin-l2"
    return "hg-lq"


def exponent_table(setting, p, q=None, gamma=None, zeta=None):
    """Theoretical growth exponent sigma with beta ~ exp(C eps^-sigma), exact."""
    p = rational(p)
    if setting == "metivier-l2":
        _require(p > 2, "need p > 2")
        return p / (p - 2)
    if setting == "metivier-lq":
        _require(p > 2, "need p > 2")
        return 2 * (p - 1) / (p - 2)
    if setting in ("grushin-lq", "grushin-l2"):
        g = rational(gamma)
        _require(g > 0, "need gamma > 0")
        _require(p > g + 1, "need p > gamma + 1")
        if setting == "grushin-lq":
            return (g + 1) * (p - 1) / (p - g - 1)
        return p * (g + 1) / (2 * (p - g - 1))
    if setting == "hg-lq":
        z = rational(zeta)
        _require(z >= 1 and p > 2 * z, "need p > 2 zeta >= 2")
        return 2 * z * (p - 1) / (p - 2 * z)
    raise ValueError(f"unknown setting {setting!r}")


@dataclass
class Certificate:
    setting: str
    p: sympy.Expr
    q: sympy.Expr
    eps: sympy.Expr
    R_exponent: sympy.Expr  # R = eps^(-R_exponent)
    R: sympy.Expr
    delta: sympy.Expr
    sigma: sympy.Expr
    beta_form: str
    route: str

    def as_dict(self):
        return {
            "setting": self.setting,
            "p": str(self.p),
            "q": str(self.q),
            "eps": str(self.eps),
            "R": str(self.R),
            "R_float": float(self.R),
            "R_exponent": str(self.R_exponent),
            "delta": str(self.delta),
            "delta_float": float(self.delta),
            "sigma": str(self.sigma),
            "beta_form": self.beta_form,
            "route": self.route,
        }


def certificate(frame: FrameSpec, p, q, eps) -> Certificate:
    """Radius R, ball parameter delta and exponent sigma of the proof chain, in exact arithmetic."""
    p, q, eps = rational(p), rational(q), rational(eps)
    _require(eps > 0, "eps must be positive")
    _require(1 < q <= 2, "q must lie in (1, 2]")
    l2 = q == 2
    if not l2:
        _require(q == p / (p - 1), "q must be 2 or p/(p-1)")
    setting = _setting(frame, q, p)
    if frame.kind is Kind.METIVIER:
        _require(p > 2, "need p > 2")
        if l2:
            rexp, grad_pow, route = 1 / (p - 2), 2 * (p - 1), "L2"
        else:
            rexp, grad_pow, route = 2 / (p - q), p, "Lq Holder"
        sigma = exponent_table(setting, p)
    else:
        ge = rational(frame.gamma) if frame.kind is Kind.GRUSHIN else 2 * rational(frame.zeta) - 1
        if frame.kind is Kind.GRUSHIN:
            sigma = exponent_table(setting, p, gamma=ge)
        else:
            _require(not l2, "the Heisenberg-Greiner setting is stated for q = p/(p-1)")
            sigma = exponent_table(setting, p, zeta=rational(frame.zeta))
        _require(p > ge + 1, "need p > gamma + 1")
        if l2:
            rexp, grad_pow, route = (ge + 1) / (2 * (p - ge - 1)), 2 * (p - 1), "L2"
        else:
            rexp, grad_pow, route = (ge + 1) / (p - ge * q), p, "Lq"
    R = sympy.nsimplify(eps ** (-rexp))
    # delta R^(grad_pow) = eps: the ball term's gradient factor stays O(eps)
    delta = sympy.nsimplify(eps ** (1 + rexp * grad_pow))
    return Certificate(setting, p, q, eps, rexp, R, delta, sympy.nsimplify(sigma),
                       f"exp(C*eps**(-({sigma})))", route)


def certificate_consistency(p):
    """Exact identities: sigma_q q/2 = sigma_2, and the gamma = 1 / zeta = 1 reductions."""
    p = rational(p)
    q = p / (p - 1)
    s2 = exponent_table("metivier-l2", p)
    sq = exponent_table("metivier-lq", p)
    return {
        "sigma_q*q/2 == sigma_2": sympy.simplify(sq * q / 2 - s2) == 0,
        "grushin gamma=1 L2 == metivier L2": sympy.simplify(
            exponent_table("grushin-l2", p, gamma=1) - s2) == 0,
        "grushin gamma=1 Lq == metivier Lq": sympy.simplify(
            exponent_table("grushin-lq", p, gamma=1) - sq) == 0,
        "hg zeta=1 == metivier Lq": sympy.simplify(exponent_table("hg-lq", p, zeta=1) - sq) == 0,
    }


# ---------------------------------------------------------------------------
# decomposition check of the proof chain


@dataclass
class DecompositionRow:
    member_id: str
    ball: float
    ball_bound: float
    outer: float
    outer_bound: float
    x_outer: float
    x_outer_bound: float

    @staticmethod
    def _m(bound, value):
        return (bound - value) / value if value > 0 else math.inf

    @property
    def margins(self):
        return {
            "ball": self._m(self.ball_bound, self.ball),
            "outer": self._m(self.outer_bound, self.outer),
            "x_outer": self._m(self.x_outer_bound, self.x_outer),
        }


def decomposition_check(cert: Certificate, family: TestFamily, measure: MeasureSpec, hardy_C, ubound,
                        lebesgue_C, rtol=1e-4, max_evals=2_000_000):
    """Evaluate the links of the proof chain on each member.

    ball: int_{B_R} |f|^q dmu against delta int_{B_R} |grad(f e^(-U/q))|^q dxi / Z
    + C_leb (1 + delta^(-Q/q)) (int_{B_R} |f e^(-U/q)|^(q/2) dxi)^2 / Z.
    outer: int_{B_R^c} |f|^q dmu against the Hardy bound C_h (eps G + X / eps).
    x_outer: int_{B_R^c} |x|^q |f|^q dmu against R^-b (A G + B F), from the
    U-bound with eta = |x|^a N^b.
    """
    frame, p = measure.frame, measure.p
    q, eps = float(cert.q), float(cert.eps)
    R, delta = float(cert.R), float(cert.delta)
    if frame.kind is not Kind.METIVIER:
        raise KindMismatch("the decomposition check follows the Metivier proof chain")
    _, b = eta_parameters(frame, p, q)
    Uf = potential_field(frame, p)
    defect = 1.0 + delta ** (-frame.Qdim / q)
    Z = measure.Z.value
    rows = []
    for m in family:
        dom = measure.box if m.support is None else m.support.intersect(measure.box)

        def integrand(pts, m=m):
            A = coefficient_matrix(frame, pts)
            f = m.value(pts)
            sg = np.einsum("...ij,...j->...i", A, m.grad(pts))
            N = kaplan_norm(frame, pts)
            U = N**p
            gU = np.einsum("...ij,...j->...i", A, Uf.grad(pts))
            inside = (N < R).astype(float)
            af = np.abs(f)
            e = np.exp(-U)
            g_tilde = np.exp(-U / q)[:, None] * (sg - (f / q)[:, None] * gU)
            xq = horizontal_norm(frame, pts) ** q * af**q * e
            return np.stack([
                af**q * e * inside,
                af**q * e * (1.0 - inside),
                np.sum(sg * sg, axis=-1) ** (q / 2.0) * e,
                np.sum(g_tilde * g_tilde, axis=-1) ** (q / 2.0) * inside,
                (af * np.exp(-U / q)) ** (q / 2.0) * inside,
                xq,
                xq * (1.0 - inside),
            ], axis=-1)

        # the ball indicator is discontinuous, so the budget rather than rtol usually stops this
        est = integrate_box(integrand, dom, tol=1e-14, rtol=rtol, max_evals=max_evals)
        ball, outer, G, Gt, Mb, X, Xo = np.asarray(est.value) / Z
        F = ball + outer
        rows.append(DecompositionRow(
            m.id, float(ball), float(delta * Gt + lebesgue_C * defect * Mb * Mb * Z),
            float(outer), float(hardy_C * (eps * G + X / eps)),
            float(Xo), float(R ** (-b) * (ubound["A"] * G + ubound["B"] * F)),
        ))
    return rows


__all__ = [name for name in dir() if not name.startswith("_")]
