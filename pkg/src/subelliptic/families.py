"""Fixed, versioned test-function families with analytic euclidean gradients.

Every member is bounded with bounded gradient.  Compactly supported members
carry their support box, which is where their integrals are computed.  Axis
tubes are not compact; their box ends where the weighted member drops below
exp(-45) relative to its floor.  The
``log_floor`` of a member is a lower bound for the potential N^p on its
support.  Integrals are accumulated against exp(-(U - log_floor)) so that
members living far out in the tail do not underflow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import BadDimension
from .frames import FrameSpec, GroupPoint, ScalarField, norm_field
from .integrate import Domain

FAMILY_VERSION = 1
FAMILY_IDS = ("RadialBumps", "ShellBumps", "AxisConcentrated", "GaussHermite", "Constants", "Mixed")


def bump(s):
    """exp(-1/(1-s)) for s < 1, else 0; C-infinity in s."""
    s = np.asarray(s, dtype=float)
    inside = s < 1.0
    out = np.zeros_like(s)
    out[inside] = np.exp(-1.0 / (1.0 - s[inside]))
    return out


def bump_ds(s):
    s = np.asarray(s, dtype=float)
    inside = s < 1.0
    out = np.zeros_like(s)
    t = 1.0 - s[inside]
    out[inside] = -np.exp(-1.0 / t) / (t * t)
    return out


@dataclass(eq=False)
class Member:
    id: str
    value: Callable
    grad: Callable
    support: Optional[Domain] = None
    log_floor: float = 0.0
    gauge_floor: Optional[float] = None
    # members depending only on (|x|, |z|) carry (r_lo, r_hi, rho_lo, rho_hi) bounds; None if not
    radial_box: Optional[tuple] = None
    # interior (|x|, |z|) breakpoints where the member has a thin transition layer
    radial_breaks: tuple = ((), ())
    biradial: bool = False
    params: dict = field(default_factory=dict)

    def field(self) -> ScalarField:
        return ScalarField(self.value, self.grad, mode="analytic")

    @property
    def compact(self) -> bool:
        return self.support is not None


def sweep_split(n):
    """Training positions of an n-point sweep: alternate positions plus both endpoints."""
    pick = set(range(0, n, 2))
    if n % 2 == 0 and n >= 4:
        pick.discard(n - 2)
    if n % 2 == 0:
        pick.add(n - 1)
    return pick


@dataclass(eq=False)
class TestFamily:
    id: str
    frame: FrameSpec
    members: list
    version: int = FAMILY_VERSION

    __test__ = False  # not a pytest class

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def ids(self):
        return [m.id for m in self.members]

    def subset(self, idx, suffix=""):
        return TestFamily(self.id + suffix, self.frame, [self.members[i] for i in idx], self.version)

    def split(self):
        """Deterministic train/test halves.

        Members are grouped by their ``group`` tag (one-parameter sweeps).  Within
        a group positions alternate, and both endpoints of the sweep go to
        train, so every test member lies between two training neighbours.
        """
        groups = {}
        for i, m in enumerate(self.members):
            groups.setdefault(m.params.get("group", m.id), []).append(i)
        train, test = [], []
        for idx in groups.values():
            pick = sweep_split(len(idx))
            for j, i in enumerate(idx):
                (train if j in pick else test).append(i)
        return self.subset(sorted(train), ":train"), self.subset(sorted(test), ":test")

    def extend(self, other: "TestFamily"):
        return TestFamily(f"{self.id}+{other.id}", self.frame, self.members + other.members, self.version)


def _vertical_scale(frame: FrameSpec, w):
    """Vertical half-width matching a horizontal width w under the dilations."""
    return w**frame.vertical_degree / math.sqrt(frame.gauge_kappa)


def _u_floor(frame: FrameSpec, lo, hi):
    """A lower bound of the gauge on a box (nearest point to the origin)."""
    near = np.where((lo <= 0) & (hi >= 0), 0.0, np.where(np.abs(lo) < np.abs(hi), lo, hi))
    g = GroupPoint.split(frame, near)
    a = frame.gauge_power
    r = float(np.linalg.norm(g.x))
    return (r**a + frame.gauge_kappa * float(g.z @ g.z)) ** (1.0 / a)


def _with_floor(frame, member, p):
    if member.support is not None and p > 0:
        g = member.gauge_floor
        if g is None:
            g = _u_floor(frame, member.support.lo, member.support.hi)
        member.log_floor = g**p
    return member


# ---------------------------------------------------------------------------
# member builders


def anisotropic_bump(frame: FrameSpec, center, w, mid=""):
    """bump(|x - c_x|^2/w^2 + kappa |z - c_z|^2 / w^(2 deg)) with its box."""
    center = np.asarray(center, dtype=float)
    if center.shape != (frame.D,):
        raise BadDimension(f"center must have {frame.D} coordinates")
    h = frame.horizontal_dim
    sv = _vertical_scale(frame, w)
    scales = np.concatenate([np.full(h, w), np.full(frame.D - h, sv)])

    def s_of(xi):
        d = (np.asarray(xi, dtype=float) - center) / scales
        return np.sum(d * d, axis=-1), d

    def value(xi):
        return bump(s_of(xi)[0])

    def grad(xi):
        s, d = s_of(xi)
        return (bump_ds(s))[..., None] * 2.0 * d / scales

    box = Domain(center - scales, center + scales)
    cid = mid or "bump(" + ",".join(f"{c:.3g}" for c in center) + f";w={w:.3g})"
    return Member(cid, value, grad, box, params={"center": center.tolist(), "w": w})


def gauge_bump(frame: FrameSpec, w):
    """bump((N/w)^a): a radial bump in the gauge, smooth because N^a is."""
    a = frame.gauge_power
    Nf = norm_field(frame)

    def value(xi):
        return bump((Nf(xi) / w) ** a)

    def grad(xi):
        # through u = N^a, which is smooth at the origin
        g = GroupPoint.split(frame, xi)
        r = np.linalg.norm(g.x, axis=-1)
        u = r**a + frame.gauge_kappa * np.sum(g.z * g.z, axis=-1)
        du = np.concatenate([(a * r ** (a - 2.0))[..., None] * g.x, 2.0 * frame.gauge_kappa * g.z], axis=-1)
        return (bump_ds(u / w**a) / w**a)[..., None] * du

    sv = _vertical_scale(frame, w)
    h = frame.horizontal_dim
    half = np.concatenate([np.full(h, w), np.full(frame.D - h, sv)])
    return Member(f"radial(w={w:.3g})", value, grad, Domain(-half, half), biradial=True,
                  radial_box=(0.0, w, 0.0, sv), params={"w": w})


def shell_bump(frame: FrameSpec, r0, w):
    """bump(((N - r0)/w)^2), supported on the gauge annulus r0 - w < N < r0 + w."""
    if not r0 > w:
        raise ValueError("shell radius must exceed its width")
    Nf = norm_field(frame)

    def value(xi):
        return bump(((Nf(xi) - r0) / w) ** 2)

    def grad(xi):
        N = Nf(xi)
        d = (N - r0) / w
        c = bump_ds(d * d) * 2.0 * d / w
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where((c != 0.0)[..., None], c[..., None] * Nf.grad(xi), 0.0)

    R = r0 + w
    h = frame.horizontal_dim
    sv = _vertical_scale(frame, R)
    half = np.concatenate([np.full(h, R), np.full(frame.D - h, sv)])
    return Member(f"shell(r0={r0:.3g};w={w:.3g})", value, grad, Domain(-half, half),
                  gauge_floor=r0 - w, biradial=True, radial_box=(0.0, R, 0.0, sv),
                  params={"r0": r0, "w": w})


def axis_tube(frame: FrameSpec, w, c, ell=None, p=0.0):
    """A tube around the vertical axis: a radial cap in |x| times a one-sided step in |z|.

    f = (1 - |x|^2/w^2)^2 * s((|z| - c)/ell) with s(u) = u^2 (3 - 2u) clamped to
    [0, 1]. f is supported in {|x| < w, |z| > c}, where the U-bound weight
    degenerates. Both profiles are C^1 with bounded gradient; the cap is within
    15% of the Dirichlet ground state of the disc. The upper side needs no cutoff:
    for p > 0 the support box is closed where exp(-(U - floor)) < exp(-45).
    ell=None makes the step end at that height, i.e. a ramp over the live range
    (ell = 1 without a measure).
    """
    a, kap = frame.gauge_power, frame.gauge_kappa
    floor = (kap * c * c) ** (1.0 / a) if c > 0 else 0.0
    top = math.sqrt(((floor**p + 45.0) ** (a / p)) / kap) if p > 0 else None
    if ell is None:
        ell = top - c if top is not None else 1.0
    if not (w > 0 and c > 0 and ell > 0):
        raise ValueError("tube parameters must be positive")
    h = frame.horizontal_dim

    def profiles(xi):
        g = GroupPoint.split(frame, xi)
        r2 = np.sum(g.x * g.x, axis=-1) / (w * w)
        rz = np.sqrt(np.sum(g.z * g.z, axis=-1))
        u = np.clip((rz - c) / ell, 0.0, 1.0)
        cap = np.where(r2 < 1, (1.0 - r2) ** 2, 0.0)
        return g, r2, rz, u, cap, u * u * (3.0 - 2.0 * u)

    def value(xi):
        out = profiles(xi)
        return out[4] * out[5]

    def grad(xi):
        g, r2, rz, u, cap, step = profiles(xi)
        dcap = np.where(r2 < 1, -4.0 * (1.0 - r2) / (w * w), 0.0)  # d cap / d x = dcap * x
        with np.errstate(divide="ignore", invalid="ignore"):
            ez = np.where(rz[..., None] > 0, g.z / rz[..., None], 0.0)
        dstep = 6.0 * u * (1.0 - u) / ell
        gx = (dcap * step)[..., None] * g.x
        gz = (cap * dstep)[..., None] * ez
        return np.concatenate([gx, gz], axis=-1)

    if p > 0:
        lo = np.concatenate([np.full(h, -w), np.full(frame.D - h, -top)])
        box, rbox = Domain(lo, -lo), (0.0, w, c, top)
    else:
        box, rbox = None, (0.0, w, c, c + 50.0 * ell)
    return Member(f"tube(w={w:.3g};c={c:.3g};l={ell:.3g})", value, grad, box, gauge_floor=floor,
                  biradial=True, radial_box=rbox, radial_breaks=((), (c + ell,)),
                  params={"w": w, "c": c, "ell": ell})


def _hermite(k, t):
    """Probabilists' Hermite polynomial He_k and its derivative."""
    He = np.polynomial.hermite_e
    coef = np.zeros(k + 1)
    coef[k] = 1.0
    return He.hermeval(t, coef), He.hermeval(t, He.hermeder(coef))


def gauss_hermite(frame: FrameSpec, sigma, kx, kz):
    """He_kx(x_1/sigma) He_kz(z_1/sv) exp(-s/2) with s the anisotropic radius."""
    h = frame.horizontal_dim
    sv = _vertical_scale(frame, sigma)
    scales = np.concatenate([np.full(h, sigma), np.full(frame.D - h, sv)])

    def parts(xi):
        d = np.asarray(xi, dtype=float) / scales
        e = np.exp(-0.5 * np.sum(d * d, axis=-1))
        px, dpx = _hermite(kx, d[..., 0])
        pz, dpz = _hermite(kz, d[..., h])
        return d, e, px, dpx, pz, dpz

    def value(xi):
        _, e, px, _, pz, _ = parts(xi)
        return px * pz * e

    def grad(xi):
        d, e, px, dpx, pz, dpz = parts(xi)
        poly = px * pz
        g = -(poly * e)[..., None] * d / scales
        g[..., 0] += dpx * pz * e / sigma
        g[..., h] += px * dpz * e / sv
        return g

    return Member(f"hermite(s={sigma:.3g};{kx},{kz})", value, grad, None, biradial=(kx == 0 and kz == 0),
                  params={"sigma": sigma, "kx": kx, "kz": kz})


def constant(frame: FrameSpec, c):
    def value(xi):
        return np.full(np.shape(xi)[:-1], float(c))

    def grad(xi):
        return np.zeros(np.shape(xi))

    return Member(f"const({c:.3g})", value, grad, None, biradial=True, params={"c": c})


# ---------------------------------------------------------------------------
# families


def _jitter(seed, k, scale):
    return np.random.default_rng(seed).uniform(-scale, scale, size=k)


def _tag(members, group):
    for m in members:
        m.params["group"] = group
    return members


def radial_bumps(frame: FrameSpec, p=0.0, size=24, seed=1):
    """Gauge-radial bumps of growing width, then off-centre bumps moving outwards."""
    k = size // 2
    members = _tag([gauge_bump(frame, float(w)) for w in np.geomspace(0.35, 1.8, k)], "radial")
    u = np.random.default_rng(seed).normal(size=frame.D)
    u /= np.linalg.norm(u)
    off = [anisotropic_bump(frame, t * u, 0.45, mid=f"offbump(t={t:.3g};w=0.45)")
           for t in np.linspace(0.2, 1.6, size - k)]
    members += _tag(off, "offcentre")
    return TestFamily("RadialBumps", frame, [_with_floor(frame, m, p) for m in members])


def shell_bumps(frame: FrameSpec, p=0.0, size=24, seed=2):
    """Gauge shells: for each of three widths, radii sweeping outwards."""
    per = size // 3
    members = []
    for j, w in enumerate((0.15, 0.275, 0.4)):
        r0s = np.linspace(0.5, 1.9, per) + _jitter(seed + j, per, 0.02)
        members += _tag([shell_bump(frame, float(r), float(min(w, 0.9 * r))) for r in r0s], f"shell:{w}")
    return TestFamily("ShellBumps", frame, [_with_floor(frame, m, p) for m in members])


def axis_concentrated(frame: FrameSpec, p=0.0, widths=None, heights=None, ell=None):
    """Ramp tubes around the vertical axis: for each width, a sweep over heights.

    Along the axis the measure of {|z| > c} decays like exp(-kappa^(p/a) c^(2p/a))
    while the horizontal gradient of a function of |z| is damped by |x|, so
    tall thin tubes have a large L^2/L^1 ratio at moderate Dirichlet energy.
    """
    widths = np.geomspace(0.3, 2.4, 9) if widths is None else np.asarray(widths, float)
    heights = np.geomspace(0.01, 3.0, 20) if heights is None else np.asarray(heights, float)
    members = []
    for w in widths:
        group = [axis_tube(frame, float(w), float(c), ell, p=p) for c in heights]
        members += _tag(group, f"tube:{w:.3g}")
    return TestFamily("AxisConcentrated", frame, [_with_floor(frame, m, p) for m in members])


def gauss_hermite_family(frame: FrameSpec, p=0.0, size=12):
    """Hermite-Gaussian products: for each degree pattern, widths sweeping upwards."""
    sig = (0.5, 0.7, 0.95, 1.3)
    members = []
    for kx, kz in ((0, 0), (1, 0), (2, 1)):
        members += _tag([gauss_hermite(frame, s, kx, kz) for s in sig], f"hermite:{kx}{kz}")
    return TestFamily("GaussHermite", frame, members[:size])


def constants_family(frame: FrameSpec, p=0.0, values=(1.0, 0.5, 2.0)):
    return TestFamily("Constants", frame, [constant(frame, v) for v in values])


def mixed_family(frame: FrameSpec, p=0.0, size=48, seed=7):
    """Union of every non-constant family, 12 members each."""
    members = (
        radial_bumps(frame, p, size=12, seed=seed).members
        + shell_bumps(frame, p, size=12, seed=seed + 1).members
        + axis_concentrated(frame, p, widths=(0.3, 0.6, 1.2), heights=(0.1, 0.3, 0.8, 1.5)).members
        + gauss_hermite_family(frame, p, size=12).members
    )
    return TestFamily("Mixed", frame, members[:size])


def make_family(name: str, frame: FrameSpec, p=0.0, **kw) -> TestFamily:
    builders = {
        "radialbumps": radial_bumps,
        "shellbumps": shell_bumps,
        "axisconcentrated": axis_concentrated,
        "gausshermite": gauss_hermite_family,
        "constants": constants_family,
        "mixed": mixed_family,
    }
    key = name.replace("_", "").replace("-", "").lower()
    if key not in builders:
        raise ValueError(f"unknown family {name!r}; expected one of {FAMILY_IDS}")
    return builders[key](frame, p, **kw)
