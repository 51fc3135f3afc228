"""Integration against Lebesgue measure and against mu = exp(-N^p) dxi / Z.

Quadrature is a tensor Gauss-Kronrod (7, 15) rule on boxes with adaptive
dyadic bisection; ambient dimensions above 3 go through plain Monte Carlo
(normalisation) and a seeded random-walk Metropolis sampler (expectations).
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import BudgetExhausted, NonConvergence, UnusableSamples
from .frames import FrameSpec, kaplan_norm

log = logging.getLogger(__name__)

# Gauss-Kronrod 15-point nodes (positive half) and weights; the Gauss 7-point
# rule uses the odd-indexed nodes.
_XGK = np.array([
    0.991455371120812639206854697526329, 0.949107912342758524526189684047851,
    0.864864423359769072789712788640926, 0.741531185599394439863864773280788,
    0.586087235467691130294144845693013, 0.405845151377397166906606412076961,
    0.207784955007898467600689403773245, 0.000000000000000000000000000000000,
])
_WGK = np.array([
    0.022935322010529224963732008058970, 0.063092092629978553290700663189204,
    0.104790010322250183839876322541518, 0.140653259715525918745189590510238,
    0.169004726639267902826583426598550, 0.190350578064785409913256402421014,
    0.204432940075298892414161999234649, 0.209482141084727828012999174891714,
])
_WG = np.array([
    0.129484966168869693270611432679082, 0.279705391489276667901467771423780,
    0.381830050505118944950369775488975, 0.417959183673469387755102040816327,
])

NODES = np.concatenate([-_XGK[:-1], _XGK[::-1]])
W_KRONROD = np.concatenate([_WGK[:-1], _WGK[::-1]])
W_GAUSS = np.zeros(15)
W_GAUSS[[1, 3, 5, 7, 9, 11, 13]] = np.concatenate([_WG[:-1], _WG[::-1]])

MAX_QUAD_DIM = 3
TAIL_FRACTION = 1e-8


@dataclass(frozen=True)
class Domain:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("lo and hi must be vectors of equal length")
        if not np.all(lo < hi):
            raise ValueError("Domain needs lo < hi componentwise")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def D(self):
        return len(self.lo)

    @property
    def volume(self):
        return float(np.prod(self.hi - self.lo))

    def contains(self, pts):
        return np.all((pts >= self.lo) & (pts <= self.hi), axis=-1)

    def intersect(self, other: "Domain") -> Optional["Domain"]:
        lo = np.maximum(self.lo, other.lo)
        hi = np.minimum(self.hi, other.hi)
        return Domain(lo, hi) if np.all(lo < hi) else None


@dataclass
class IntegralEstimate:
    value: object
    error: object
    method: str
    evals: int
    converged: bool = True

    def __post_init__(self):
        if np.any(np.asarray(self.error) < 0):
            raise ValueError("error must be nonnegative")

    def component(self, k) -> "IntegralEstimate":
        return IntegralEstimate(
            float(np.asarray(self.value)[k]), float(np.asarray(self.error)[k]),
            self.method, self.evals, self.converged,
        )

    def as_dict(self):
        return {
            "value": np.asarray(self.value).tolist(),
            "error": np.asarray(self.error).tolist(),
            "method": self.method,
            "evals": self.evals,
            "converged": self.converged,
        }


def _cell_points(lo, hi):
    """Tensor GK15 nodes for a batch of cells: (C, 15**D, D) and half widths."""
    C, D = lo.shape
    half = 0.5 * (hi - lo)
    mid = 0.5 * (hi + lo)
    grids = np.meshgrid(*([NODES] * D), indexing="ij")
    ref = np.stack([g.ravel() for g in grids], axis=-1)
    return mid[:, None, :] + half[:, None, :] * ref[None, :, :], half


def _cell_rules(vals, half, D):
    """Kronrod value, Gauss value and per-axis indicators for each cell.

    vals has shape (C, 15**D, K).
    """
    C, _, K = vals.shape
    v = vals.reshape((C,) + (15,) * D + (K,))
    vol = np.prod(half, axis=1)[:, None]

    def contract(weights):
        out = v
        for w in weights:
            out = np.tensordot(out, w, axes=([1], [0]))
        return out

    kron = contract([W_KRONROD] * D) * vol
    gauss = contract([W_GAUSS] * D) * vol
    axis_err = np.empty((C, D, K))
    for d in range(D):
        ws = [W_KRONROD] * D
        ws[d] = W_GAUSS
        axis_err[:, d] = np.abs(kron - contract(ws) * vol)
    return kron, np.abs(kron - gauss), axis_err


def _as_2d(vals, n):
    vals = np.asarray(vals, dtype=float)
    if vals.ndim == 1:
        return vals[:, None], True
    return vals.reshape(n, -1), False


def integrate_box(
    f,
    domain: Domain,
    tol=1e-8,
    rtol=0.0,
    max_evals=20_000_000,
    workers=1,
    strict=False,
):
    """Adaptive tensor GK(7,15) quadrature of ``f`` over ``domain``.

    ``f`` maps an (P, D) array to (P,) or (P, K).  Refinement stops once every
    component satisfies ``error <= max(tol, rtol * |value|)``.  When the
    evaluation budget runs out the best estimate is returned with
    ``converged=False`` (or :class:`BudgetExhausted` is raised if ``strict``).
    The reported (value, error) pair is the one with the smallest error seen
    along the refinement path, so tightening ``tol`` never increases it.
    """
    D = domain.D
    if D > MAX_QUAD_DIM:
        raise ValueError(f"adaptive quadrature supports D <= {MAX_QUAD_DIM}, got {D}")
    per_cell = 15**D
    executor = ThreadPoolExecutor(workers) if workers > 1 else None

    def evaluate(lo, hi):
        pts, half = _cell_points(lo, hi)
        flat = pts.reshape(-1, D)
        if executor is None:
            raw = f(flat)
        else:
            chunks = np.array_split(flat, workers)
            raw = np.concatenate([np.asarray(r, dtype=float) for r in executor.map(f, chunks)])
        vals, scalar = _as_2d(raw, len(flat))
        return _cell_rules(vals.reshape(len(lo), per_cell, -1), half, D), scalar

    try:
        (kv, ke, ae), scalar = evaluate(domain.lo[None], domain.hi[None])
        lo, hi = domain.lo[None].copy(), domain.hi[None].copy()
        evals = per_cell
        best = None
        while True:
            total = np.sum(kv, axis=0)
            err = np.sum(ke, axis=0)
            thr = np.maximum(tol, rtol * np.abs(total))
            score = float(np.max(err / thr))
            if best is None or score <= best[2]:
                best = (total, err, score)
            if score <= 1.0:
                converged = True
                break
            if evals + 2 * per_cell > max_evals:
                converged = False
                break
            badness = np.max(ke / thr, axis=1)
            ncell = len(kv)
            batch = int(min(ncell, max(1, ncell // 8), (max_evals - evals) // (2 * per_cell), 256))
            pick = np.sort(np.argsort(-badness, kind="stable")[:batch])
            axis = np.argmax(np.max(ae[pick] / thr, axis=2), axis=1)
            plo, phi = lo[pick], hi[pick]
            mid = 0.5 * (plo[np.arange(batch), axis] + phi[np.arange(batch), axis])
            lo_a, hi_a = plo.copy(), phi.copy()
            hi_a[np.arange(batch), axis] = mid
            lo_b, hi_b = plo.copy(), phi.copy()
            lo_b[np.arange(batch), axis] = mid
            clo = np.concatenate([lo_a, lo_b])
            chi = np.concatenate([hi_a, hi_b])
            (ckv, cke, cae), _ = evaluate(clo, chi)
            evals += len(clo) * per_cell
            keep = np.ones(ncell, dtype=bool)
            keep[pick] = False
            lo = np.concatenate([lo[keep], clo])
            hi = np.concatenate([hi[keep], chi])
            kv = np.concatenate([kv[keep], ckv])
            ke = np.concatenate([ke[keep], cke])
            ae = np.concatenate([ae[keep], cae])
    finally:
        if executor is not None:
            executor.shutdown()

    total, err, _ = best
    if scalar:
        total, err = float(total[0]), float(err[0])
    est = IntegralEstimate(total, err, "AdaptiveQuad", evals, converged)
    if not converged:
        if strict:
            raise BudgetExhausted(f"quadrature budget exhausted (error {np.max(err):.3e})", est)
        log.warning("quadrature budget exhausted; returning best estimate (error %s)", err)
    return est


def integrate_mc(f, domain: Domain, n=1_000_000, seed=0, batch=200_000):
    """Plain uniform Monte Carlo over a box; the error is one standard error."""
    rng = np.random.default_rng(seed)
    sums, sqs = [], []
    done = 0
    scalar = True
    while done < n:
        k = min(batch, n - done)
        pts = domain.lo + (domain.hi - domain.lo) * rng.random((k, domain.D))
        vals, scalar = _as_2d(f(pts), k)
        sums.append(np.sum(vals, axis=0))
        sqs.append(np.sum(vals * vals, axis=0))
        done += k
    mean = np.sum(sums, axis=0) / n
    var = np.maximum(np.sum(sqs, axis=0) / n - mean * mean, 0.0)
    value = mean * domain.volume
    error = np.sqrt(var / n) * domain.volume
    if scalar:
        value, error = float(value[0]), float(error[0])
    return IntegralEstimate(value, error, "MonteCarlo", n)


# ---------------------------------------------------------------------------
# measures


def truncation_radius(frame: FrameSpec, p) -> float:
    """Gauge radius beyond which the density is dropped.

    Large enough that exp(-R^p) < 1e-16 and that the tail bound
    exp(-R^p / 2) * 2^(Q/p) stays below 1e-8 (relative to Z).
    """
    need = max(16.0 * math.log(10.0), 2.0 * (math.log(1.0 / TAIL_FRACTION) + frame.Qdim / p * math.log(2.0)))
    return (need * (1.0 + 1e-9)) ** (1.0 / p)


def gauge_box(frame: FrameSpec, R) -> Domain:
    """Coordinate box containing the gauge ball {N <= R}."""
    hv = R ** frame.vertical_degree / math.sqrt(frame.gauge_kappa)
    half = np.concatenate([np.full(frame.horizontal_dim, R), np.full(frame.vertical_dim, hv)])
    return Domain(-half, half)


def tail_bound(frame: FrameSpec, p, R) -> float:
    """Upper bound for (mass of {N > R}) / Z from exp(-N^p) <= exp(-R^p/2) exp(-N^p/2)."""
    return math.exp(-(R**p) / 2.0) * 2.0 ** (frame.Qdim / p)


@dataclass
class SampleSet:
    points: np.ndarray
    seed: int
    n_chains: int
    acceptance: float
    ess: np.ndarray
    rhat: float
    weights: Optional[np.ndarray] = None
    thin: int = 1
    proposal_scale: float = float("nan")

    @property
    def usable(self) -> bool:
        return 0.0 < self.acceptance < 1.0 and float(np.min(self.ess)) >= 100 and self.rhat <= 1.05

    def by_chain(self, values):
        """Reshape per-point values (P, ...) to (chains, steps, ...)."""
        values = np.asarray(values)
        steps = len(values) // self.n_chains
        return np.swapaxes(values[: steps * self.n_chains].reshape((steps, self.n_chains) + values.shape[1:]), 0, 1)

    def diagnostics(self):
        return {
            "acceptance": self.acceptance,
            "ess": [float(e) for e in self.ess],
            "rhat": self.rhat,
            "n_chains": self.n_chains,
            "thin": self.thin,
            "proposal_scale": self.proposal_scale,
        }


@dataclass
class MeasureSpec:
    frame: FrameSpec
    p: float
    Z: IntegralEstimate
    box: Domain
    R_box: float
    samples: Optional[SampleSet] = field(default=None, repr=False)

    def __post_init__(self):
        if not self.Z.value > 0:
            raise ValueError("normalisation must be positive")

    def density(self, pts):
        return np.exp(-kaplan_norm(self.frame, pts) ** self.p)

    def tail_ok(self) -> bool:
        return tail_bound(self.frame, self.p, self.R_box) < TAIL_FRACTION

    @property
    def use_quadrature(self) -> bool:
        return self.frame.D <= MAX_QUAD_DIM


def normalization_Z(frame: FrameSpec, p, tol=None, rtol=1e-9, mc_points=2_000_000, seed=0, box_scale=1.0,
                    method="quad"):
    """Z = integral of exp(-N^p) over the truncation box.

    D <= 3 uses box quadrature.  Larger frames use a two-dimensional polar
    reduction (``method="quad"``) or plain Monte Carlo over the box (``"mc"``).
    """
    R = truncation_radius(frame, p) * box_scale
    box = gauge_box(frame, R)

    def integrand(pts):
        return np.exp(-kaplan_norm(frame, pts) ** p)

    if frame.D <= MAX_QUAD_DIM:
        Z = integrate_box(integrand, box, tol=tol or 0.0, rtol=rtol, strict=True)
    elif method == "mc":
        Z = integrate_mc(integrand, box, n=mc_points, seed=seed)
    else:
        Z = _radial_Z(frame, p, R, rtol)
    return Z, box, R


def sphere_area(k):
    """Surface area of the unit sphere in R^k."""
    return 2.0 * math.pi ** (k / 2.0) / math.gamma(k / 2.0)


def _radial_Z(frame: FrameSpec, p, R, rtol):
    """Z through polar coordinates in the x and v blocks (the gauge only sees |x|, |v|)."""
    h, v = frame.horizontal_dim, frame.vertical_dim
    a, kap = frame.gauge_power, frame.gauge_kappa
    rho_max = R ** frame.vertical_degree / math.sqrt(kap)

    def integrand(pts):
        r, rho = pts[:, 0], pts[:, 1]
        N = (r**a + kap * rho * rho) ** (1.0 / a)
        return r ** (h - 1) * rho ** (v - 1) * np.exp(-(N**p))

    est = integrate_box(integrand, Domain([0.0, 0.0], [R, rho_max]), rtol=rtol, strict=True)
    c = sphere_area(h) * sphere_area(v)
    return IntegralEstimate(est.value * c, est.error * c, "AdaptiveQuad", est.evals)


def build_measure(frame: FrameSpec, p, rtol=1e-9, seed=0, mc_points=2_000_000) -> MeasureSpec:
    Z, box, R = normalization_Z(frame, p, rtol=rtol, seed=seed, mc_points=mc_points)
    return MeasureSpec(frame, float(p), Z, box, R)


def lebesgue_measure(frame: FrameSpec, box: Domain) -> MeasureSpec:
    """Lebesgue measure on a box, in the same container (p = 0, Z = 1)."""
    return MeasureSpec(frame, 0.0, IntegralEstimate(1.0, 0.0, "AdaptiveQuad", 1), box, float("inf"))


# ---------------------------------------------------------------------------
# MCMC


def autocorr_ess(chains: np.ndarray) -> float:
    """Effective sample size of a (C, T) array, Geyer initial monotone sequence."""
    chains = np.asarray(chains, dtype=float)
    C, T = chains.shape
    if T < 4:
        return float(C * T)
    x = chains - chains.mean(axis=1, keepdims=True)
    nfft = 1 << (2 * T - 1).bit_length()
    fx = np.fft.rfft(x, nfft, axis=1)
    acov = np.fft.irfft(fx * np.conj(fx), nfft, axis=1)[:, :T] / T
    chain_var = acov[:, 0] * T / (T - 1)
    W = chain_var.mean()
    mean_all = chains.mean(axis=1)
    B = T * mean_all.var(ddof=1) if C > 1 else 0.0
    var_plus = W * (T - 1) / T + B / T
    if var_plus <= 0:
        return float(C * T)
    rho = 1.0 - (W - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    pair_sums = []
    prev = math.inf
    for t in range(0, T - 1, 2):
        s = rho[t] + rho[t + 1]
        if s < 0:
            break
        s = min(s, prev)
        pair_sums.append(s)
        prev = s
    tau = -1.0 + 2.0 * sum(pair_sums)
    tau = max(tau, 1.0 / math.log10(C * T + 10))
    return float(C * T / tau)


def split_rhat(chains: np.ndarray) -> float:
    chains = np.asarray(chains, dtype=float)
    C, T = chains.shape
    h = T // 2
    s = np.concatenate([chains[:, :h], chains[:, h : 2 * h]])
    n = s.shape[1]
    W = s.var(axis=1, ddof=1).mean()
    B = n * s.mean(axis=1).var(ddof=1)
    if W <= 0:
        return 1.0
    return float(math.sqrt(((n - 1) / n * W + B / n) / W))


def mcmc_sample(measure: MeasureSpec, n, seed, n_chains=32, target=0.3, max_stored=1_000_000, strict=False):
    """Random-walk Metropolis targeting exp(-N^p), vectorised over chains.

    Horizontal proposals have scale ``s``; vertical ones ``s**deg / sqrt(kappa)``
    so the proposal respects the dilations.  ``s`` is adapted during the
    discarded burn-in (first 20% of the steps) and then frozen.
    """
    if n < 10_000:
        raise ValueError("mcmc_sample needs n >= 1e4")
    frame, p = measure.frame, measure.p
    rng = np.random.default_rng(seed)
    steps = n // n_chains
    burn = steps // 5
    deg = frame.degrees
    vmask = deg != 1.0
    kap = math.sqrt(frame.gauge_kappa)

    def scales(s):
        sc = np.full(frame.D, s)
        sc[vmask] = s ** deg[vmask] / kap
        return sc

    x = rng.uniform(-0.5, 0.5, size=(n_chains, frame.D)) * scales(1.0)
    lp = -kaplan_norm(frame, x) ** p
    log_s = math.log(0.8)
    window_acc = 0
    window = 0
    post = steps - burn
    thin = max(1, math.ceil(post * n_chains / max_stored))
    kept = post // thin
    store = np.empty((kept, n_chains, frame.D))
    accepted = 0
    k = 0
    for t in range(steps):
        sc = scales(math.exp(log_s))
        prop = x + rng.standard_normal(x.shape) * sc
        lq = -kaplan_norm(frame, prop) ** p
        acc = np.log(rng.random(n_chains)) < lq - lp
        x = np.where(acc[:, None], prop, x)
        lp = np.where(acc, lq, lp)
        if t < burn:
            window_acc += int(acc.sum())
            window += n_chains
            if window >= 50 * n_chains:
                rate = window_acc / window
                log_s += 1.5 * (rate - target)
                window_acc = window = 0
        else:
            accepted += int(acc.sum())
            j = t - burn
            if j % thin == 0 and k < kept:
                store[k] = x
                k += 1
    acceptance = accepted / (post * n_chains)
    per_chain = np.swapaxes(store, 0, 1)
    ess = np.array([autocorr_ess(per_chain[:, :, d]) for d in range(frame.D)])
    rhat = max(split_rhat(per_chain[:, :, d]) for d in range(frame.D))
    ss = SampleSet(store.reshape(-1, frame.D), int(seed), n_chains, acceptance, ess, rhat,
                   thin=thin, proposal_scale=math.exp(log_s))
    if rhat > 1.05:
        msg = f"split-chain ratio {rhat:.3f} > 1.05"
        if strict:
            raise NonConvergence(msg)
        log.warning("%s; sample set flagged unusable", msg)
    return ss


# ---------------------------------------------------------------------------
# expectations


def integrate_density(fn, measure: MeasureSpec, domain: Optional[Domain] = None, tol=0.0, rtol=1e-7,
                      max_evals=20_000_000, workers=1):
    """Quadrature of (integral of fn exp(-U) dxi) / Z with first-order ratio error."""
    domain = domain or measure.box
    p = measure.p

    if p > 0:
        def integrand(pts):
            w = np.exp(-kaplan_norm(measure.frame, pts) ** p)
            v = np.asarray(fn(pts), dtype=float)
            return v * (w if v.ndim == 1 else w[:, None])
    else:
        integrand = fn

    num = integrate_box(integrand, domain, tol=tol, rtol=rtol, max_evals=max_evals, workers=workers)
    Z, eZ = measure.Z.value, measure.Z.error
    value = np.asarray(num.value) / Z
    error = np.asarray(num.error) / Z + np.abs(value) * eZ / Z
    if np.ndim(num.value) == 0:
        value, error = float(value), float(error)
    return IntegralEstimate(value, error, "AdaptiveQuad", num.evals, num.converged)


def sample_mean(fn, samples: SampleSet):
    """Self-normalised MCMC estimate with standard error from the per-component ESS."""
    if not samples.usable:
        raise UnusableSamples("sample set is flagged unusable")
    vals, scalar = _as_2d(fn(samples.points), len(samples.points))
    if samples.weights is not None:
        w = samples.weights / np.sum(samples.weights)
        mean = np.sum(vals * w[:, None], axis=0)
        ess_w = 1.0 / np.sum(w * w)
        var = np.sum(w[:, None] * (vals - mean) ** 2, axis=0)
        err = np.sqrt(var / ess_w)
    else:
        mean = np.mean(vals, axis=0)
        chains = samples.by_chain(vals)
        err = np.empty(vals.shape[1])
        for k in range(vals.shape[1]):
            e = autocorr_ess(chains[:, :, k])
            err[k] = math.sqrt(np.var(vals[:, k], ddof=1) / max(e, 1.0))
    if scalar:
        return IntegralEstimate(float(mean[0]), float(err[0]), "MCMCRatio", len(vals))
    return IntegralEstimate(mean, err, "MCMCRatio", len(vals))


def expect_mu(fn, measure: MeasureSpec, method="quad", **kw):
    """Integral of fn against mu, by quadrature ("quad") or MCMC sample mean ("mcmc")."""
    if method == "quad":
        return integrate_density(fn, measure, **kw)
    if method == "mcmc":
        if measure.samples is None:
            raise UnusableSamples("no sample set attached to the measure")
        return sample_mean(fn, measure.samples)
    raise ValueError(f"unknown method {method!r}")


def reweight(samples: SampleSet, frame: FrameSpec, p_from, p_to) -> SampleSet:
    """Importance-reweight a cached chain for a nearby exponent."""
    N = kaplan_norm(frame, samples.points)
    logw = -(N**p_to) + N**p_from
    w = np.exp(logw - logw.max())
    return SampleSet(samples.points, samples.seed, samples.n_chains, samples.acceptance,
                     samples.ess, samples.rhat, weights=w, thin=samples.thin,
                     proposal_scale=samples.proposal_scale)


# ---------------------------------------------------------------------------
# sample cache: one JSON header line, then little-endian float64, point-major


def save_samples(path, samples: SampleSet, frame: FrameSpec, p, n):
    header = {
        "frame_hash": frame.digest(),
        "p": float(p),
        "seed": samples.seed,
        "n": int(n),
        "n_points": int(len(samples.points)),
        "dim": int(frame.D),
        "diagnostics": samples.diagnostics(),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(np.ascontiguousarray(samples.points, dtype="<f8").tobytes())
    return header


def load_samples(path, frame: Optional[FrameSpec] = None):
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        raw = fh.read()
    if frame is not None and header["frame_hash"] != frame.digest():
        raise UnusableSamples("sample cache was written for a different frame")
    pts = np.frombuffer(raw, dtype="<f8").reshape(header["n_points"], header["dim"]).astype(float)
    d = header["diagnostics"]
    ss = SampleSet(pts, header["seed"], d["n_chains"], d["acceptance"], np.array(d["ess"]), d["rhat"],
                   thin=d["thin"], proposal_scale=d["proposal_scale"])
    return ss, header

