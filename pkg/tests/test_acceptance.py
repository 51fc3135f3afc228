"""The eight acceptance criteria, at their stated tolerances.

Each test prints one ``ACCEPTANCE <n> PASS|FAIL`` line with the measured numbers.
"""

import json
import math
import time

import numpy as np
import pytest
import sympy

from subelliptic import cli
from subelliptic import families as fam
from subelliptic import frames as F
from subelliptic import inequalities as Q
from subelliptic import integrate as I
from subelliptic import spectral as S

H1 = F.heisenberg()


@pytest.fixture
def verdict(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {number} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail

    return emit


def test_gauge_identities(verdict):
    t0 = time.perf_counter()
    worst = {}
    for name, frame, mode in [
        ("H1", H1, "analytic"),
        ("quaternionic", F.quaternionic(), "analytic"),
        ("grushin1", F.grushin(1, 1, 1.0), "fd"),
        ("grushin2", F.grushin(1, 1, 2.0), "fd"),
        ("hg1", F.heisenberg_greiner(1, 1.0), "fd"),
        ("hg1.5", F.heisenberg_greiner(1, 1.5), "fd"),
    ]:
        pts = F.random_points(frame, 500, seed=11, min_ratio=0.05)
        rep = F.gauge_identities(frame, pts, mode=mode)
        worst[name] = (max(rep.max_rel_dev(q) for q in rep.QUANTITIES), 1e-8 if mode == "analytic" else 1e-4)
    elapsed = time.perf_counter() - t0
    ok = all(v < tol for v, tol in worst.values()) and elapsed < 10
    detail = ", ".join(f"{k} {v:.1e}" for k, (v, _) in worst.items())
    verdict(1, ok, f"max rel dev {detail}; {elapsed:.1f} s")


def test_ibp_identity(verdict):
    t0 = time.perf_counter()
    rows = []
    for p in (3.0, 4.0):
        rows += Q.ibp_suite(I.build_measure(H1, p))
    elapsed = time.perf_counter() - t0
    max_rel = max(r["rel"] for r in rows)
    min_red = min(r["reduction"] for r in rows)
    ok = len(rows) == 12 and max_rel < 1e-3 and min_red >= 4 and elapsed < 120
    verdict(2, ok, f"{len(rows)} cases, max residual/scale {max_rel:.1e}, min reduction {min_red:.1f}x; "
                   f"{elapsed:.0f} s")


def test_ubound_fits(verdict):
    t0 = time.perf_counter()
    cases = [(H1, p, q) for p in (3.0, 4.0) for q in (2.0, p / (p - 1.0))]
    grushin = F.grushin(1, 1, 1.0)
    cases += [(grushin, 4.0, 2.0), (grushin, 4.0, 4.0 / 3.0)]
    results = []
    for frame, p, q in cases:
        mu = I.build_measure(frame, p)
        family = fam.make_family("Mixed", frame, p)
        train, test = family.split()
        rep = Q.check_inequality(Q.ubound_spec(frame, p, q), family, mu)
        finite = all(math.isfinite(v) for v in rep.constants.values())
        disjoint = len(train) == len(test) == 24 and not set(train.ids()) & set(test.ids())
        results.append((frame.kind.value, p, q, rep.verdict, rep.worst_margin, finite and disjoint))
    elapsed = time.perf_counter() - t0
    ok = all(r[5] and r[3] in ("Holds", "HoldsWithinError") for r in results) and elapsed < 600
    detail = "; ".join(f"{k} p={p:g} q={q:.3g} {v} margin {m:.3f}" for k, p, q, v, m, _ in results)
    verdict(3, ok, f"{detail}; {elapsed:.0f} s")


def test_hardy_checks(verdict):
    mu = I.build_measure(H1, 4.0)
    families = [fam.make_family(name, H1, 4.0) for name in fam.FAMILY_IDS]
    parts = []
    ok = True
    for q in (2.0, 4.0 / 3.0):
        specs = [Q.hardy_dimfree_spec(H1, 4.0, e, q=q) for e in (0.5, 0.1, 0.02)]
        reports = Q.joint_check(specs, families, mu)
        single = len({json.dumps(r.constants, sort_keys=True) for r in reports}) == 1
        holds = all(r.verdict == "Holds" for r in reports)
        ok &= single and holds
        parts.append(f"{reports[0].spec_id} C={reports[0].constants['C']:.3f} "
                     f"min margin {min(r.worst_margin for r in reports):.3f} over {len(reports)} reports")
    refused = Q.check_inequality(Q.hardy_general_spec(H1, 4.0), fam.make_family("ShellBumps", H1, 4.0), mu)
    quat = F.quaternionic()
    rep = Q.check_inequality(Q.hardy_general_spec(quat, 4.0), fam.make_family("ShellBumps", quat, 4.0),
                             I.build_measure(quat, 4.0))
    ok &= refused.precondition["status"] == "unmet" and refused.verdict is None
    ok &= rep.precondition["status"] == "ok" and rep.verdict == "Holds"
    parts.append(f"general on H1 {refused.precondition['status']}, on quaternionic {rep.verdict} "
                 f"(margin {rep.worst_margin:.3f})")
    verdict(4, ok, "; ".join(parts))


def test_certificates(verdict):
    eps = sympy.Rational(1, 7)
    checks = []
    for p in (sympy.Rational(5, 2), sympy.Integer(3), sympy.Rational(7, 2), sympy.Integer(4), sympy.Integer(9)):
        q = p / (p - 1)
        l2 = Q.certificate(H1, p, 2, eps)
        lq = Q.certificate(H1, p, q, eps)
        checks.append(l2.R_exponent == 1 / (p - 2) and l2.sigma == p / (p - 2))
        checks.append(lq.R_exponent == 2 / (p - q) and lq.sigma == 2 * (p - 1) / (p - 2))
        checks.append(all(Q.certificate_consistency(p).values()))
        for g in (sympy.Integer(1), sympy.Rational(3, 2)):
            if p > g + 1:
                gl2 = Q.certificate(F.grushin(1, 1, float(g)), p, 2, eps)
                glq = Q.certificate(F.grushin(1, 1, float(g)), p, q, eps)
                checks.append(glq.R_exponent == (g + 1) / (p - g * q))
                checks.append(glq.sigma == (g + 1) * (p - 1) / (p - g - 1))
                checks.append(gl2.sigma == p * (g + 1) / (2 * (p - g - 1)))
        for z in (sympy.Integer(1), sympy.Rational(3, 2)):
            if p > 2 * z:
                hg = Q.certificate(F.heisenberg_greiner(1, float(z)), p, q, eps)
                checks.append(hg.sigma == 2 * z * (p - 1) / (p - 2 * z))
    ex = [
        Q.certificate(H1, 4, 2, sympy.Rational(1, 100)),
        Q.certificate(H1, 4, sympy.Rational(4, 3), sympy.Rational(1, 10000)),
        Q.certificate(F.grushin(1, 1, 2.0), 4, sympy.Rational(4, 3), sympy.Rational(1, 10)),
    ]
    checks.append(ex[0].R == 10 and ex[0].sigma == 2)
    checks.append(ex[1].R == 1000 and ex[1].sigma == 3)
    checks.append(sympy.simplify(ex[2].R - 10 ** sympy.Rational(9, 4)) == 0 and ex[2].sigma == 9)
    verdict(5, all(checks), f"{sum(checks)}/{len(checks)} exact identities; R = {ex[0].R}, {ex[1].R}, {ex[2].R}")


def test_growth_shape(verdict):
    t0 = time.perf_counter()
    mu = I.build_measure(H1, 4.0)
    grid = np.geomspace(0.5, 0.02, 8)
    curve = Q.beta_curve(mu, 2.0, grid, fam.make_family("AxisConcentrated", H1, 4.0))
    # the grid runs towards small eps, so beta_hat must not decrease along it
    monotone = bool(np.all(np.diff(curve.beta) >= 0))
    train, test = Q.split_curve(curve)
    C, K = Q.fit_growth_envelope(train, 2.0)
    envelope = Q.envelope_holds(test, 2.0, C, K)
    fit = Q.fit_growth_exponent(curve)
    elapsed = time.perf_counter() - t0
    ok = monotone and len(test.points) == 4 and all(envelope) and fit.sigma > 1 and elapsed < 1200
    verdict(6, ok, f"beta_hat {', '.join(f'{b:.3g}' for b in curve.beta)}; nonincreasing in eps {monotone}; "
                   f"envelope C={C:.4f} K={K:.3g} holds on {sum(envelope)}/{len(envelope)} held-out; "
                   f"sigma_hat {fit.sigma:.2f} +- {fit.half_width:.2f} (n={fit.n}); {elapsed:.0f} s")


def test_spectral_equivalence(verdict):
    t0 = time.perf_counter()
    gaps, counts = [], []
    for n in (32, 48):
        grid = S.default_grid(H1, 4.0, n)
        H, A, M = S.assemble_operators(H1, 4.0, grid)
        lh = S.lowest_eigenvalues(H, 5).eigenvalues
        la = S.lowest_eigenvalues(A, 5, mass=M).eigenvalues
        gaps.append(S.relative_gaps(lh, la)[0])
        level = 2.0 * la[1]
        counts.append((S.count_below(H, level)[0], S.count_below(A, level, mass=M)[0]))
    elapsed = time.perf_counter() - t0
    shrinking = bool(np.all(gaps[1] < gaps[0]))
    stable = all(abs(a - b) <= 1 for a, b in zip(counts[0], counts[1]))
    ok = shrinking and float(np.max(gaps[1])) < 0.05 and stable and elapsed < 900
    verdict(7, ok, f"gaps 32^3 {np.round(gaps[0], 4).tolist()}, 48^3 {np.round(gaps[1], 4).tolist()}; "
                   f"counts at 2*lambda_1 {counts}; {elapsed:.0f} s")


def _payload(tmp_path, argv, name):
    out = tmp_path / name
    code = cli.main(argv + ["--out", str(out)])
    files = sorted(out.glob("*.json"))
    return code, files[0].read_bytes()


def test_determinism_and_cross_check(verdict, tmp_path, capsys):
    same = []
    for argv in (["ubound", "--p", "4", "--q", "2", "--seed", "5"], ["spi-fit", "--p", "4"]):
        runs = [_payload(tmp_path, argv + ["--threads", str(t)], f"{argv[0]}-{i}")
                for i, t in enumerate((1, 1, 2))]
        same.append(all(code == 0 for code, _ in runs) and len({blob for _, blob in runs}) == 1)
    capsys.readouterr()
    mu = I.build_measure(H1, 4.0)
    chain = I.mcmc_sample(mu, 1_000_000, seed=0)
    eta = lambda x: F.eta_weight(H1, 4.0, 2.0, x)
    quad = I.expect_mu(eta, mu)
    mc = I.sample_mean(eta, chain)
    combined = math.hypot(quad.error, mc.error)
    agree = abs(quad.value - mc.value) <= 3 * combined
    verdict(8, all(same) and agree,
            f"byte-identical payloads (2 runs x 2 thread counts) {same}; integral of eta: quadrature "
            f"{quad.value:.6f}, MCMC {mc.value:.6f} +- {mc.error:.1e} ({abs(quad.value - mc.value) / combined:.2f} SE)")
