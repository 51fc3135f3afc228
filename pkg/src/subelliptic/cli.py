"""Command line: ``subelliptic <command> [--config FILE] [flags]``.

Exit codes: 0 on success or Holds, 2 when a check is violated or flagged,
1 on error (with a JSON error object on stderr).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import SCHEMA_VERSION, __version__
from . import families as fam
from . import inequalities as ineq
from . import integrate as integ
from . import spectral
from .config import COMMANDS, RunConfig, load_config, resolve_frame
from .errors import RangeError, SubellipticError
from .frames import Kind, gauge_identities, random_points
from .reports import ResultRecord, write_report

EXIT_OK, EXIT_ERROR, EXIT_FLAGGED = 0, 1, 2


def _measure(cfg: RunConfig, frame, p):
    mu = integ.build_measure(frame, p)
    if cfg.samples:
        ss, header = integ.load_samples(cfg.samples, frame)
        if abs(header["p"] - p) > 1e-12:
            ss = integ.reweight(ss, frame, header["p"], p)
        mu = dataclasses.replace(mu, samples=ss)
    return mu


def _report_tables(reports):
    tables = {}
    for i, rep in enumerate(reports):
        tables[f"rows{i}" if len(reports) > 1 else "rows"] = rep.csv_rows()
    return tables


def _verdict_status(verdicts):
    return "flagged" if any(v in (None, "Violated") for v in verdicts) else "ok"


# ---------------------------------------------------------------------------
# commands; each returns (payload, tables, status)


def cmd_norm_check(cfg, frame):
    n = int(cfg.get("points", 500))
    mode = "analytic" if frame.kind is Kind.METIVIER else "fd"
    tol = cfg.get("tol", 1e-8 if mode == "analytic" else 1e-4)
    pts = random_points(frame, n, seed=cfg.seed, min_ratio=0.05)
    rep = gauge_identities(frame, pts, mode=mode)
    worst = {name: rep.max_rel_dev(name) for name in rep.QUANTITIES}
    flagged = rep.exact and any(v > tol for v in worst.values())
    header = ["point_id", "quantity"] + [f"coord{j}" for j in range(frame.D)] + [
        "N", "measured", "predicted", "rel_dev", "skipped"]
    rows = [[r["point_id"], r["quantity"], *r["coords"], r["N"], r["measured"], r["predicted"], r["rel_dev"],
             r["skipped"]] for r in rep.rows()]
    payload = {"frame": frame.describe(), "mode": mode, "points": n, "tol": tol, "exact": rep.exact,
               "max_rel_dev": worst, "skipped": int(np.sum(rep.skipped)), "bands": rep.bands}
    return payload, {"gauge": (header, rows)}, "flagged" if flagged else "ok"


def cmd_sample(cfg, frame):
    p = cfg.get("p")
    n = int(cfg.get("n", 200_000))
    mu = integ.build_measure(frame, p)
    ss = integ.mcmc_sample(mu, n, cfg.seed)
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, f"samples-{cfg.digest()}.bin")
    header = integ.save_samples(path, ss, frame, p, n)
    payload = {"header": header, "samples_file": os.path.basename(path)}
    status = "ok" if ss.usable else "flagged"
    return payload, {}, status


def cmd_ibp(cfg, frame):
    mu = integ.build_measure(frame, cfg.get("p"))
    rows = ineq.ibp_suite(mu, tol=cfg.get("tol", 1e-8))
    flagged = any(r["rel"] >= ineq.IBP_TOL or r["reduction"] < 4.0 for r in rows)
    keys = ["p", "h", "r", "omega", "member", "residual", "scale", "rel", "rel_tight", "reduction"]
    payload = {"cases": rows, "max_rel": max(r["rel"] for r in rows)}
    return payload, {"cases": (keys, [[r[k] for k in keys] for r in rows])}, "flagged" if flagged else "ok"


def cmd_ubound(cfg, frame):
    p = cfg.get("p")
    q = cfg.get("q", 2.0)
    mu = _measure(cfg, frame, p)
    spec = ineq.ubound_spec(frame, p, q)
    family = fam.make_family(cfg.family or "Mixed", frame, p)
    rep = ineq.check_inequality(spec, family, mu, workers=cfg.threads)
    return rep.to_dict(), _report_tables([rep]), _verdict_status([rep.verdict])


def cmd_hardy(cfg, frame):
    p = cfg.get("p")
    mu = _measure(cfg, frame, p)
    if cfg.variant == "general":
        spec = ineq.hardy_general_spec(frame, p, r=cfg.get("r", 2.0), potential=cfg.potential)
        family = fam.make_family(cfg.family or "ShellBumps", frame, p)
        rep = ineq.check_inequality(spec, family, mu, workers=cfg.threads)
        return rep.to_dict(), _report_tables([rep]), _verdict_status([rep.verdict])
    q = cfg.get("q", 2.0)
    grid = cfg.get("eps_grid") or (0.5, 0.1, 0.02)
    specs = [ineq.hardy_dimfree_spec(frame, p, e, q=q) for e in grid]
    names = [cfg.family] if cfg.family else list(fam.FAMILY_IDS)
    families = [fam.make_family(name, frame, p) for name in names]
    reports = ineq.joint_check(specs, families, mu, workers=cfg.threads)
    payload = {"constants": reports[0].constants, "eps_grid": list(grid),
               "reports": [r.to_dict() for r in reports]}
    return payload, _report_tables(reports), _verdict_status([r.verdict for r in reports])


def cmd_spi_fit(cfg, frame):
    p = cfg.get("p")
    q = cfg.get("q", 2.0)
    mu = _measure(cfg, frame, p)
    grid = cfg.get("eps_grid") or (0.2, 0.1, 0.05, 0.02)
    family = fam.make_family(cfg.family or "AxisConcentrated", frame, p)
    curve = ineq.beta_curve(mu, q, grid, family, workers=cfg.threads)
    payload = {"q": q, "family": family.id, "points": [dataclasses.asdict(pt) for pt in curve.points]}
    try:
        payload["fit"] = ineq.fit_growth_exponent(curve).as_dict()
    except SubellipticError as exc:
        payload["fit"] = {"error": exc.code, "message": str(exc)}
    return payload, {"curve": curve.csv_rows()}, "ok"


def cmd_certificate(cfg, frame):
    p = cfg.get("p")
    q = cfg.get("q", 2.0)
    eps = cfg.get("eps")
    if eps is None:
        raise RangeError("certificate needs eps")
    p_exact = ineq.rational(p)
    # q is either 2 or the conjugate of p; rebuild the latter exactly from p
    q_exact = ineq.rational(q) if q == 2.0 or abs(q - p / (p - 1)) > 1e-12 else p_exact / (p_exact - 1)
    cert = ineq.certificate(frame, p_exact, q_exact, ineq.rational(eps))
    return cert.as_dict(), {}, "ok"


def cmd_spectrum(cfg, frame):
    p = cfg.get("p")
    k = int(cfg.get("k", 5))
    sizes = cfg.get("grid") or (32, 32, 32)
    box = cfg.get("box")
    if box:
        if len(box) == 3:
            lo, hi = -np.asarray(box, float), np.asarray(box, float)
        elif len(box) == 6:
            lo, hi = np.asarray(box[:3], float), np.asarray(box[3:], float)
        else:
            raise RangeError("box takes three half-widths or six values lo1,lo2,lo3,hi1,hi2,hi3")
        grid = spectral.GridSpec(integ.Domain(lo, hi), sizes, p=p)
    else:
        grid = spectral.default_grid(frame, p, sizes)
    H, A, M = spectral.assemble_operators(frame, p, grid)
    payload = {"grid": grid.meta(), "p": p, "k": k, "dimension": H.dimension}
    results = {}
    if cfg.operator in ("schrodinger", "both"):
        results["schrodinger"] = spectral.lowest_eigenvalues(H, k, vectors=cfg.dump)
    if cfg.operator in ("dirichlet", "both"):
        results["dirichlet"] = spectral.lowest_eigenvalues(A, k, mass=M, vectors=cfg.dump)
    for name, res in results.items():
        res.grid = grid.meta()
        payload[name] = res.to_dict()
    if cfg.dump:
        payload["vector_files"] = _dump_vectors(cfg, frame, grid, results)
    lh = results.get("schrodinger")
    la = results.get("dirichlet")
    header = ["mode", "lambda_schrodinger", "lambda_dirichlet", "rel_gap"]
    rows = []
    if lh is not None and la is not None:
        gaps, scale = spectral.relative_gaps(lh.eigenvalues, la.eigenvalues)
        payload["rel_gap"] = gaps.tolist()
        payload["gap_scale"] = scale
        rows = [[i + 1, a, b, g] for i, (a, b, g) in enumerate(zip(lh.eigenvalues, la.eigenvalues, gaps))]
    else:
        only = lh if lh is not None else la
        rows = [[i + 1, v if lh is not None else "", v if la is not None else "", ""]
                for i, v in enumerate(only.eigenvalues)]
    return payload, {"modes": (header, rows)}, "ok"


def _dump_vectors(cfg, frame, grid, results):
    """Eigenvectors in the sample-cache layout: a JSON header line, then little-endian float64, mode-major."""
    os.makedirs(cfg.out, exist_ok=True)
    names = {}
    for name, res in results.items():
        vecs = np.ascontiguousarray(np.asarray(res.vectors).T, dtype="<f8")
        header = {"frame_hash": frame.digest(), "p": float(cfg.get("p")), "operator": name, "grid": grid.meta(),
                  "n_points": int(vecs.shape[0]), "dim": int(vecs.shape[1]),
                  "eigenvalues": [float(v) for v in res.eigenvalues]}
        path = os.path.join(cfg.out, f"spectrum-{cfg.digest()}-{name}.vec")
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            fh.write(vecs.tobytes())
        names[name] = os.path.basename(path)
    return names


HANDLERS = {
    "norm-check": cmd_norm_check,
    "sample": cmd_sample,
    "ibp": cmd_ibp,
    "ubound": cmd_ubound,
    "hardy": cmd_hardy,
    "spi-fit": cmd_spi_fit,
    "certificate": cmd_certificate,
    "spectrum": cmd_spectrum,
}


def run_command(cfg: RunConfig) -> ResultRecord:
    frame = resolve_frame(cfg)
    payload, tables, status = HANDLERS[cfg.command](cfg, frame)
    payload = {"command": cfg.command, "config": cfg.canonical(), "result": payload}
    return ResultRecord(cfg.command, cfg.digest(), payload, tables, status)


# ---------------------------------------------------------------------------
# argument parsing


def _options(parser):
    add = parser.add_argument
    add("--config", help="sectioned key = value file; flags override it")
    add("--frame", help="frame file or builtin name (h1, quaternionic, grushin:<gamma>, hg:<zeta>)")
    add("--p", type=float)
    add("--q", type=float)
    add("--r", type=float)
    add("--gamma", type=float)
    add("--zeta", type=float)
    add("--eps", type=float)
    add("--eps-grid", dest="eps_grid", help="comma-separated eps values")
    add("--tol", type=float)
    add("--family")
    add("--samples")
    add("--seed", type=int)
    add("--threads", type=int)
    add("--out")
    add("--n", type=int, help="number of MCMC samples")
    add("--points", type=int, help="number of probe points")
    add("--grid", help="points per axis, n1,n2,n3")
    add("--box", help="three half-widths or lo1,lo2,lo3,hi1,hi2,hi3")
    add("--k", type=int)
    add("--operator", choices=("schrodinger", "dirichlet", "both"))
    add("--variant", choices=("dimfree", "general"))
    add("--potential", choices=("log", "power"))
    add("--dump", action="store_true", default=None, help="spectrum: also write the eigenvectors")


SUMMARIES = {
    "norm-check": "compare gauge derivatives with their closed forms",
    "sample": "draw MCMC samples from the measure and cache them",
    "ibp": "integration-by-parts residuals",
    "ubound": "fit and test the U-bound constants",
    "hardy": "fit and test Hardy-type constants",
    "spi-fit": "super-Poincare growth curve and exponent fit",
    "certificate": "exact radius and growth exponent",
    "spectrum": "low eigenvalues of the Schrodinger and weighted Dirichlet operators",
}


def build_parser():
    parser = argparse.ArgumentParser(prog="subelliptic", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version",
                        version=f"subelliptic {__version__} (artifact {__version__}, schema {SCHEMA_VERSION})")
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name in COMMANDS:
        _options(sub.add_parser(name, help=SUMMARIES[name]))
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help(sys.stderr)
        return EXIT_ERROR
    flags = {k: v for k, v in vars(args).items() if k != "config" and v is not None}
    try:
        cfg = load_config(args.config, flags)
        record = run_command(cfg)
        paths = write_report(record, cfg.out)
    except SubellipticError as exc:
        sys.stderr.write(json.dumps({"error": exc.code, "message": str(exc)}) + "\n")
        return EXIT_ERROR
    except (ValueError, OSError) as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return EXIT_ERROR
    sys.stdout.write(json.dumps({"status": record.status, "payload_hash": record.payload_hash(),
                                 "files": paths}) + "\n")
    return EXIT_FLAGGED if record.status == "flagged" else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
