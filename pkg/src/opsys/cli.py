"""Command-line entry point: ``opsys <subcommand> --in ... --out ...``.

Exit codes: 0 when every certificate passed, 1 when one failed, 2 for
usage or parse errors, 3 for numerical failures.
"""
import argparse
import logging
import math
import sys

import numpy as np

from . import io
from .amalgamation import (DEFECT_TOL, amalgamate_block, amalgamate_matricial, data_distance,
                           fraisse_distance_upper, isometry_certificate)
from .builder import (Chain, Net, Report, back_and_forth, build_gs, build_gs_n, build_net,
                      extension_test, verify)
from .cb import DEFAULT_TOL, cb_norm_subspace, ucp_nearest
from .certificates import Certificate, certify
from .exceptions import NumericalError, OpsysError, ScheduleExhausted
from .systems import OperatorSystem, SystemMap
from .ucp import UcpMap

EXIT_OK, EXIT_FAILED, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

logger = logging.getLogger("opsys")


class UsageError(OpsysError):
    pass


def _load(paths, *kinds):
    if len(paths) != len(kinds):
        raise UsageError(f"expected {len(kinds)} --in document(s) ({', '.join(kinds)}), got {len(paths)}")
    out = []
    for path, kind in zip(paths, kinds):
        obj = io.load(path)
        if io.kind_of(obj) != kind:
            raise UsageError(f"{path}: expected a {kind} document, got {io.kind_of(obj)}")
        out.append(obj)
    return out


def _emit(obj, args):
    if args.out:
        io.save(obj, args.out)


def _status(certs):
    return EXIT_OK if all(c.passed for c in certs) else EXIT_FAILED


# -- report payload helpers --------------------------------------------------------

def _ucp(p):
    return UcpMap.from_payload(p)


def _mats(v):
    return [io.dec_matrix(m) for m in v]


def recheck(report, tol=DEFAULT_TOL):
    """Recompute the quantity a report document was written for."""
    d = report.details
    kind = d.get("recheck")
    certs = []
    if kind == "cbnorm":
        f = io.dec_map(d["map"])
        value = cb_norm_subspace(f, tol).value
        stored = io.dec_float(d["value"])
        certs.append(certify("verify.cb-norm-reproduced", 0.0, abs(value - stored), 1e-5 * max(1.0, stored)))
    elif kind == "ucp-nearest":
        f = io.dec_map(d["map"])
        ext = _ucp(d["extension"])
        lam = ext.min_eig()
        certs.append(certify("verify.ucp-extension", 0.0, max(ext.unital_residual(), max(0.0, -lam)), 1e-9))
        dist = data_distance(f.domain.basis, f.images, [ext.apply(x) for x in f.domain.basis], tol)
        certs.append(certify("verify.ucp-distance", io.dec_float(d["bound"]), dist, 1e-6))
    elif kind in ("amalgam", "homogeneity", "extension"):
        ins = _mats(d["inputs"])
        outs = _mats(d["targets"])
        u = _ucp(d["embedding"])
        value = data_distance(ins, [u.apply(x) for x in ins], outs, tol)
        certs.append(certify(f"verify.{kind}-defect", io.dec_float(d["bound"]), value, DEFECT_TOL))
        certs.append(isometry_certificate(u, f"verify.{kind}-isometry"))
        if kind == "amalgam":
            certs.append(isometry_certificate(_ucp(d["connective"]), "verify.amalgam-j-isometry"))
    else:
        certs = [Certificate(c.claim_id, c.claimed_bound, c.computed_value, c.tolerance, c.inputs_digest,
                             c.seed, c.timestamp, c.details) for c in report.certificates]
    return Report(f"re-verification of {report.title}", certs, {"source": report.title})


def verify_document(obj, tol=DEFAULT_TOL):
    """Re-verify any document kind; returns a :class:`Report`."""
    if isinstance(obj, Chain):
        return verify(obj, tol)
    if isinstance(obj, Net):
        excess, closure = obj.check()
        return Report("net verification", [certify("verify.net.norm", 0.0, excess, 1e-12),
                                           certify("verify.net.adjoint-closed", 0.0, closure, 1e-12)])
    if isinstance(obj, Report):
        return recheck(obj, tol)
    if isinstance(obj, Certificate):
        c = Certificate(obj.claim_id, obj.claimed_bound, obj.computed_value, obj.tolerance)
        return Report("certificate verification", [c])
    if isinstance(obj, OperatorSystem):
        herm = max(float(np.max(np.abs(b - b.conj().T))) for b in obj.basis)
        unit = 0.0 if obj.contains(obj.ambient.identity()) else 1.0
        return Report("system verification", [certify("verify.system.hermitian-basis", 0.0, herm, 1e-12),
                                              certify("verify.system.unit", 0.0, unit, 0.0)])
    if isinstance(obj, SystemMap):
        ok = obj.coeffs.shape == (obj.codomain.dim, obj.domain.dim)
        return Report("map verification", [certify("verify.map.shape", 0.0, 0.0 if ok else 1.0, 0.0)])
    raise UsageError(f"cannot verify {type(obj).__name__}")


# -- subcommands --------------------------------------------------------------------------

def cmd_cbnorm(args):
    (f,) = _load(args.inputs, "map")
    res = cb_norm_subspace(f, args.tol)
    # print only the digits the solver tolerance supports
    print(round(res.value, max(1, int(-math.log10(args.tol)) - 1)))
    cert = certify("cb-norm.duality-gap", args.tol * 10, max(0.0, res.upper - res.lower), 0.0,
                   inputs=(f,), lower=res.lower, upper=res.upper)
    _emit(Report("cb norm", [cert], {"recheck": "cbnorm", "map": io.enc_map(f), "value": res.value,
                                     "lower": res.lower, "upper": res.upper}), args)
    return EXIT_OK


def cmd_ucp_nearest(args):
    (f,) = _load(args.inputs, "map")
    psi, ext, dist, cert = ucp_nearest(f, args.tol)
    print(f"distance {dist:.10g}  bound {cert.claimed_bound:.6g}")
    _emit(Report("nearest ucp map", [cert], {"recheck": "ucp-nearest", "map": io.enc_map(f),
                                             "extension": ext.to_payload(), "distance": dist,
                                             "bound": cert.claimed_bound}), args)
    return _status([cert])


def cmd_amalgamate(args):
    E, f = _load(args.inputs, "system", "map")
    single = len(E.ambient.block_dims) == 1 and len(f.codomain.ambient.block_dims) == 1
    res = (amalgamate_matricial if single else amalgamate_block)(E, f, args.tol)
    print(f"defect {res.defect:.10g}  bound {res.certificate.claimed_bound:.6g}  delta {res.delta:.6g}")
    outs = [res.j_map.apply(y) for y in f.images]
    certs = [res.certificate] + res.isometry_certificates
    _emit(Report("amalgam", certs, {"recheck": "amalgam", "inputs": [io.enc_matrix(x) for x in E.basis],
                                    "targets": [io.enc_matrix(y) for y in outs],
                                    "embedding": res.i_map.to_payload(), "connective": res.j_map.to_payload(),
                                    "bound": res.certificate.claimed_bound, "delta": res.delta,
                                    "target": list(res.target.block_dims)}), args)
    return _status(certs)


def cmd_fraisse_dist(args):
    A, B = _load(args.inputs, "system", "system")
    est = fraisse_distance_upper(list(A.basis), list(B.basis), A.ambient, B.ambient, tol=args.tol)
    print(f"upper {est.value:.10g}")
    certs = [est.certificate] if est.certificate is not None else []
    _emit(Report("tuple distance", certs, {"value": est.value, "candidates": est.candidates}), args)
    return _status(certs)


def cmd_net(args):
    eps = args.net_eps if args.net_eps is not None else 0.5
    net = build_net(args.m, eps, args.mode, args.seed, args.cap)
    print(f"{len(net)} elements, covering radius {net.covering_radius:.6g} "
          f"({'certified' if net.certified else 'estimated'})")
    _emit(net, args)
    return EXIT_OK


def _builder_params(args):
    p = {"K": args.max_stage, "net_cap": args.cap, "seed": args.seed, "tol": args.tol, "m_max": args.m_max,
         "maps_per_stage": args.maps_per_stage, "net_mode": args.mode}
    if args.net_eps is not None:
        p["net_eps"] = args.net_eps
    return p


def _report_chain(chain, args):
    print(f"sizes {chain.sizes}  handled {len(chain.handled())}  complete {chain.complete}")
    _emit(chain, args)
    if not chain.complete:
        return EXIT_NUMERIC
    return EXIT_OK if chain.passed else EXIT_FAILED


def cmd_build_gs(args):
    return _report_chain(build_gs(_builder_params(args)), args)


def cmd_build_gs_n(args):
    return _report_chain(build_gs_n(args.n, _builder_params(args)), args)


def cmd_extend(args):
    chain, E, phi = _load(args.inputs, "chain", "system", "map")
    stage = args.stage if args.stage is not None else len(chain) - 1
    res = extension_test(chain, E, phi, args.eps, stage=stage, extend=args.allow_new_stage, tol=args.tol)
    if not res.success:
        print(f"no extension within {args.eps:g}; nearest handled {res.nearest} at {res.nearest_distance:.6g}")
        cert = certify("extension.defect", args.eps, res.nearest_distance, DEFECT_TOL,
                       nearest=None if res.nearest is None else list(res.nearest))
        _emit(Report("extension", [cert], {"found": False}), args)
        return EXIT_FAILED
    print(f"extension at stage {res.stage} with defect {res.defect:.10g}")
    targets = [res.chain.push(y, stage, res.stage) for y in phi.images]
    _emit(Report("extension", [res.certificate],
                 {"recheck": "extension", "inputs": [io.enc_matrix(x) for x in E.basis],
                  "targets": [io.enc_matrix(y) for y in targets], "embedding": res.psi.to_payload(),
                  "bound": args.eps, "stage": res.stage}), args)
    return _status([res.certificate])


def cmd_homogeneity(args):
    chain, E, phi = _load(args.inputs, "chain", "system", "map")
    res = back_and_forth(chain, E, phi, rounds=args.rounds, eps0=args.eps0, tol=args.tol)
    print(f"defect {res.defect:.10g}  bound {res.certificate.claimed_bound:.6g}")
    K = len(chain) - 1
    ins = [res.chain.push(x, K, res.domain_stage) for x in E.basis]
    outs = [res.chain.push(y, K, res.codomain_stage) for y in phi.images]
    _emit(Report("homogeneity", [res.certificate],
                 {"recheck": "homogeneity", "inputs": [io.enc_matrix(x) for x in ins],
                  "targets": [io.enc_matrix(y) for y in outs], "embedding": res.alpha.to_payload(),
                  "bound": res.certificate.claimed_bound, "rounds": res.rounds}), args)
    return _status([res.certificate])


def cmd_verify(args):
    if not args.inputs:
        raise UsageError("verify needs at least one --in document")
    certs = []
    reports = []
    for path in args.inputs:
        rep = verify_document(io.load(path), args.tol)
        reports.append(rep)
        certs += rep.certificates
        for line in rep.lines():
            if args.verbose or not line.startswith("[PASS]"):
                print(f"{path}: {line}")
        print(f"{path}: {'PASS' if rep.passed else 'FAIL'} ({len(rep.certificates)} checks)")
    if args.out:
        io.save(Report("verification", certs, {"documents": list(args.inputs)}), args.out)
    return _status(certs)


COMMANDS = {
    "cbnorm": (cmd_cbnorm, "cb norm of a map document"),
    "ucp-nearest": (cmd_ucp_nearest, "nearest ucp map and its cb distance"),
    "amalgamate": (cmd_amalgamate, "amalgamate a system and a map on it"),
    "fraisse-dist": (cmd_fraisse_dist, "upper bound for the distance between two tuples (system bases)"),
    "net": (cmd_net, "epsilon-net of the unit ball of M_m"),
    "build-gs": (cmd_build_gs, "build matrix stages"),
    "build-gs-n": (cmd_build_gs_n, "build l^inf(M_n) stages"),
    "extend": (cmd_extend, "extension test against a chain"),
    "homogeneity": (cmd_homogeneity, "finite back-and-forth inside a chain"),
    "verify": (cmd_verify, "re-verify documents from their stored data"),
}


def make_parser():
    parser = argparse.ArgumentParser(prog="opsys", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (fn, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=fn)
        p.add_argument("--in", dest="inputs", nargs="+", default=[], metavar="PATH")
        p.add_argument("--out", default=None, metavar="PATH")
        p.add_argument("--tol", type=float, default=DEFAULT_TOL)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--max-stage", type=int, default=3)
        p.add_argument("--net-eps", type=float, default=None)
        p.add_argument("--cap", type=int, default=200)
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "net":
            p.add_argument("--m", type=int, required=True)
        if name in ("net", "build-gs", "build-gs-n"):
            p.add_argument("--mode", choices=("sampled", "deterministic"), default="sampled")
        if name in ("build-gs", "build-gs-n"):
            p.add_argument("--m-max", type=int, default=2)
            p.add_argument("--maps-per-stage", type=int, default=6)
        if name == "build-gs-n":
            p.add_argument("--n", type=int, required=True)
        if name == "extend":
            p.add_argument("--eps", type=float, required=True)
            p.add_argument("--stage", type=int, default=None)
            p.add_argument("--allow-new-stage", action="store_true")
        if name == "homogeneity":
            p.add_argument("--rounds", type=int, default=2)
            p.add_argument("--eps0", type=float, default=1e-6)
    return parser


def main(argv=None):
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if not math.isfinite(args.tol) or args.tol <= 0:
        print("error: --tol must be positive", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (NumericalError, ScheduleExhausted) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OpsysError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
