"""Text serialization of systems, maps, certificates and builder artifacts.

Documents are JSON objects ``{"schema_version", "kind", "rng", "payload"}``.
Floats are written with 17 significant digits (exact round trip), complex
scalars as ``[re, im]`` and matrices as nested row-major lists.  The writer
is hand-rolled so that output bytes depend only on the data.
"""
import json
import math

import numpy as np

from .certificates import Certificate
from .exceptions import ParseError
from .systems import AmbientAlgebra, OperatorSystem, SystemMap

SCHEMA_VERSION = 1
# every random draw in the package goes through numpy's default generator
RNG_ALGORITHM = "numpy.random.PCG64"
KINDS = ("system", "map", "chain", "net", "certificate", "report")

_registry = {}


def register(kind, cls):
    """Register a class exposing ``to_payload()`` / ``from_payload(payload)``."""
    _registry[kind] = cls


def _load_registry():
    from . import builder  # noqa: F401  (registers chain/net/report kinds)


# -- scalar and matrix codecs -------------------------------------------------

def enc_float(x):
    x = float(x) + 0.0   # folds -0.0 into 0.0
    if math.isfinite(x):
        return x
    return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")


def dec_float(v, where="value"):
    if isinstance(v, bool) or not isinstance(v, (int, float, str)):
        raise ParseError(f"{where}: expected a number, got {type(v).__name__}")
    if isinstance(v, str):
        if v not in ("inf", "-inf", "nan"):
            raise ParseError(f"{where}: malformed number {v!r}")
    return float(v)


def enc_matrix(m):
    m = np.asarray(m, dtype=complex)
    if m.ndim == 1:
        return [[enc_float(z.real), enc_float(z.imag)] for z in m]
    return [[[enc_float(z.real), enc_float(z.imag)] for z in row] for row in m]


def dec_matrix(v, where="matrix", ndim=2):
    try:
        a = np.array(v, dtype=object)
        if a.ndim != ndim + 1 or a.shape[-1] != 2:
            raise ParseError(f"{where}: expected a {ndim}-d array of [re, im] pairs")
        flat = [complex(dec_float(p[0], where), dec_float(p[1], where))
                for p in a.reshape(-1, 2)]
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"{where}: malformed matrix ({exc})") from exc
    return np.array(flat, dtype=complex).reshape(a.shape[:-1])


# -- object codecs --------------------------------------------------------------

def enc_system(s):
    out = {"ambient": list(s.ambient.block_dims)}
    if s.n > 1 and (getattr(s, "canonical_full", False)
                    or (s.is_full and s == OperatorSystem.full(s.ambient))):
        out["full"] = True
    else:
        out["basis"] = [enc_matrix(b) for b in s.basis]
    return out


_full_cache = {}


def dec_system(p):
    try:
        amb = AmbientAlgebra(p["ambient"])
        if p.get("full"):
            if amb not in _full_cache:
                _full_cache[amb] = OperatorSystem.full(amb)
            return _full_cache[amb]
        return OperatorSystem(amb, [dec_matrix(b, "basis") for b in p["basis"]])
    except (KeyError, TypeError) as exc:
        raise ParseError(f"system payload malformed: {exc}") from exc


def enc_map(f):
    return {"domain": enc_system(f.domain), "codomain": enc_system(f.codomain),
            "coeffs": enc_matrix(f.coeffs)}


def dec_map(p):
    try:
        return SystemMap(dec_system(p["domain"]), dec_system(p["codomain"]),
                         dec_matrix(p["coeffs"], "coeffs"))
    except (KeyError, TypeError) as exc:
        raise ParseError(f"map payload malformed: {exc}") from exc


def enc_value(v):
    """Generic encoder for detail dictionaries (numbers, strings, lists, arrays)."""
    if isinstance(v, (bool, type(None), str)):
        return v
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return enc_float(v)
    if isinstance(v, (complex, np.complexfloating)):
        return {"complex": [enc_float(v.real), enc_float(v.imag)]}
    if isinstance(v, np.ndarray):
        if np.iscomplexobj(v):
            return {"array": enc_matrix(v) if v.ndim in (1, 2) else [enc_value(x) for x in v]}
        return [enc_value(x) for x in v.tolist()]
    if isinstance(v, dict):
        return {str(k): enc_value(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [enc_value(x) for x in v]
    raise TypeError(f"cannot encode {type(v).__name__}")


def enc_certificate(c):
    return {"claim_id": c.claim_id, "claimed_bound": enc_float(c.claimed_bound),
            "computed_value": enc_float(c.computed_value), "tolerance": enc_float(c.tolerance),
            "passed": c.passed, "inputs_digest": c.inputs_digest, "seed": enc_value(c.seed),
            "timestamp": c.timestamp, "details": enc_value(c.details)}


def dec_certificate(p):
    try:
        c = Certificate(p["claim_id"], dec_float(p["claimed_bound"]), dec_float(p["computed_value"]),
                        dec_float(p["tolerance"]), inputs_digest=p["inputs_digest"], seed=p["seed"],
                        timestamp=p["timestamp"], details=p.get("details", {}))
    except (KeyError, TypeError) as exc:
        raise ParseError(f"certificate payload malformed: {exc}") from exc
    if c.passed != p["passed"]:
        raise ParseError("certificate pass flag inconsistent with its values")
    return c


def kind_of(obj):
    if isinstance(obj, OperatorSystem):
        return "system"
    if isinstance(obj, SystemMap):
        return "map"
    if isinstance(obj, Certificate):
        return "certificate"
    kind = getattr(obj, "KIND", None)
    if kind in KINDS:
        return kind
    raise TypeError(f"cannot serialize object of type {type(obj).__name__}")


def to_payload(obj):
    kind = kind_of(obj)
    if kind == "system":
        return enc_system(obj)
    if kind == "map":
        return enc_map(obj)
    if kind == "certificate":
        return enc_certificate(obj)
    return obj.to_payload()


# -- writer / reader ---------------------------------------------------------------

def _write(v, out):
    if v is None:
        out.append("null")
    elif v is True:
        out.append("true")
    elif v is False:
        out.append("false")
    elif isinstance(v, str):
        out.append(json.dumps(v, ensure_ascii=False))
    elif isinstance(v, (int, np.integer)):
        out.append(str(int(v)))
    elif isinstance(v, (float, np.floating)):
        out.append(format(float(v), ".17g"))
    elif isinstance(v, dict):
        out.append("{")
        for i, (k, x) in enumerate(v.items()):
            if i:
                out.append(",")
            out.append(json.dumps(str(k)))
            out.append(":")
            _write(x, out)
        out.append("}")
    elif isinstance(v, (list, tuple)):
        out.append("[")
        for i, x in enumerate(v):
            if i:
                out.append(",")
            _write(x, out)
        out.append("]")
    else:
        raise TypeError(f"cannot write {type(v).__name__}")


def dumps_value(v):
    out = []
    _write(v, out)
    return "".join(out)


def serialize(obj):
    """Serialize a system, map, certificate, chain, net or report to text."""
    doc = {"schema_version": SCHEMA_VERSION, "kind": kind_of(obj), "rng": RNG_ALGORITHM,
           "payload": to_payload(obj)}
    return dumps_value(doc) + "\n"


def canonical_bytes(obj):
    if isinstance(obj, (OperatorSystem, SystemMap, Certificate)) or hasattr(obj, "KIND"):
        return serialize(obj).encode()
    return dumps_value(enc_value(obj)).encode()


def parse(text):
    """Inverse of :func:`serialize`; raises :class:`ParseError` on bad input."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed document: {exc.msg}", position=exc.pos) from exc
    if not isinstance(doc, dict):
        raise ParseError("document must be a JSON object", position=0)
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ParseError(f"unsupported schema_version {doc.get('schema_version')!r}")
    kind = doc.get("kind")
    if kind not in KINDS:
        raise ParseError(f"unknown document kind {kind!r}")
    if "payload" not in doc:
        raise ParseError("document has no payload")
    p = doc["payload"]
    if kind == "system":
        return dec_system(p)
    if kind == "map":
        return dec_map(p)
    if kind == "certificate":
        return dec_certificate(p)
    _load_registry()
    try:
        return _registry[kind].from_payload(p)
    except (KeyError, TypeError, IndexError, ValueError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"{kind} payload malformed: {exc!r}") from exc


def save(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize(obj))


def load(path):
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read())
