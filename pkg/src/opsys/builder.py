"""Finite stages of the limit construction.

A :class:`Chain` is a sequence of full matrix (or block) algebras ``X_k``
joined by unital complete isometries ``phi_k``.  Stage ``k+1`` is grown from
stage ``k`` by amalgamating, one after another, unital maps
``f: span{1, a, a*} -> X_k`` whose tuples ``a`` come from nets of matrix
balls and whose images are drawn from a net of the radius-2 ball of
``X_k``.  Every amalgamated map leaves an embedding ``g: M_m -> X_{k+1}``
and a certificate for ``||g - phi_k o f||_cb <= 100 dim(E) sqrt(delta)``.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted, check_scalar

from . import io
from . import matrix_core as mc
from .amalgamation import (DEFECT_TOL, _amalgamate, _blocks_of, data_distance, isometry_certificate)
from .cb import DEFAULT_TOL, directional_cb_norms
from .certificates import Certificate, certify, digest
from .exceptions import DimensionError, NumericalError, OpsysError, ScheduleExhausted, SDPError
from .systems import AmbientAlgebra, OperatorSystem, SystemMap, element_norm, system_span
from .ucp import UcpMap

logger = logging.getLogger(__name__)

NET_MODES = ("deterministic", "sampled")
STATUSES = ("handled", "duplicate", "filtered", "aborted")
COVER_SAMPLES = 10_000
GRID_LIMIT = 2_000_000
EXACT_TOL = 1e-12
REFINE_ROUNDS = 5


# -- nets ------------------------------------------------------------------------

def opnorms(stack):
    """Operator norms of a stack of square matrices."""
    stack = np.asarray(stack)
    if stack.shape[-1] == 1:
        return np.abs(stack[:, 0, 0])
    return np.linalg.norm(stack, ord=2, axis=(1, 2))


def random_ball(ambient, count, rng):
    """Random points of the operator-norm unit ball of a block algebra (not uniform)."""
    N = ambient.size
    out = np.zeros((count, N, N), dtype=complex)
    for a, b in zip(ambient.offsets[:-1], ambient.offsets[1:]):
        d = b - a
        out[:, a:b, a:b] = rng.standard_normal((count, d, d)) + 1j * rng.standard_normal((count, d, d))
    real_dim = 2 * sum(d * d for d in ambient.block_dims)
    radii = rng.random(count) ** (1.0 / real_dim)
    return out * (radii / opnorms(out))[:, None, None]


def min_distances(points, elements, chunk=256):
    """``min_e ||p - e||`` for each point, in operator norm."""
    elements = np.asarray(elements)
    best = np.full(len(points), np.inf)
    for s in range(0, len(points), chunk):
        p = points[s:s + chunk]
        d = opnorms((p[:, None] - elements[None]).reshape(-1, *p.shape[1:])).reshape(len(p), len(elements))
        best[s:s + chunk] = d.min(axis=1)
    return best


@dataclass
class Net:
    """Finite subset of the ball of radius ``radius`` in a block algebra, closed under adjoints."""

    m: int
    resolution: float
    elements: list
    mode: str
    seed: object = None
    covering_radius: float = float("inf")
    certified: bool = False
    blocks: tuple = None
    radius: float = 1.0

    KIND = "net"

    def __post_init__(self):
        if self.blocks is None:
            self.blocks = (self.m,)
        self.blocks = tuple(int(b) for b in self.blocks)

    @property
    def ambient(self):
        return AmbientAlgebra(self.blocks)

    def __len__(self):
        return len(self.elements)

    def check(self, tol=1e-12):
        """``(max norm excess, adjoint-closure defect)``; both vanish for a valid net."""
        els = np.array(self.elements)
        excess = max(0.0, float(np.max(opnorms(els))) - self.radius)
        adj = np.conj(np.transpose(els, (0, 2, 1)))
        closure = float(np.max(min_distances(adj, els)))
        return excess, closure

    def to_payload(self):
        return {"m": self.m, "blocks": list(self.blocks), "resolution": io.enc_float(self.resolution),
                "mode": self.mode, "seed": io.enc_value(self.seed), "radius": io.enc_float(self.radius),
                "covering_radius": io.enc_float(self.covering_radius), "certified": self.certified,
                "elements": [io.enc_matrix(e) for e in self.elements]}

    @classmethod
    def from_payload(cls, p):
        return cls(p["m"], io.dec_float(p["resolution"]), [io.dec_matrix(e, "net element") for e in p["elements"]],
                   p["mode"], p["seed"], io.dec_float(p["covering_radius"]), bool(p["certified"]),
                   tuple(p["blocks"]), io.dec_float(p["radius"]))


def _symmetrize(elements):
    out = []
    for e in elements:
        for x in (e, e.conj().T):
            if not any(np.array_equal(x, y) for y in out):
                out.append(x)
    return out


def _grid_net(m, eps, cap):
    h = eps / (2 * m)
    r = eps / (2 * math.sqrt(2))        # Frobenius rounding error of the grid
    steps = int(math.ceil((1 + r) / h))
    ncoord = 2 * m * m
    total = (2 * steps + 1) ** ncoord
    if total > GRID_LIMIT:
        raise ScheduleExhausted(f"deterministic grid would have {total} points; use sampled mode")
    vals = h * np.arange(-steps, steps + 1)
    grid = np.stack(np.meshgrid(*([vals] * ncoord), indexing="ij"), axis=-1).reshape(-1, ncoord)
    mats = (grid[:, :m * m] + 1j * grid[:, m * m:]).reshape(-1, m, m)
    norms = opnorms(mats)
    keep = norms <= 1 + r
    mats, norms = mats[keep], norms[keep]
    scale = np.where(norms > 1, 1 / np.maximum(norms, 1e-300), 1.0)
    mats = mats * scale[:, None, None]
    if cap is not None and len(mats) > cap:
        raise ScheduleExhausted(f"deterministic net has {len(mats)} elements > cap {cap}; use sampled mode")
    # rounding moves a ball point by at most r; pulling back into the ball adds at most r more
    return _symmetrize(list(mats)), 2 * r


def build_net(m, eps, mode="sampled", seed=0, cap=200, samples=COVER_SAMPLES, blocks=None, radius=1.0):
    """An ``eps``-net of the ball of radius ``radius`` in ``M_m`` (or a block algebra).

    ``deterministic`` mode rounds real coordinates to a grid of spacing
    ``eps / (2m)`` and certifies the covering radius; ``sampled`` mode runs
    greedy farthest-point selection on random ball points, stopping at
    ``cap`` elements or once the pool is covered at ``eps``.  A batch of
    ``samples`` fresh points then estimates the covering radius; points it
    finds uncovered seed another selection round (at most ``REFINE_ROUNDS``).
    """
    check_scalar(eps, "eps", (int, float), min_val=0.0, include_boundaries="neither")
    if mode not in NET_MODES:
        raise DimensionError(f"mode must be one of {NET_MODES}")
    amb = AmbientAlgebra(blocks if blocks is not None else (m,))
    N = amb.size
    if eps >= 1:
        # the ball has radius 1 around 0
        return Net(m, eps, [np.zeros((N, N), dtype=complex) * radius], mode, seed, float(radius), True,
                   amb.block_dims, radius)
    if mode == "deterministic":
        if len(amb.block_dims) != 1:
            raise DimensionError("deterministic nets are only built for a single block")
        els, cover = _grid_net(N, eps, cap)
        return Net(m, eps, [e * radius for e in els], mode, seed, cover * radius, True, amb.block_dims, radius)
    rng = np.random.default_rng(seed)
    pool = random_ball(amb, max(4 * (cap or 200), 400), rng)
    chosen = [np.zeros((N, N), dtype=complex)]
    dist = opnorms(pool)
    full = False
    cover = float("inf")
    for _ in range(REFINE_ROUNDS):
        while cap is None or len(chosen) < cap:
            idx = int(np.argmax(dist))
            if dist[idx] <= eps:
                break
            x = pool[idx]
            pair = [x] if np.array_equal(x, x.conj().T) else [x, x.conj().T]
            if cap is not None and len(chosen) + len(pair) > cap:
                full = True
                break
            for y in pair:
                chosen.append(y)
                dist = np.minimum(dist, opnorms(pool - y))
        full = full or (cap is not None and len(chosen) >= cap)
        if not samples:
            break
        # fresh probe points: the estimate, and new pool points wherever the net is too sparse
        probe = random_ball(amb, samples, rng)
        pd = min_distances(probe, np.array(chosen))
        cover = float(np.max(pd))
        if cover <= eps or full:
            break
        pool = probe[pd > eps]
        dist = pd[pd > eps]
    return Net(m, eps, [x * radius for x in chosen], mode, seed, cover * radius, False, amb.block_dims, radius)


# -- tuple maps -------------------------------------------------------------------------

def map_from_tuple(E, a, b, codomain, tol=1e-9):
    """Unital map on ``E = span{1, a, a*}`` with ``a -> b`` and ``a* -> b*``, or ``None``.

    Returns ``None`` when the assignment is not a well-defined linear map
    (a linear relation among ``1, Re a, Im a`` that fails for ``1, Re b, Im b``).
    """
    gens = [np.eye(E.n), (a + a.conj().T) / 2, (a - a.conj().T) / 2j]
    tgts = [np.eye(codomain.n), (b + b.conj().T) / 2, (b - b.conj().T) / 2j]
    G = np.array([g.real.ravel() for g in gens]).T
    T = np.array([t.real.ravel() for t in tgts]).T
    G = np.vstack([G, np.array([g.imag.ravel() for g in gens]).T])
    T = np.vstack([T, np.array([t.imag.ravel() for t in tgts]).T])
    _, s, vh = np.linalg.svd(G, full_matrices=True)
    rank = int(np.sum(s > 1e-10 * max(1.0, s[0])))
    null = vh[rank:]
    if len(null) and np.max(np.abs(T @ null.T)) > tol:
        return None
    images = []
    for e in E.basis:
        rhs = np.concatenate([e.real.ravel(), e.imag.ravel()])
        c = np.linalg.lstsq(G, rhs, rcond=None)[0]
        images.append(sum(ci * t for ci, t in zip(c, tgts)))
    f = SystemMap.from_images(E, images, codomain)
    f.coeffs[:, 0] = 0
    f.coeffs[0, 0] = 1.0
    return f


def corner_embedding(src, dst):
    """A cornered ucp complete isometry ``src -> dst`` between ambient algebras, or ``None``.

    Single blocks: ``x -> diag(x, tau(x) 1)`` with the normalized trace.
    Block algebras of equal block size: ``x -> (x_1, ..., x_m, x_1, ..., x_1)``.
    """
    n, N = src.size, dst.size
    if len(src.block_dims) == 1 and len(dst.block_dims) == 1:
        if n > N:
            return None
        return UcpMap.from_function(lambda x: mc.direct_sum([x, np.trace(x) / n * np.eye(N - n)])
                                    if N > n else x, n, N, _blocks_of(src), corner=np.arange(n))
    q = src.block_dims[0]
    if set(src.block_dims) != {q} or set(dst.block_dims) != {q} or len(src.block_dims) > len(dst.block_dims):
        return None
    extra = len(dst.block_dims) - len(src.block_dims)
    return UcpMap.from_function(lambda x: mc.direct_sum([x] + [x[:q, :q]] * extra) if extra else x,
                                n, N, _blocks_of(src), corner=np.arange(n))


def _join(first, second, block_mode):
    if block_mode:
        return AmbientAlgebra(first.block_dims + second.block_dims)
    return AmbientAlgebra(first.size + second.size)


# -- chain ---------------------------------------------------------------------------------

@dataclass
class LedgerEntry:
    """One scheduled quadruple ``(m, k, i, j)`` and what happened to it."""

    key: tuple
    status: str
    note: str = ""
    delta: float = None
    E: OperatorSystem = None
    f: SystemMap = None
    g: UcpMap = None
    certificate: Certificate = None
    duplicate_of: tuple = None

    def to_payload(self):
        return {"key": list(self.key), "status": self.status, "note": self.note,
                "delta": None if self.delta is None else io.enc_float(self.delta),
                "E": None if self.E is None else io.enc_system(self.E),
                "f": None if self.f is None else io.enc_map(self.f),
                "g": None if self.g is None else self.g.to_payload(),
                "certificate": None if self.certificate is None else io.enc_certificate(self.certificate),
                "duplicate_of": None if self.duplicate_of is None else list(self.duplicate_of)}

    @classmethod
    def from_payload(cls, p):
        if p["status"] not in STATUSES:
            raise io.ParseError(f"unknown ledger status {p['status']!r}")
        return cls(tuple(p["key"]), p["status"], p["note"],
                   None if p["delta"] is None else io.dec_float(p["delta"]),
                   None if p["E"] is None else io.dec_system(p["E"]),
                   None if p["f"] is None else io.dec_map(p["f"]),
                   None if p["g"] is None else UcpMap.from_payload(p["g"]),
                   None if p["certificate"] is None else io.dec_certificate(p["certificate"]),
                   None if p["duplicate_of"] is None else tuple(p["duplicate_of"]))


@dataclass
class Thread:
    """An element of a stage, given by coordinates in the stage's canonical basis.

    ``coords`` has shape ``(dim,)`` or ``(r, r, dim)`` for a level-``r`` element.
    """

    stage: int
    coords: np.ndarray


class Chain:
    """Stages ``X_1 -> X_2 -> ...`` with connectives, ledger, nets and certificates.

    Stage indices are 0-based in code; stage ``k`` of the construction is
    ``ambients[k - 1]``.
    """

    KIND = "chain"

    def __init__(self, params, ambients, connectives=None, ledger=None, tuple_nets=None,
                 stage_nets=None, certificates=None, complete=True, diagnostics=None):
        self.params = dict(params)
        self.ambients = list(ambients)
        self.connectives = list(connectives or [])
        self.ledger = list(ledger or [])
        self.tuple_nets = dict(tuple_nets or {})
        self.stage_nets = list(stage_nets or [])
        self.certificates = list(certificates or [])
        self.complete = complete
        self.diagnostics = dict(diagnostics or {})

    @property
    def sizes(self):
        return [a.size for a in self.ambients]

    @property
    def stages(self):
        return [OperatorSystem.full(a) for a in self.ambients]

    @property
    def block_mode(self):
        return self.params.get("block_size") is not None

    def __len__(self):
        return len(self.ambients)

    def connective(self, k):
        """Connective ``X_k -> X_{k+1}`` (0-based) as a SystemMap."""
        return self.connectives[k].as_map(OperatorSystem.full(self.ambients[k]),
                                          OperatorSystem.full(self.ambients[k + 1]))

    def push(self, x, start, stop):
        """Image of an element of stage ``start`` in stage ``stop``."""
        for k in range(start, stop):
            x = self.connectives[k].apply(x)
        return x

    def push_map(self, u, start, stop):
        """Compose a UcpMap landing in stage ``start`` with the connectives up to ``stop``."""
        for k in range(start, stop):
            u = self.connectives[k].compose(u)
        return u

    def handled(self):
        return [e for e in self.ledger if e.status == "handled"]

    def entry(self, key):
        for e in self.ledger:
            if e.key == tuple(key):
                return e
        raise KeyError(key)

    def extended(self, ambient, connective, entry=None):
        """A copy with one more stage appended."""
        out = Chain(self.params, self.ambients + [ambient], self.connectives + [connective],
                    self.ledger + ([entry] if entry is not None else []), self.tuple_nets,
                    self.stage_nets, self.certificates, self.complete, self.diagnostics)
        return out

    @property
    def passed(self):
        return self.complete and all(c.passed for c in self.certificates) and all(
            e.certificate.passed for e in self.ledger if e.status == "handled")

    def to_payload(self):
        return {"params": io.enc_value(self.params),
                "ambients": [list(a.block_dims) for a in self.ambients],
                "connectives": [c.to_payload() for c in self.connectives],
                "ledger": [e.to_payload() for e in self.ledger],
                "tuple_nets": [{"m": m, "k": k, "net": net.to_payload()}
                               for (m, k), net in sorted(self.tuple_nets.items())],
                "stage_nets": [n.to_payload() for n in self.stage_nets],
                "certificates": [io.enc_certificate(c) for c in self.certificates],
                "complete": self.complete, "diagnostics": io.enc_value(self.diagnostics)}

    @classmethod
    def from_payload(cls, p):
        return cls(p["params"], [AmbientAlgebra(a) for a in p["ambients"]],
                   [UcpMap.from_payload(c) for c in p["connectives"]],
                   [LedgerEntry.from_payload(e) for e in p["ledger"]],
                   {(t["m"], t["k"]): Net.from_payload(t["net"]) for t in p["tuple_nets"]},
                   [Net.from_payload(n) for n in p["stage_nets"]],
                   [io.dec_certificate(c) for c in p["certificates"]],
                   bool(p["complete"]), p.get("diagnostics", {}))

    def __repr__(self):
        return f"Chain(sizes={self.sizes}, handled={len(self.handled())}, complete={self.complete})"


@dataclass
class Report:
    """Outcome of a verification pass: certificates plus free-form details."""

    title: str
    certificates: list
    details: dict = field(default_factory=dict)

    KIND = "report"

    @property
    def passed(self):
        return all(c.passed for c in self.certificates)

    def lines(self):
        return [str(c) for c in self.certificates]

    def to_payload(self):
        return {"title": self.title, "passed": self.passed,
                "certificates": [io.enc_certificate(c) for c in self.certificates],
                "details": io.enc_value(self.details)}

    @classmethod
    def from_payload(cls, p):
        return cls(p["title"], [io.dec_certificate(c) for c in p["certificates"]], p.get("details", {}))


io.register("chain", Chain)
io.register("net", Net)
io.register("report", Report)


# -- the builder -------------------------------------------------------------------------------

def _seed_for(seed, *parts):
    return [int(seed)] + [int(p) for p in parts]


class GSBuilder(BaseEstimator):
    """Grow a chain of matrix stages by repeated near-amalgamation.

    :param K: number of stages
    :param m_max: largest tuple ambient ``M_m`` (or ``l^inf_m(M_n)``) enumerated
    :param net_mode: ``"sampled"`` or ``"deterministic"``
    :param net_eps: fixed net resolution; ``None`` uses ``2^-k`` at stage ``k``
    :param net_cap: element cap for tuple nets and stage nets
    :param stage_net_samples: probe points for stage-net covering estimates
    :param delta_max: maps with larger cb distortion are filtered, not amalgamated
    :param maps_per_stage: amalgamations performed per stage
    :param candidates_per_tuple: stage-net images tried per tuple
    :param max_scheduled: cap on quadruples examined per stage
    :param block_size: ``None`` for matrix stages, ``n`` for ``l^inf(M_n)`` stages
    """

    def __init__(self, K=3, m_max=2, net_mode="sampled", net_eps=None, net_cap=200,
                 stage_net_samples=500, delta_max=0.25, maps_per_stage=6, candidates_per_tuple=2,
                 max_scheduled=40, block_size=None, tol=DEFAULT_TOL, seed=0):
        self.K = K
        self.m_max = m_max
        self.net_mode = net_mode
        self.net_eps = net_eps
        self.net_cap = net_cap
        self.stage_net_samples = stage_net_samples
        self.delta_max = delta_max
        self.maps_per_stage = maps_per_stage
        self.candidates_per_tuple = candidates_per_tuple
        self.max_scheduled = max_scheduled
        self.block_size = block_size
        self.tol = tol
        self.seed = seed

    def _validate(self):
        check_scalar(self.K, "K", int, min_val=1)
        check_scalar(self.m_max, "m_max", int, min_val=1)
        check_scalar(self.net_cap, "net_cap", int, min_val=1)
        check_scalar(self.maps_per_stage, "maps_per_stage", int, min_val=1)
        check_scalar(self.candidates_per_tuple, "candidates_per_tuple", int, min_val=1)
        check_scalar(self.max_scheduled, "max_scheduled", int, min_val=1)
        check_scalar(self.delta_max, "delta_max", (int, float), min_val=0.0, max_val=1.0)
        check_scalar(self.seed, "seed", int, min_val=0)
        if self.net_mode not in NET_MODES:
            raise DimensionError(f"net_mode must be one of {NET_MODES}")
        if self.net_eps is not None:
            check_scalar(self.net_eps, "net_eps", (int, float), min_val=0.0, include_boundaries="neither")
        if self.block_size is not None:
            check_scalar(self.block_size, "block_size", int, min_val=1)

    def resolution(self, k):
        return float(self.net_eps) if self.net_eps is not None else 2.0 ** -k

    def _tuple_ambient(self, m):
        if self.block_size is None:
            return AmbientAlgebra(m)
        return AmbientAlgebra.ell_inf(m, self.block_size)

    def fit(self, X=None, y=None):
        self._validate()
        first = AmbientAlgebra(1) if self.block_size is None else AmbientAlgebra((self.block_size,))
        chain = Chain(self.get_params(), [first])
        for k in range(1, self.K):
            self._nets(chain, k)
            try:
                self._grow(chain, k)
            except (SDPError, NumericalError) as exc:
                chain.complete = False
                chain.diagnostics = {"stage": k, "error": f"{type(exc).__name__}: {exc}"}
                logger.warning("stage %d aborted: %s", k, exc)
                break
        if chain.complete:
            self._stage_net(chain, len(chain))
        self.chain_ = chain
        return self

    def _nets(self, chain, k):
        for m in range(1, min(k, self.m_max) + 1):
            amb = self._tuple_ambient(m)
            chain.tuple_nets[(m, k)] = build_net(amb.size if self.block_size is None else m,
                                                 self.resolution(k), self.net_mode,
                                                 _seed_for(self.seed, m, k, 0), self.net_cap,
                                                 blocks=amb.block_dims)
        self._stage_net(chain, k)

    def _stage_net(self, chain, k):
        """Net of the radius-2 ball of stage ``k``, seeded with embedded tuple nets."""
        amb = chain.ambients[k - 1]
        seeded = []
        for (m, kk), net in sorted(chain.tuple_nets.items()):
            if kk != k:
                continue
            emb = corner_embedding(net.ambient, amb)
            if emb is not None:
                seeded += [emb.apply(x) for x in net.elements]
        sampled = build_net(amb.size, self.resolution(k), "sampled", _seed_for(self.seed, 0, k, 1),
                            self.net_cap, samples=self.stage_net_samples, blocks=amb.block_dims, radius=2.0)
        els = _symmetrize(seeded + sampled.elements)
        cover = sampled.covering_radius
        chain.stage_nets.append(Net(amb.size, self.resolution(k), els, "sampled", sampled.seed, cover, False,
                                    amb.block_dims, 2.0))

    def _schedule(self, chain, k):
        """Fair interleaving over ``m``: the i-th tuple of every ``m`` before the (i+1)-th of any."""
        lists = [(m, chain.tuple_nets[(m, k)].elements) for m in range(1, min(k, self.m_max) + 1)]
        longest = max(len(els) for _, els in lists)
        for i in range(longest):
            for m, els in lists:
                if i < len(els):
                    yield m, i, els[i]

    def _grow(self, chain, k):
        X_amb = chain.ambients[k - 1]
        X_full = OperatorSystem.full(X_amb)
        dnet = np.array(chain.stage_nets[k - 1].elements)
        handled, seen = [], {}
        examined = 0
        for m, i, a in self._schedule(chain, k):
            if len(handled) >= self.maps_per_stage or examined >= self.max_scheduled:
                break
            t_amb = self._tuple_ambient(m)
            emb = corner_embedding(t_amb, X_amb)
            if emb is None:
                chain.ledger.append(LedgerEntry((m, k, i, -1), "filtered",
                                                "no unital complete isometry of the tuple ambient into the stage"))
                examined += 1
                continue
            E = system_span(t_amb, [a])
            b0 = emb.apply(a)
            order = np.argsort(opnorms(dnet - b0), kind="stable")[:self.candidates_per_tuple]
            for j in order:
                if len(handled) >= self.maps_per_stage or examined >= self.max_scheduled:
                    break
                examined += 1
                key = (m, k, i, int(j))
                b = dnet[j]
                f = map_from_tuple(E, a, b, X_full)
                if f is None:
                    chain.ledger.append(LedgerEntry(key, "filtered", "assignment is not linear on span{1, a, a*}",
                                                    E=E))
                    continue
                fkey = digest(f)
                if fkey in seen:
                    chain.ledger.append(LedgerEntry(key, "duplicate", "same map as an earlier quadruple",
                                                    E=E, f=f, duplicate_of=seen[fkey]))
                    continue
                try:
                    fwd, inv = directional_cb_norms(f, self.tol)
                except DimensionError as exc:
                    chain.ledger.append(LedgerEntry(key, "filtered", f"not invertible: {exc}", E=E, f=f))
                    continue
                delta = max(0.0, fwd.value - 1.0, inv.value - 1.0)
                if delta > self.delta_max:
                    chain.ledger.append(LedgerEntry(key, "filtered", f"delta {delta:.4g} above delta_max",
                                                    delta=delta, E=E, f=f))
                    continue
                exact = float(np.max(np.abs(b - b0))) <= EXACT_TOL
                hints = (emb, UcpMap.compression(emb.K, emb.corner, _blocks_of(X_amb))) if exact else (None, None)
                try:
                    res = _amalgamate(E, f, _join(t_amb, X_amb, self.block_size is not None), self.tol,
                                      hints[0], hints[1], "amalgam.defect-bound")
                except (SDPError, DimensionError) as exc:
                    chain.ledger.append(LedgerEntry(key, "aborted", f"{type(exc).__name__}: {exc}",
                                                    delta=delta, E=E, f=f))
                    continue
                entry = LedgerEntry(key, "handled", "", delta=res.delta, E=E, f=f)
                chain.ledger.append(entry)
                seen[fkey] = key
                handled.append((entry, res.phi, res.psi))
        if not handled:
            raise ScheduleExhausted(f"stage {k}: no map was amalgamated")
        self._compose(chain, k, handled)

    def _compose(self, chain, k, handled):
        """Chain the amalgams: ``j_t(z) = diag(psi_t(P z), z)``, ``i_t(x) = diag(x, c(phi_t(x)))``."""
        block_mode = self.block_size is not None
        Z = chain.ambients[k - 1]
        conn = UcpMap.identity(Z)
        gs = []
        for entry, phi, psi in handled:
            t_amb = entry.E.ambient
            new = _join(t_amb, Z, block_mode)
            mm = t_amb.size
            P = conn.corner
            c = conn
            j_t = UcpMap.from_function(lambda z, P=P, psi=psi: mc.direct_sum([psi.apply(z[np.ix_(P, P)]), z]),
                                       Z.size, new.size, _blocks_of(Z), corner=mm + np.arange(Z.size))
            i_t = UcpMap.from_function(lambda x, c=c, phi=phi: mc.direct_sum([x, c.apply(phi.apply(x))]),
                                       mm, new.size, _blocks_of(t_amb), corner=np.arange(mm))
            gs = [j_t.compose(g) for g in gs] + [i_t]
            conn = j_t.compose(conn)
            Z = new
        chain.ambients.append(Z)
        chain.connectives.append(conn)
        chain.certificates.append(isometry_certificate(conn, f"chain.connective-isometry.stage-{k}"))
        for (entry, _, _), g in zip(handled, gs):
            entry.g = g
            entry.certificate = condition_certificate(entry, conn, self.tol)
        for e in chain.ledger:
            if e.status == "duplicate" and e.key[1] == k:
                e.certificate = chain.entry(e.duplicate_of).certificate


def condition_certificate(entry, conn, tol=DEFAULT_TOL, delta=None):
    """``||g - phi_k o f||_cb <= 100 dim(E) sqrt(delta)`` recomputed from the stored maps."""
    E, f, g = entry.E, entry.f, entry.g
    delta = entry.delta if delta is None else delta
    value = data_distance(E.basis, [g.apply(x) for x in E.basis], [conn.apply(y) for y in f.images], tol)
    return certify("stage-extension.defect-bound", 100 * E.dim * math.sqrt(delta), value, DEFECT_TOL,
                   inputs=(f,), key=list(entry.key), delta=delta)


def build_gs(params=None):
    """Build a chain of matrix stages; ``params`` are :class:`GSBuilder` keyword arguments."""
    return GSBuilder(**(params or {})).fit().chain_


def build_gs_n(n, params=None):
    """Build a chain of ``l^inf(M_n)`` stages (``n = 1``: commutative stages)."""
    params = dict(params or {})
    params["block_size"] = n
    return GSBuilder(**params).fit().chain_


# -- verification ---------------------------------------------------------------------------

def verify(chain, tol=DEFAULT_TOL):
    """Re-check a chain from its stored data alone.

    Recomputes: connective isometry residuals, every handled map's cb
    distortion and condition certificate, duplicate links, net norms and
    adjoint closure, stage growth, and ledger statuses.
    """
    certs = []
    for k, conn in enumerate(chain.connectives):
        certs.append(isometry_certificate(conn, f"verify.connective-isometry.stage-{k + 1}"))
        shape_ok = conn.N == chain.sizes[k] and conn.K == chain.sizes[k + 1]
        certs.append(certify(f"verify.connective-shape.stage-{k + 1}", 0.0, 0.0 if shape_ok else 1.0, 0.0))
    growth = [b - a for a, b in zip(chain.sizes[:-1], chain.sizes[1:])]
    certs.append(certify("verify.sizes-increase", 0.0, float(sum(1 for g in growth if g <= 0)), 0.0, growth=growth))
    bad_status = sum(1 for e in chain.ledger if e.status not in STATUSES)
    certs.append(certify("verify.ledger-statuses", 0.0, float(bad_status), 0.0, entries=len(chain.ledger)))
    for e in chain.ledger:
        k = e.key[1]
        if e.status == "handled":
            fwd, inv = directional_cb_norms(e.f, tol)
            delta = max(0.0, fwd.value - 1.0, inv.value - 1.0)
            if k - 1 >= len(chain.connectives) or e.g is None:
                certs.append(certify(f"verify.handled-complete.{_key(e.key)}", 0.0, 1.0, 0.0))
                continue
            c = condition_certificate(e, chain.connectives[k - 1], tol, delta=delta)
            c.claim_id = f"verify.stage-extension.{_key(e.key)}"
            certs.append(c)
            certs.append(isometry_certificate(e.g, f"verify.g-isometry.{_key(e.key)}"))
        elif e.status == "duplicate":
            try:
                ref = chain.entry(e.duplicate_of)
                same = ref.status == "handled" and np.allclose(ref.f.coeffs, e.f.coeffs, atol=1e-12) \
                    and ref.E == e.E
            except KeyError:
                same = False
            certs.append(certify(f"verify.duplicate.{_key(e.key)}", 0.0, 0.0 if same else 1.0, 0.0))
    for idx, net in enumerate(list(chain.tuple_nets.values()) + chain.stage_nets):
        excess, closure = net.check()
        certs.append(certify(f"verify.net-{idx}.norm", 0.0, excess, 1e-12))
        certs.append(certify(f"verify.net-{idx}.adjoint-closed", 0.0, closure, 1e-12))
    return Report("chain verification", certs, {"sizes": chain.sizes, "complete": chain.complete,
                                                 "handled": len(chain.handled())})


def _key(key):
    return "-".join(str(x) for x in key)


# -- threads --------------------------------------------------------------------------------------

def _thread_element(chain, t):
    sys = OperatorSystem.full(chain.ambients[t.stage])
    c = np.asarray(t.coords, dtype=complex)
    return sys, (sys.element(c) if c.ndim == 1 else sys.amplify(c))


def push_thread(chain, t, stage):
    """The same limit element written at a later stage."""
    if stage < t.stage:
        raise DimensionError("threads only move forward")
    sys, x = _thread_element(chain, t)
    c = np.asarray(t.coords)
    n = sys.n
    r = 1 if c.ndim == 1 else c.shape[0]
    blocks = x.reshape(r, n, r, n).transpose(0, 2, 1, 3)
    target = OperatorSystem.full(chain.ambients[stage])
    out = np.zeros((r, r, target.dim), dtype=complex)
    for a in range(r):
        for b in range(r):
            out[a, b] = target.coords(chain.push(blocks[a, b], t.stage, stage), check=False)
    return Thread(stage, out[0, 0] if c.ndim == 1 else out)


def chain_norm(chain, t, level=None):
    """Norm of a thread; stable under pushing forward because connectives are complete isometries."""
    sys = OperatorSystem.full(chain.ambients[t.stage])
    c = np.asarray(t.coords)
    level = level or (1 if c.ndim == 1 else c.shape[0])
    return element_norm(sys, c, level)


# -- extension property ----------------------------------------------------------------------------

@dataclass
class ExtensionResult:
    success: bool
    psi: UcpMap = None
    stage: int = None
    defect: float = float("inf")
    certificate: Certificate = None
    nearest: tuple = None
    nearest_distance: float = float("inf")
    chain: Chain = None


def extension_test(chain, E, phi, eps, stage=None, extend=False, tol=DEFAULT_TOL, shortlist=3):
    """Look for a unital complete isometry ``psi: M_m -> X_K`` with ``||psi|E - phi||_cb <= eps``.

    ``phi`` maps ``E ⊂ M_m`` into stage ``stage`` (default: the last one).
    The handled embeddings ``g`` with the same tuple ambient are pushed to
    the last stage and ranked by their level-one distance to ``phi`` on the
    basis of ``E``; the best few are measured exactly.  If none is within
    ``eps`` and ``extend`` is set, ``phi`` itself is amalgamated into a new
    stage.  Otherwise the result reports the nearest handled quadruple.
    """
    last = len(chain) - 1
    stage = last if stage is None else stage
    targets = [chain.push(y, stage, last) for y in phi.images]
    ranked = []
    for e in chain.handled():
        if e.E.ambient != E.ambient or e.g is None:
            continue
        k = e.key[1]
        vals = [e.g.apply(x) for x in E.basis]
        vals = [chain.push(v, k, last) for v in vals]
        proxy = max(mc.operator_norm(v - w) for v, w in zip(vals, targets))
        ranked.append((proxy, e.key, e))
    ranked.sort(key=lambda r: r[0])
    best = (float("inf"), None, None)
    for proxy, key, e in ranked[:shortlist]:
        k = e.key[1]
        psi = chain.push_map(e.g, k, last)
        d = data_distance(E.basis, [psi.apply(x) for x in E.basis], targets, tol)
        if d < best[0]:
            best = (d, key, psi)
    if best[0] <= eps:
        cert = certify("extension.defect", eps, best[0], DEFECT_TOL, via=list(best[1]))
        return ExtensionResult(True, best[2], last, best[0], cert, best[1], best[0], chain)
    if extend:
        amb = chain.ambients[last]
        f = SystemMap.from_images(E, targets, OperatorSystem.full(amb))
        res = _amalgamate(E, f, _join(E.ambient, amb, chain.block_mode), tol, None, None, "amalgam.defect-bound")
        entry = LedgerEntry((E.n, last + 1, -1, len(chain.ledger)), "handled", "extension request",
                            delta=res.delta, E=E, f=f, g=res.i_map, certificate=res.certificate)
        new_chain = chain.extended(res.target, res.j_map, entry)
        ok = res.defect <= eps
        cert = certify("extension.defect", eps, res.defect, DEFECT_TOL, via="new stage")
        return ExtensionResult(ok, res.i_map, last + 1, res.defect, cert, best[1], best[0], new_chain)
    return ExtensionResult(False, None, None, best[0], None, best[1], best[0], chain)


# -- back and forth -----------------------------------------------------------------------------------

@dataclass
class BackAndForthResult:
    alpha: UcpMap
    domain_stage: int
    codomain_stage: int
    defect: float
    certificate: Certificate
    chain: Chain
    rounds: list = field(default_factory=list)


def residual_bound(diffs):
    """Upper bound for the cb norm of ``E_ab -> diffs[a][b]`` on a full block algebra.

    The map is ``sum_ab tr(E_ba x) D_ab``, a sum of rank-one maps of cb
    norm ``||D_ab||``.
    """
    return float(sum(mc.operator_norm(d) for d in diffs))


def _unit_matrices(ambient):
    N = ambient.size
    out = []
    for a, b in zip(ambient.offsets[:-1], ambient.offsets[1:]):
        for i in range(a, b):
            for j in range(a, b):
                e = np.zeros((N, N), dtype=complex)
                e[i, j] = 1.0
                out.append(e)
    return out


def back_and_forth(chain, E, phi, rounds=2, eps0=1e-6, phi_hint=None, psi_hint=None, tol=DEFAULT_TOL):
    """Finite back-and-forth for a near-isometry ``phi: E -> X_K`` with ``E ⊂ X_K``.

    Round 1 amalgamates ``phi`` and returns ``mu_1 = i: X_K -> X_{K+1}`` with
    ``||mu_1|E - j o phi||_cb`` equal to the amalgam defect.  Each later
    round builds ``mu_r: X_s -> X_{s+1}`` and a new connective ``c'`` with
    ``mu_r o c = c' o mu_{r-1}``, from ``mu_r(z) = diag(z, mu_{r-1}(Q z))``
    and ``c'(y) = diag(c(P y), y)`` (``Q``, ``P`` the corner compressions of
    ``c`` and ``mu_{r-1}``).
    Round ``r`` may spend ``eps0 2^-r``; the certificate's slack is the sum
    of those budgets.  ``alpha = mu_R`` is a unital complete isometry.
    """
    if rounds < 1:
        raise DimensionError("need at least one round")
    K = len(chain) - 1
    amb = chain.ambients[K]
    if E.ambient != amb:
        raise DimensionError("E must be a subsystem of the last stage")
    block_mode = chain.block_mode
    res = _amalgamate(E, phi, _join(amb, phi.codomain.ambient, block_mode), tol, phi_hint, psi_hint,
                      "amalgam.defect-bound")
    if res.delta > 1:
        raise DimensionError(f"delta {res.delta:.4g} exceeds 1")
    work = chain.extended(res.target, res.j_map)
    mu = res.i_map
    ledger = [{"round": 1, "error": res.defect, "budget": None}]
    budgets = []
    for r in range(2, rounds + 1):
        s = len(work) - 1
        prev_amb, cur_amb = work.ambients[s - 1], work.ambients[s]
        c = work.connectives[s - 1]
        P, Q = mu.corner, c.corner
        new = _join(cur_amb, cur_amb, block_mode)
        n = cur_amb.size
        i_r = UcpMap.from_function(lambda z, Q=Q, mu=mu: mc.direct_sum([z, mu.apply(z[np.ix_(Q, Q)])]),
                                   n, new.size, _blocks_of(cur_amb), corner=np.arange(n))
        j_r = UcpMap.from_function(lambda y, P=P, c=c: mc.direct_sum([c.apply(y[np.ix_(P, P)]), y]),
                                   n, new.size, _blocks_of(cur_amb), corner=n + np.arange(n))
        units = _unit_matrices(prev_amb)
        err = residual_bound([i_r.apply(c.apply(x)) - j_r.apply(mu.apply(x)) for x in units])
        budget = eps0 * 2.0 ** -r
        budgets.append(budget)
        ledger.append({"round": r, "error": err, "budget": budget})
        if err > budget:
            raise NumericalError(f"round {r} exceeded its budget ({err:.3g} > {budget:.3g})",
                                 details={"rounds": ledger})
        work = work.extended(new, j_r)
        mu = i_r
    last = len(work) - 1
    dom = last - 1
    ins = [work.push(x, K, dom) for x in E.basis]
    outs = [work.push(y, K, last) for y in phi.images]
    defect = data_distance(ins, [mu.apply(x) for x in ins], outs, tol)
    slack = sum(budgets)
    delta = res.delta
    cert = certify("homogeneity.intertwiner-defect", 100 * E.dim * math.sqrt(delta) + slack, defect, DEFECT_TOL,
                   delta=delta, slack=slack, budgets=budgets, first_round_defect=res.defect,
                   rounds=len(ledger))
    return BackAndForthResult(mu, dom, last, defect, cert, work, ledger)


# -- OMIN_n estimates -------------------------------------------------------------------------------

def omin_norm_lower(sys, coords, n, level=1, samples=8, ascent_iters=200, seed=0):
    """``(lower, upper)`` for the level-``level`` norm of an element in ``OMIN_n(sys)``.

    The lower bound maximizes ``||(id (x) phi)(x)||`` over ucp compressions
    ``phi(z) = V* z V`` by isometries ``V: C^n -> C^N``; ``V`` is the
    orthonormalized factor of an unconstrained matrix improved with L-BFGS
    from random starts.  When ``n >= N`` the identity is such a compression
    and both bounds agree.  The upper bound is the norm in the ambient algebra.
    """
    rng = np.random.default_rng(seed)
    c = np.asarray(coords, dtype=complex)
    x = sys.element(c) if c.ndim == 1 else sys.amplify(c)
    upper = mc.operator_norm(x)
    N = sys.n
    r = 1 if c.ndim == 1 else c.shape[0]
    if n >= N:
        return upper, upper
    X = x.reshape(r, N, r, N)

    def value(params):
        G = (params[:N * n] + 1j * params[N * n:]).reshape(N, n)
        V = np.linalg.qr(G)[0]
        y = np.einsum("ia,pirj,jb->parb", V.conj(), X, V).reshape(r * n, r * n)
        return mc.operator_norm(y)

    best = 0.0
    for _ in range(samples):
        start = rng.standard_normal(2 * N * n)
        res = optimize.minimize(lambda p: -value(p), start, method="L-BFGS-B",
                                options={"maxiter": ascent_iters})
        best = max(best, value(start), value(res.x))
    return min(best, upper), upper
