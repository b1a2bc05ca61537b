"""Near-amalgamation of matricial operator systems and related constructions.

Given ``E`` inside ``F0`` and a unital near-isometry ``f: E -> F1``, the
amalgam places ``F0`` and ``F1`` side by side::

    i(x) = diag(x, phi(x)),    j(y) = diag(psi(y), y)

with ``phi`` a ucp map close to ``f`` and ``psi`` a ucp map close to
``f^{-1}``.  Both ``i`` and ``j`` are unital complete isometries (their
corner compressions are ucp left inverses), and
``j o f - i|E = diag(psi o f - id, f - phi)``.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from . import matrix_core as mc
from . import sdp
from .cb import (DEFAULT_TOL, _Layout, _add_hermitian_eq, _terms_choi_entry, _ucp_blocks,
                 cb_norm_data, directional_cb_norms, functional_norm, inverse_data, map_data,
                 ucp_nearest_data)
from .certificates import Certificate, certify
from .exceptions import DimensionError, PerturbationTooLarge, SDPError
from .systems import AmbientAlgebra, OperatorSystem, SystemMap, system_span
from .ucp import UcpMap, verify_extension

DEFECT_TOL = 1e-6
ISOMETRY_TOL = 1e-9
ZERO_TOL = 1e-13


def _blocks_of(ambient):
    off = ambient.offsets
    return [np.arange(a, b) for a, b in zip(off[:-1], off[1:])]


def isometry_certificate(u, claim_id="unital-complete-isometry", tol=ISOMETRY_TOL):
    """Certificate that a cornered UcpMap is a unital complete isometry.

    The value is the largest residual among unitality, Choi positivity and
    exact recovery on the corner; when it vanishes both directional cb norms
    are exactly 1.
    """
    return certify(claim_id, 0.0, u.isometry_error(), tol, in_size=u.N, out_size=u.K)


def data_distance(inputs, outputs_a, outputs_b, tol=DEFAULT_TOL):
    """cb norm of ``x_l -> a_l - b_l``; exact zero when the outputs coincide."""
    diff = [np.asarray(a) - np.asarray(b) for a, b in zip(outputs_a, outputs_b)]
    if max(float(np.max(np.abs(d))) for d in diff) <= ZERO_TOL:
        return 0.0
    return cb_norm_data(inputs, diff, tol).value


@dataclass
class AmalgamResult:
    """Two unital complete isometries into a common target and the defect between them.

    ``i_map``/``j_map`` are cornered :class:`UcpMap` objects; the SystemMap
    views ``i`` and ``j`` are built on demand.
    """

    target: AmbientAlgebra
    i_map: UcpMap
    j_map: UcpMap
    defect: float
    certificate: Certificate
    delta: float = 0.0
    phi: UcpMap = None
    psi: UcpMap = None
    source: AmbientAlgebra = None
    codomain: AmbientAlgebra = None
    isometry_certificates: list = field(default_factory=list)

    @property
    def i(self):
        return self.i_map.as_map(OperatorSystem.full(self.source), OperatorSystem.full(self.target))

    @property
    def j(self):
        return self.j_map.as_map(OperatorSystem.full(self.codomain), OperatorSystem.full(self.target))

    @property
    def passed(self):
        return self.certificate.passed and all(c.passed for c in self.isometry_certificates)


def _ucp_approximation(inputs, outputs, hint, tol):
    """A ucp map on the inputs' block algebra close to ``inputs -> outputs``."""
    if hint is not None:
        return hint
    ext, _ = ucp_nearest_data(_Layout(inputs, outputs), tol)
    return ext


def _widen(u, N, K, comps):
    """View ``u`` as a map on the full input algebra ``comps`` (conditional expectation first)."""
    return UcpMap.from_function(u.apply, N, K, comps)


def _amalgamate(E, f, target, tol, phi_hint, psi_hint, claim_id):
    if f.domain != E:
        raise DimensionError("f must be defined on E")
    if not f.is_unital:
        raise DimensionError("amalgamation needs a unital map")
    F0, F1 = E.ambient, f.codomain.ambient
    n, k = F0.size, F1.size
    fwd_hint = inv_hint = None
    if phi_hint is None and psi_hint is None and F0 == F1 and all(
            np.max(np.abs(x - y)) <= ZERO_TOL for x, y in zip(E.basis, f.images)):
        # restriction of the identity: the identity map is an exact ucp extension both ways
        phi_hint = psi_hint = UcpMap.identity(F0)
    if phi_hint is not None and verify_extension(f, phi_hint)[0]:
        fwd_hint = phi_hint
    if psi_hint is not None and f.is_self_adjoint:
        g = SystemMap(f.range_system(), E, np.eye(E.dim))
        if verify_extension(g, psi_hint)[0]:
            inv_hint = psi_hint
    fwd, inv = directional_cb_norms(f, tol, forward_hint=fwd_hint, inverse_hint=inv_hint)
    delta = max(0.0, fwd.value - 1.0, inv.value - 1.0)

    ins, outs = map_data(f)
    phi = _widen(_ucp_approximation(ins, outs, fwd_hint, tol), n, k, _blocks_of(F0))
    rins, routs = inverse_data(f)
    psi = _widen(_ucp_approximation(rins, routs, inv_hint, tol), k, n, _blocks_of(F1))

    N = target.size
    i_map = UcpMap.from_function(lambda x: mc.direct_sum([x, phi.apply(x)]), n, N,
                                 _blocks_of(F0), corner=np.arange(n))
    j_map = UcpMap.from_function(lambda y: mc.direct_sum([psi.apply(y), y]), k, N,
                                 _blocks_of(F1), corner=n + np.arange(k))
    # defect recomputed from the assembled maps, not from the SDP objectives
    defect = data_distance(ins, [j_map.apply(y) for y in outs], [i_map.apply(x) for x in ins], tol)
    bound = 100 * E.dim * math.sqrt(delta)
    cert = certify(claim_id, bound, defect, DEFECT_TOL, inputs=(f,), delta=delta,
                   forward_cb=fwd.value, inverse_cb=inv.value, in_hypothesis=bool(delta <= 1.0),
                   phi_distance=data_distance(ins, outs, [phi.apply(x) for x in ins], tol),
                   psi_distance=data_distance(rins, routs, [psi.apply(y) for y in rins], tol))
    isos = [isometry_certificate(i_map, "amalgam.i-isometry"),
            isometry_certificate(j_map, "amalgam.j-isometry")]
    return AmalgamResult(target, i_map, j_map, defect, cert, delta, phi, psi, F0, F1, isos)


def amalgamate_matricial(E, f, tol=DEFAULT_TOL, phi_hint=None, psi_hint=None):
    """Amalgamate ``E ⊂ M_n`` and ``f: E -> M_k`` into ``M_{n+k}``.

    ``phi_hint``/``psi_hint`` may supply ucp extensions of ``f`` and of
    ``f^{-1}`` (e.g. for restrictions of known isometries); they are checked
    before use and otherwise replaced by the nearest-ucp SDP solutions.
    """
    if len(E.ambient.block_dims) != 1 or len(f.codomain.ambient.block_dims) != 1:
        raise DimensionError("amalgamate_matricial works in single-block algebras; use amalgamate_block")
    target = AmbientAlgebra(E.n + f.codomain.n)
    return _amalgamate(E, f, target, tol, phi_hint, psi_hint, "amalgam.defect-bound")


def amalgamate_block(E, f, tol=DEFAULT_TOL, phi_hint=None, psi_hint=None):
    """Amalgamate inside block algebras: the target concatenates both block lists.

    For ``E ⊂ l^inf_k(M_n)`` and ``f`` into ``l^inf_k(M_n)`` the target is
    ``l^inf_{2k}(M_n)``; ucp maps are block diagonal along the output blocks.
    """
    dims = E.ambient.block_dims + f.codomain.ambient.block_dims
    return _amalgamate(E, f, AmbientAlgebra(dims), tol, phi_hint, psi_hint, "amalgam.defect-bound")


def joint_embed(A, B):
    """Embed operator systems ``A ⊂ M_n`` and ``B ⊂ M_k`` into ``M_{n+k}`` over the unit.

    ``i(x) = diag(x, tau(x) 1)`` and ``j(y) = diag(tau(y) 1, y)`` with ``tau``
    the normalized trace.
    """
    F0, F1 = A.ambient, B.ambient
    n, k = F0.size, F1.size
    i_map = UcpMap.from_function(lambda x: mc.direct_sum([x, np.trace(x) / n * np.eye(k)]), n, n + k,
                                 _blocks_of(F0), corner=np.arange(n))
    j_map = UcpMap.from_function(lambda y: mc.direct_sum([np.trace(y) / k * np.eye(n), y]), k, n + k,
                                 _blocks_of(F1), corner=n + np.arange(k))
    defect = float(np.max(np.abs(i_map.apply(F0.identity()) - j_map.apply(F1.identity()))))
    cert = certify("joint-embedding.unit-defect", 0.0, defect, DEFECT_TOL)
    isos = [isometry_certificate(i_map, "amalgam.i-isometry"),
            isometry_certificate(j_map, "amalgam.j-isometry")]
    return AmalgamResult(AmbientAlgebra(n + k), i_map, j_map, defect, cert, 0.0, None, None, F0, F1, isos)


# -- small perturbations and tuple distances -------------------------------------------

def _tuple_system(ambient, tup):
    """The operator system spanned by a tuple, with the change of basis to the tuple."""
    tup = [mc.as_matrix(a) for a in tup]
    sys = system_span(ambient, tup)
    if sys.dim != len(tup):
        raise DimensionError(f"tuple of length {len(tup)} spans a {sys.dim}-dimensional system; "
                             "it must be linearly independent and span an operator system")
    # coords of each tuple element in the orthonormal basis: a_i = sum_l S[l, i] e_l
    S = np.array([sys.coords(a, check=True, tol=1e-8) for a in tup]).T
    if np.linalg.svd(S, compute_uv=False)[-1] < 1e-8:
        raise DimensionError("tuple is nearly dependent")
    return sys, S


def tuple_map(ambient_a, a, ambient_b, b):
    """The linear map ``<a> -> <b>`` with ``a_i -> b_i``."""
    sa, Sa = _tuple_system(ambient_a, a)
    sb, Sb = _tuple_system(ambient_b, b)
    return SystemMap(sa, sb, Sb @ np.linalg.inv(Sa))


def dual_functionals(sys, S):
    """Matrices ``w_i`` with ``tr(w_i a_j) = delta_ij`` on the tuple ``a = basis @ S``."""
    T = np.linalg.inv(S)
    duals = sys.dual_basis()
    return [np.tensordot(T[i], np.array(duals), axes=1) for i in range(S.shape[1])]


def auerbach_upper(sys, S, tol=1e-8):
    """Upper bound for ``max(||a_i||, ||a_i'||)`` over a tuple and its dual functionals."""
    tup = [sys.element(S[:, i]) for i in range(S.shape[1])]
    hi = max(mc.operator_norm(a) for a in tup)
    for w in dual_functionals(sys, S):
        hi = max(hi, functional_norm(sys, w, tol=tol)[1])
    return hi


@dataclass
class PerturbationResult:
    map: SystemMap
    forward_cb: float
    inverse_cb: float
    bound: float
    auerbach: float
    distance: float
    certificate: Certificate


def small_perturbation_map(ambient, a, b, tol=DEFAULT_TOL):
    """The map ``a_i -> b_i`` between tuples in a common ambient, with certified cb bounds.

    The map is the restriction of ``z -> z + sum_i a_i'(z) (b_i - a_i)``
    where ``a_i'`` are (norm-preserving extensions of) the dual functionals
    of the tuple ``a``.  With ``N`` bounding the norms of the tuples and of
    both dual families, and ``d = max_i ||a_i - b_i||``, both ``||f||_cb``
    and ``||f^{-1}||_cb`` are at most ``1 + k N d``.

    :raises PerturbationTooLarge: when ``k N d >= 1``
    """
    if len(a) != len(b):
        raise DimensionError("tuples must have the same length")
    if not isinstance(ambient, AmbientAlgebra):
        ambient = AmbientAlgebra(ambient)
    sa, Sa = _tuple_system(ambient, a)
    sb, Sb = _tuple_system(ambient, b)
    k = len(a)
    dist = max(mc.operator_norm(mc.as_matrix(x) - mc.as_matrix(y)) for x, y in zip(a, b))
    N = max(auerbach_upper(sa, Sa), auerbach_upper(sb, Sb))
    correction = k * N * dist
    if correction >= 1:
        raise PerturbationTooLarge(f"perturbation too large: k N d = {correction:.4g} >= 1",
                                   correction_norm=correction)
    f = SystemMap(sa, sb, Sb @ np.linalg.inv(Sa))
    fwd, inv = directional_cb_norms(f, tol)
    bound = 1.0 + correction
    cert = certify("small-perturbation.cb-bound", bound, max(fwd.value, inv.value), DEFECT_TOL,
                   inputs=(f,), k=k, auerbach=N, distance=dist)
    return PerturbationResult(f, fwd.value, inv.value, bound, N, dist, cert)


def _tuple_ucp_fit(src, dst, tol):
    """Min over ucp ``phi`` on the block algebra of ``src`` of ``max_i ||phi(src_i) - dst_i||``.

    Level-one norms only, as in the tuple distance.  Solved per output
    component: compressing any ucp map onto the diagonal blocks of the
    targets is again ucp and does not increase the distances.
    Returns ``(value, phi)``.
    """
    layout = _Layout(src, dst)
    sizes = [len(c) for c in layout.in_comps]
    rows = []
    for comp in layout.out_comps:
        K = len(comp)
        outs = layout.outputs_on(comp)
        pb = sdp.ProblemBuilder()
        q = _ucp_blocks(pb, sizes, K)
        t = pb.add_block(1)
        # ||phi(x_l) - y_l|| <= t  as  [[t I, D_l], [D_l^*, t I]] >= 0
        for l, y in enumerate(outs):
            w = pb.add_block(2 * K)
            for off in (0, K):
                _add_hermitian_eq(pb, K, lambda a, b, w=w, off=off: [(w, off + b, off + a, 1.0)] + (
                    [(t, 0, 0, -1.0)] if a == b else []), np.zeros((K, K)))
            for a in range(K):
                for b in range(K):
                    terms = [(w, K + b, a, 1.0)]
                    for qb, x in zip(q, layout.in_parts[l]):
                        terms += [(blk, r, c, -v) for blk, r, c, v in _terms_choi_entry(qb, 0, 0, K, x, a, b)]
                    pb.add_complex(terms, -y[a, b])
        pb.add_objective([(t, 0, 0, 1.0)])
        sol = sdp.solve(pb.build(), tol=tol)
        sdp.require_optimal(sol, "tuple ucp fit")
        rows.append([sol.primal[qb] for qb in q])
    phi = UcpMap(layout.N, layout.K, layout.in_comps, layout.out_comps, rows).repaired()
    value = max(mc.operator_norm(phi.apply(x) - y) for x, y in zip(layout.inputs, layout.outputs))
    return value, phi


@dataclass
class FraisseEstimate:
    """Upper bound for the tuple distance and how it was realized."""

    value: float
    candidates: dict
    witness: AmalgamResult = None
    certificate: Certificate = None


def fraisse_distance_upper(a, b, ambient_a=None, ambient_b=None, budget=3, tol=DEFAULT_TOL):
    """Upper bound for ``inf max_i ||i(a_i) - j(b_i)||`` over unital complete isometries ``i, j``.

    Candidates, in order, until ``budget`` of them have been evaluated:

    * ``common-ambient``: both tuples already live in one algebra;
    * ``ucp-pair``: ``i(x) = diag(x, phi(x))``, ``j(y) = diag(psi(y), y)`` with
      ``phi``, ``psi`` ucp and chosen by SDP to minimize the tuple distance;
    * ``amalgam``: the amalgam of the tuple map ``a_i -> b_i`` (whose defect
      bounds the tuple distance).

    When the tuple map is a unital isomorphism the certificate compares the
    estimate with ``1000 k sqrt(delta)`` and records whether the sharper
    ``100 k sqrt(delta)`` also held, with ``delta`` the larger of the cb
    distortions of the map and of its inverse.
    """
    a = [mc.as_matrix(x) for x in a]
    b = [mc.as_matrix(y) for y in b]
    if len(a) != len(b):
        raise DimensionError("tuples must have the same length")
    amb_a = ambient_a if isinstance(ambient_a, AmbientAlgebra) else AmbientAlgebra(ambient_a or a[0].shape[0])
    amb_b = ambient_b if isinstance(ambient_b, AmbientAlgebra) else AmbientAlgebra(ambient_b or b[0].shape[0])
    k = len(a)
    cands = {}
    witness = None
    if amb_a == amb_b and len(cands) < budget:
        cands["common-ambient"] = max(mc.operator_norm(x - y) for x, y in zip(a, b))
    if len(cands) < budget:
        v1, phi = _tuple_ucp_fit(a, b, tol)
        v2, psi = _tuple_ucp_fit(b, a, tol)
        n, m = amb_a.size, amb_b.size
        phi = _widen(phi, n, m, _blocks_of(amb_a))
        psi = _widen(psi, m, n, _blocks_of(amb_b))
        i_map = UcpMap.from_function(lambda x: mc.direct_sum([x, phi.apply(x)]), n, n + m,
                                     _blocks_of(amb_a), corner=np.arange(n))
        j_map = UcpMap.from_function(lambda y: mc.direct_sum([psi.apply(y), y]), m, n + m,
                                     _blocks_of(amb_b), corner=n + np.arange(m))
        value = max(mc.operator_norm(i_map.apply(x) - j_map.apply(y)) for x, y in zip(a, b))
        cands["ucp-pair"] = value
        witness = AmalgamResult(AmbientAlgebra(n + m), i_map, j_map, value,
                                certify("tuple-distance.realized", value, value, DEFECT_TOL),
                                phi=phi, psi=psi, source=amb_a, codomain=amb_b,
                                isometry_certificates=[isometry_certificate(i_map, "amalgam.i-isometry"),
                                                       isometry_certificate(j_map, "amalgam.j-isometry")])
    f = None
    try:
        f = tuple_map(amb_a, a, amb_b, b)
    except DimensionError:
        pass
    if f is not None and f.is_unital and len(cands) < budget and len(amb_a.block_dims) == 1 \
            and len(amb_b.block_dims) == 1:
        res = amalgamate_matricial(f.domain, f, tol)
        sa, Sa = _tuple_system(amb_a, a)
        ja = [res.i_map.apply(x) for x in a]
        jb = [res.j_map.apply(y) for y in b]
        cands["amalgam"] = max(mc.operator_norm(x - y) for x, y in zip(ja, jb))
    value = min(cands.values())
    cert = None
    if f is not None and f.is_unital:
        fwd, inv = directional_cb_norms(f, tol)
        delta = max(0.0, fwd.value - 1.0, inv.value - 1.0)
        cert = certify("tuple-distance.cb-distortion-bound", 1000 * k * math.sqrt(delta), value, DEFECT_TOL,
                       k=k, delta=delta, sharper_bound=100 * k * math.sqrt(delta),
                       sharper_bound_held=bool(value <= 100 * k * math.sqrt(delta) + DEFECT_TOL))
    return FraisseEstimate(value, cands, witness, cert)


def compose_approximate_isometry(phi, psi):
    """Min-plus composition of distance tables: ``(psi phi)(a, d) = min_b phi(a, b) + psi(b, d)``.

    Tables are arrays with nonnegative entries; ``inf`` marks unrelated pairs.
    """
    phi = np.asarray(phi, dtype=float)
    psi = np.asarray(psi, dtype=float)
    if phi.ndim != 2 or psi.ndim != 2 or phi.shape[1] != psi.shape[0]:
        raise DimensionError("tables are not composable")
    if np.any(phi < 0) or np.any(psi < 0):
        raise DimensionError("distance tables must be nonnegative")
    return np.min(phi[:, :, None] + psi[None, :, :], axis=1)


# -- nuclear embedding chains ----------------------------------------------------------

@dataclass
class EmbeddingChain:
    """Matrix stages ``M_{n_k}`` with cornered ucp connectives and trackers ``i_k: E_k -> M_{n_k}``.

    Trackers are stored as ucp maps on the common ambient of the input
    systems; ``tracker(k)`` restricts one to ``E_k``.
    """

    systems: list
    sizes: list
    connectives: list
    tracker_maps: list
    certificates: list
    complete: bool = True
    diagnostics: dict = field(default_factory=dict)

    @property
    def stages(self):
        return [(AmbientAlgebra(n), OperatorSystem.full(AmbientAlgebra(n))) for n in self.sizes]

    def connective(self, k):
        n0, n1 = self.sizes[k], self.sizes[k + 1]
        return self.connectives[k].as_map(OperatorSystem.full(AmbientAlgebra(n0)),
                                          OperatorSystem.full(AmbientAlgebra(n1)))

    def tracker(self, k):
        E = self.systems[k]
        return SystemMap.from_images(E, [self.tracker_maps[k].apply(x) for x in E.basis],
                                     OperatorSystem.full(AmbientAlgebra(self.sizes[k])))

    @property
    def passed(self):
        return self.complete and all(c.passed for row in self.certificates for c in row)


def _same_span(E, F):
    return E.dim == F.dim and all(F.contains(x) for x in E.basis)


def nuclear_chain(systems, tol=DEFAULT_TOL, seed=None):
    """Embed an increasing chain ``E_1 ⊂ ... ⊂ E_K`` (common ambient) into matrix stages.

    Stage ``k`` carries ``i_k = diag(theta_1, ..., theta_k)`` where
    ``theta_k`` is the inclusion of ``E_k`` (twisted by a random unitary when
    ``seed`` is given).  The connective is ``phi_k(z) = diag(z, alpha(z))``
    with ``alpha`` the nearest ucp map to ``theta_{k+1} o i_k^{-1}`` on
    ``i_k[E_k]``.  Repeated systems get identity connectives.  Per stage the
    certificates cover: the connective is a unital complete isometry,
    ``||i_k^{-1}||_cb <= 1 + eps_k 4^{-k}`` with ``eps_k = (50 dim E_k)^{-2}``
    (through an explicit ucp left inverse), and
    ``||i_{k+1}|E_k - phi_k o i_k||_cb <= 2^{-k}``.
    """
    if not systems:
        raise DimensionError("need at least one system")
    amb = systems[0].ambient
    for E, F in zip(systems[:-1], systems[1:]):
        if F.ambient != amb:
            raise DimensionError("systems must share one ambient algebra")
        if not all(F.contains(x) for x in E.basis):
            raise DimensionError("systems must be increasing")
    N = amb.size
    comps = _blocks_of(amb)
    rng = np.random.default_rng(seed) if seed is not None else None

    def new_theta():
        if rng is None:
            return UcpMap.identity(amb), None
        U = mc.random_unitary(N, rng)
        return UcpMap.from_function(lambda x: U @ x @ U.conj().T, N, N, comps), U

    def left_inverse(U):
        if U is None:
            return UcpMap.identity(amb)
        return UcpMap.from_function(lambda y: U.conj().T @ y @ U, N, N, comps)

    th, U = new_theta()
    trackers = [th]
    sizes = [N]
    # the last block of i_k is theta_k; undoing it recovers E_k
    inverse_block = [(0, U)]
    connectives, certs = [], []
    chain = EmbeddingChain(list(systems), sizes, connectives, trackers, certs)

    def inverse_cert(k):
        E = systems[k]
        off, V = inverse_block[k]
        comp = UcpMap.compression(sizes[k], np.arange(off, off + N))
        inv = left_inverse(V).compose(comp)
        resid = max(float(np.max(np.abs(inv.apply(trackers[k].apply(x)) - x))) for x in E.basis)
        err = max(resid * E.dim, inv.unital_residual(), max(0.0, -inv.min_eig()))
        eps = (50 * E.dim) ** -2.0
        return certify("embedding-chain.tracker-inverse", 1 + eps * 4.0 ** -(k + 1), 1.0 + err, DEFECT_TOL,
                       stage=k + 1, eps=eps)

    certs.append([inverse_cert(0)])
    for k in range(len(systems) - 1):
        E, F = systems[k], systems[k + 1]
        try:
            if _same_span(E, F):
                phi_k = UcpMap.identity(AmbientAlgebra(sizes[k]))
                i_next = trackers[k]
                inverse_block.append(inverse_block[k])
                alpha_dist = 0.0
            else:
                th, U = new_theta()
                ins = [trackers[k].apply(x) for x in E.basis]
                outs = [th.apply(x) for x in E.basis]
                alpha, _ = ucp_nearest_data(_Layout(ins, outs), tol)
                alpha = _widen(alpha, sizes[k], N, [np.arange(sizes[k])])
                alpha_dist = data_distance(ins, outs, [alpha.apply(z) for z in ins], tol)
                phi_k = UcpMap.from_function(lambda z, a=alpha: mc.direct_sum([z, a.apply(z)]),
                                             sizes[k], sizes[k] + N, corner=np.arange(sizes[k]))
                i_next = UcpMap.stack([trackers[k], th])
                inverse_block.append((sizes[k], U))
        except SDPError as exc:
            chain.complete = False
            chain.diagnostics = {"stage": k + 1, "error": str(exc)}
            return chain
        sizes.append(phi_k.K)
        connectives.append(phi_k)
        trackers.append(i_next)
        compat = data_distance(E.basis, [i_next.apply(x) for x in E.basis],
                               [phi_k.apply(trackers[k].apply(x)) for x in E.basis], tol)
        certs[k].append(certify("embedding-chain.tracker-compatibility", 2.0 ** -(k + 1), compat,
                                DEFECT_TOL, stage=k + 1, alpha_distance=alpha_dist))
        certs[k].append(isometry_certificate(phi_k, "embedding-chain.connective-isometry"))
        certs.append([inverse_cert(k + 1)])
    return chain
