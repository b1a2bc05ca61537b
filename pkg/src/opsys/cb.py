"""Completely bounded norms, complete positivity and Choi calculus.

Every quantity here reduces to a small SDP over Choi matrices.  Maps are
handled as raw linear data ``inputs[l] -> outputs[l]`` so that subspaces
which are not self-adjoint (ranges of non-self-adjoint maps, inverses) are
treated on the same footing as operator systems.

Conventions.  For ``Phi: M_n -> M_k`` the Choi matrix is
``C = sum_ij E_ij (x) Phi(E_ij)`` (input factor first), so
``Phi(x) = Tr_1[(x^T (x) I) C]`` and ``Phi(1) = Tr_1 C``.

A map defined on a subspace ``E`` of a block algebra is first split along
the connected components of the joint support of ``E``; ``E`` then lies in
the block algebra ``B = (+)_s M_{a_s}`` and extensions (Wittstock for cb
maps, Arveson for ucp maps) are searched on ``B``.  Outputs are split the
same way, since a block-diagonal map has cb norm equal to the maximum over
its output blocks.
"""
from dataclasses import dataclass, field

import numpy as np

from . import matrix_core as mc
from . import sdp
from .certificates import certify
from .exceptions import DimensionError, SDPError
from .systems import AmbientAlgebra, OperatorSystem, SystemMap, functional_norm_lower, support_components
from .ucp import UcpMap, choi_apply
from .ucp import verify_extension as verify_ucp_extension

DEFAULT_TOL = 1e-7
COMPONENT_TOL = 1e-13


@dataclass
class ChoiMatrix:
    in_dim: int
    out_dim: int
    matrix: np.ndarray

    def __post_init__(self):
        m = mc.as_matrix(self.matrix)
        if m.shape != (self.in_dim * self.out_dim,) * 2:
            raise DimensionError("Choi matrix size does not match in_dim * out_dim")
        self.matrix = m

    @property
    def is_cp(self):
        return mc.is_hermitian(self.matrix, 1e-9) and mc.min_eig(self.matrix) >= -1e-10

    @property
    def is_unital(self):
        tr = mc.partial_trace(self.matrix, (self.in_dim, self.out_dim), side="first")
        return np.max(np.abs(tr - np.eye(self.out_dim))) <= 1e-9

    def apply(self, x):
        return choi_apply(self.matrix, x, self.in_dim, self.out_dim)


@dataclass
class CbNormResult:
    value: float
    certified: str
    lower: float = 0.0
    upper: float = float("inf")
    witness: dict = field(default_factory=dict)

    def __float__(self):
        return float(self.value)


def choi_from_images(images, n, k):
    """Choi matrix from ``images[i][j] = Phi(E_ij)``."""
    t = np.asarray(images, dtype=complex).reshape(n, n, k, k)
    return t.transpose(0, 2, 1, 3).reshape(n * k, n * k)


def _full_single(sys):
    if len(sys.ambient.block_dims) != 1 or not sys.is_full:
        raise DimensionError("operation requires the domain to be a full matrix algebra M_n")


def choi(f):
    """Choi matrix of a map whose domain is all of ``M_n``."""
    _full_single(f.domain)
    n, k = f.domain.n, f.codomain.n
    units = mc.matrix_units(n)
    images = [[f.apply(units[i, j]) for j in range(n)] for i in range(n)]
    return ChoiMatrix(n, k, choi_from_images(images, n, k))


def inverse_choi(C, codomain=None):
    """The map ``M_n -> M_k`` whose Choi matrix is ``C``."""
    dom = OperatorSystem.full(AmbientAlgebra(C.in_dim))
    cod = codomain or OperatorSystem.full(AmbientAlgebra(C.out_dim))
    return SystemMap.from_images(dom, [C.apply(b) for b in dom.basis], cod)


# -- linear data and block structure -------------------------------------------

def map_data(f):
    """``(inputs, outputs)`` for a SystemMap: domain basis and its images."""
    return list(f.domain.basis), list(f.images)


def inverse_data(f):
    """Linear data of ``f^{-1}: f(E) -> E``; rejects rank-deficient maps."""
    sv = np.linalg.svd(f.coeffs, compute_uv=False)
    if f.coeffs.shape[0] < f.coeffs.shape[1] or sv[-1] < 1e-10 * max(1.0, sv[0]):
        raise DimensionError("map is rank deficient; no inverse on its range")
    return list(f.images), list(f.domain.basis)


class _Layout:
    """Domain/codomain block structure of linear data."""

    def __init__(self, inputs, outputs):
        self.inputs = [mc.as_matrix(x) for x in inputs]
        self.outputs = [mc.as_matrix(y) for y in outputs]
        if len(self.inputs) != len(self.outputs) or not self.inputs:
            raise DimensionError("inputs and outputs must be nonempty lists of equal length")
        self.N = self.inputs[0].shape[0]
        self.K = self.outputs[0].shape[0]
        mat = np.array([x.real.ravel().tolist() + x.imag.ravel().tolist() for x in self.inputs])
        sv = np.linalg.svd(mat, compute_uv=False)
        if sv[-1] < 1e-10 * max(1.0, sv[0]):
            raise DimensionError("input elements are linearly dependent")
        self.in_comps = support_components(self.inputs, self.N, COMPONENT_TOL)
        self.out_comps = support_components(self.outputs, self.K, COMPONENT_TOL)
        self.in_parts = [[x[np.ix_(c, c)] for c in self.in_comps] for x in self.inputs]

    def outputs_on(self, comp):
        return [y[np.ix_(comp, comp)] for y in self.outputs]


def _terms_choi_entry(blk, r0, c0, k, x, a, b):
    """Terms of ``X -> Phi(x)[a, b]`` where Phi's Choi sits at rows r0, cols c0 of block blk."""
    out = []
    rows, cols = np.nonzero(np.abs(x) > 0)
    for i, j in zip(rows, cols):
        out.append((blk, c0 + j * k + b, r0 + i * k + a, x[i, j]))
    return out


def _terms_partial_trace(blk, off, a_s, k, a, b):
    """Terms of ``X -> (Tr_1 C)[a, b]`` for the Choi block C at offset ``off``."""
    return [(blk, off + i * k + b, off + i * k + a, 1.0) for i in range(a_s)]


def _add_hermitian_eq(pb, k, terms_fn, rhs):
    """Constrain a Hermitian k x k matrix-valued functional to equal ``rhs``."""
    for a in range(k):
        for b in range(a, k):
            terms = terms_fn(a, b)
            pb.add_real(terms, np.real(rhs[a, b]))
            if a != b:
                pb.add_imag(terms, np.imag(rhs[a, b]))


def _paulsen_blocks(pb, sizes, k):
    """Add one Paulsen block [[C1, D], [D*, C2]] per domain component plus slacks and t."""
    blocks = [pb.add_block(2 * a * k) for a in sizes]
    s1 = pb.add_block(k)
    s2 = pb.add_block(k)
    t = pb.add_block(1)
    for slack, which in ((s1, 0), (s2, 1)):
        def fn(a, b, slack=slack, which=which):
            terms = []
            for blk, a_s in zip(blocks, sizes):
                terms += _terms_partial_trace(blk, which * a_s * k, a_s, k, a, b)
            terms.append((slack, b, a, 1.0))
            if a == b:
                terms.append((t, 0, 0, -1.0))
            return terms
        _add_hermitian_eq(pb, k, fn, np.zeros((k, k)))
    pb.add_objective([(t, 0, 0, 1.0)])
    return blocks, t


def _paulsen_witness(sol, blocks, sizes, k):
    return [sol.primal[blk][:a * k, a * k:] for blk, a in zip(blocks, sizes)]


def _cb_component(layout, comp, tol, max_iter):
    """cb norm of the data compressed to one output component (Paulsen/Wittstock SDP)."""
    k = len(comp)
    outs = layout.outputs_on(comp)
    sizes = [len(c) for c in layout.in_comps]
    if all(np.max(np.abs(y)) == 0 for y in outs):
        return 0.0, 0.0, [np.zeros((a * k, a * k), dtype=complex) for a in sizes]
    pb = sdp.ProblemBuilder()
    blocks, _ = _paulsen_blocks(pb, sizes, k)
    for l, y in enumerate(outs):
        parts = layout.in_parts[l]
        for a in range(k):
            for b in range(k):
                terms = []
                for blk, a_s, x in zip(blocks, sizes, parts):
                    terms += _terms_choi_entry(blk, 0, a_s * k, k, x, a, b)
                pb.add_complex(terms, y[a, b])
    sol = sdp.solve(pb.build(), tol=tol, max_iter=max_iter)
    sdp.require_optimal(sol, "cb-norm SDP")
    return sol.primal_objective, sol.dual_objective, _paulsen_witness(sol, blocks, sizes, k)


def cb_norm_data(inputs, outputs, tol=DEFAULT_TOL, max_iter=sdp.DEFAULT_MAX_ITER):
    """cb norm of the linear map ``inputs[l] -> outputs[l]``.

    Exact up to the SDP tolerance: the value is the minimum cb norm over
    extensions to the block algebra generated by the inputs' support.
    """
    layout = _Layout(inputs, outputs)
    best = CbNormResult(0.0, "exact", 0.0, 0.0, {"components": []})
    for comp in layout.out_comps:
        p, d, ext = _cb_component(layout, comp, tol, max_iter)
        best.witness["components"].append({"output": comp.tolist(), "primal": p, "dual": d})
        if p > best.value:
            best.value = p
            best.upper = p
            best.lower = d
            best.witness["extension"] = ext
    best.lower = min(best.lower, best.value)
    return best


def cb_norm_subspace(f, tol=DEFAULT_TOL, inverse=False, ucp_hint=None):
    """cb norm of a SystemMap (or of its inverse on the range).

    ``ucp_hint`` may carry a ucp extension of a unital map (see
    :func:`verify_ucp_extension`); when it checks out the norm is exactly 1
    and no SDP is solved.
    """
    if ucp_hint is not None and not inverse:
        ok, err = verify_ucp_extension(f, ucp_hint)
        if ok:
            return CbNormResult(1.0, "exact", 1.0 - err, 1.0 + err, {"ucp_extension": True, "residual": err})
    inputs, outputs = inverse_data(f) if inverse else map_data(f)
    res = cb_norm_data(inputs, outputs, tol)
    key = "inverse" if inverse else "forward"
    f.cb_bounds[key] = (res.lower, res.upper)
    return res


def cb_norm_full(f, tol=DEFAULT_TOL):
    """cb norm of a map defined on a full (block) matrix algebra."""
    if not f.domain.is_full:
        raise DimensionError("cb_norm_full needs a full-algebra domain; use cb_norm_subspace")
    return cb_norm_subspace(f, tol)


def directional_cb_norms(f, tol=DEFAULT_TOL, forward_hint=None, inverse_hint=None):
    """``(||f||_cb, ||f^{-1}||_cb)`` as CbNormResults."""
    return (cb_norm_subspace(f, tol, ucp_hint=forward_hint),
            cb_norm_subspace(f, tol, inverse=True) if inverse_hint is None
            else _hinted_inverse(f, inverse_hint, tol))


def _hinted_inverse(f, hint, tol):
    g = SystemMap(f.range_system(), f.domain, np.eye(f.domain.dim))
    return cb_norm_subspace(g, tol, ucp_hint=hint)


# -- ucp structure ---------------------------------------------------------------

def _ucp_blocks(pb, sizes, k):
    """One PSD Choi block per domain component, constrained to be jointly unital."""
    blocks = [pb.add_block(a * k) for a in sizes]

    def fn(a, b):
        terms = []
        for blk, a_s in zip(blocks, sizes):
            terms += _terms_partial_trace(blk, 0, a_s, k, a, b)
        return terms
    _add_hermitian_eq(pb, k, fn, np.eye(k))
    return blocks


def _ucp_feasibility_component(layout, comp, tol, max_iter):
    """Largest ``lam`` with ``Choi = S + lam 1``, ``S >= 0``, agreeing with the data and unital.

    A ucp extension exists exactly when the optimum is ``>= 0``.  Unlike a
    bare feasibility problem this one is strictly feasible, so boundary
    solutions (low-rank Choi matrices) are found to full accuracy.
    """
    k = len(comp)
    outs = layout.outputs_on(comp)
    sizes = [len(c) for c in layout.in_comps]
    pb = sdp.ProblemBuilder()
    blocks = [pb.add_block(a * k) for a in sizes]
    lp, lm = pb.add_block(1), pb.add_block(1)

    def lam_terms(weight):
        return [(lp, 0, 0, weight), (lm, 0, 0, -weight)]

    def unit_fn(a, b):
        terms = []
        for blk, a_s in zip(blocks, sizes):
            terms += _terms_partial_trace(blk, 0, a_s, k, a, b)
        return terms + (lam_terms(float(sum(sizes))) if a == b else [])
    _add_hermitian_eq(pb, k, unit_fn, np.eye(k))
    for l, y in enumerate(outs):
        parts = layout.in_parts[l]
        trace = complex(sum(np.trace(x) for x in parts))
        for a in range(k):
            for b in range(k):
                terms = []
                for blk, x in zip(blocks, parts):
                    terms += _terms_choi_entry(blk, 0, 0, k, x, a, b)
                if a == b and trace != 0:
                    terms += lam_terms(trace)
                if terms:
                    pb.add_complex(terms, y[a, b])
                elif abs(y[a, b]) > tol:
                    return None, {"reason": "output entry outside the reachable support"}
    # maximize lam; the small weight on lp + lm only selects the minimal split
    pb.add_objective([(lp, 0, 0, -1.0 + 1e-3), (lm, 0, 0, 1.0 + 1e-3)])
    sol = sdp.solve(pb.build(), tol=tol, max_iter=max_iter)
    if sol.status != sdp.OPTIMAL:
        return None, {"status": sol.status}
    lam = float(np.real(sol.primal[lp][0, 0] - sol.primal[lm][0, 0]))
    if lam < -max(tol, 1e-9):
        return None, {"status": sdp.INFEASIBLE, "max_min_eig": lam, "y": sol.dual}
    return [sol.primal[blk] + lam * np.eye(len(sol.primal[blk])) for blk in blocks], {"max_min_eig": lam}


def arveson_extend(f, tol=1e-9, max_iter=sdp.DEFAULT_MAX_ITER):
    """A ucp extension of the unital map ``f`` to the input block algebra, or ``None``.

    Returns ``(extension or None, witness)``; on infeasibility the witness
    carries the dual certificate from the phase-I problem.
    """
    if not f.is_unital:
        raise DimensionError("Arveson extension needs a unital map")
    layout = _Layout(*map_data(f))
    rows = []
    for comp in layout.out_comps:
        chois, wit = _ucp_feasibility_component(layout, comp, tol, max_iter)
        if chois is None:
            return None, wit
        rows.append(chois)
    ext = UcpMap(layout.N, layout.K, layout.in_comps, layout.out_comps, rows).repaired()
    agree = max(float(np.max(np.abs(ext.apply(x) - y))) for x, y in zip(layout.inputs, layout.outputs))
    return ext, {"agreement_residual": agree}


def is_ucp(f, tol=1e-7):
    """Whether ``f`` admits a ucp extension (equivalently, is ucp on its domain)."""
    if not f.is_unital:
        return False, {"reason": "not unital"}
    ext, wit = arveson_extend(f, tol=min(tol, 1e-9))
    if ext is None:
        return False, wit
    return wit["agreement_residual"] <= max(tol, 1e-7), {"extension": ext, **wit}


def ucp_nearest_data(layout, tol=DEFAULT_TOL, max_iter=sdp.DEFAULT_MAX_ITER):
    """Per output component: nearest ucp map in cb distance on the input subspace."""
    sizes = [len(c) for c in layout.in_comps]
    rows, dists = [], []
    for comp in layout.out_comps:
        k = len(comp)
        outs = layout.outputs_on(comp)
        pb = sdp.ProblemBuilder()
        ucp_blocks = _ucp_blocks(pb, sizes, k)
        pblocks, _ = _paulsen_blocks(pb, sizes, k)
        for l, y in enumerate(outs):
            parts = layout.in_parts[l]
            for a in range(k):
                for b in range(k):
                    terms = []
                    for qb, blk, a_s, x in zip(ucp_blocks, pblocks, sizes, parts):
                        terms += _terms_choi_entry(qb, 0, 0, k, x, a, b)
                        terms += _terms_choi_entry(blk, 0, a_s * k, k, x, a, b)
                    pb.add_complex(terms, y[a, b])
        sol = sdp.solve(pb.build(), tol=tol, max_iter=max_iter)
        # only the ucp point is used and it is repaired below, so a stall next to the optimum is fine
        if not sdp.near_optimal(sol, tol):
            sdp.require_optimal(sol, "nearest-ucp SDP")
        rows.append([sol.primal[b] for b in ucp_blocks])
        dists.append(sol.primal_objective)
    ext = UcpMap(layout.N, layout.K, layout.in_comps, layout.out_comps, rows).repaired()
    return ext, dists


def ucp_nearest(f, tol=DEFAULT_TOL, delta=None):
    """Nearest ucp map to the unital map ``f`` in cb distance.

    Returns ``(psi, extension, distance, certificate)``.  ``psi`` is the ucp
    map restricted to ``f``'s domain, ``extension`` a :class:`UcpMap`
    on the input block algebra and ``distance = ||f - psi||_cb`` recomputed
    from the repaired (exactly ucp) extension.
    """
    if not f.is_unital:
        raise DimensionError("ucp_nearest expects a unital map")
    layout = _Layout(*map_data(f))
    if delta is None:
        delta = max(0.0, cb_norm_subspace(f, tol).value - 1.0)
    ext, _ = ucp_nearest_data(layout, tol)
    psi = SystemMap.from_images(f.domain, [ext.apply(x) for x in f.domain.basis], f.codomain) \
        if _in_codomain(ext, f) else None
    diff_out = [y - ext.apply(x) for x, y in zip(layout.inputs, layout.outputs)]
    if max(np.max(np.abs(d)) for d in diff_out) <= 1e-13:
        dist = 0.0
    else:
        dist = cb_norm_data(layout.inputs, diff_out, tol).value
    bound = 20 * (f.domain.dim + 1) * np.sqrt(delta)
    cert = certify("ucp-distance.perturbation-bound", bound, dist, max(tol, 1e-6), inputs=(f,),
                   delta=delta, in_hypothesis=bool(delta <= 1.0))
    return psi, ext, dist, cert


def _in_codomain(ext, f):
    try:
        for x in f.domain.basis:
            f.codomain.coords(ext.apply(x), check=True, tol=1e-7)
    except DimensionError:
        return False
    return True


# -- self-adjoint decomposition and imaginary-part bounds -----------------------------

def re_im_parts(f):
    """``(Re f, Im f)`` with ``f = Re f + i Im f`` and both parts self-adjoint."""
    return f.re_part(), f.im_part()


def im_bound_check(f, tol=1e-6):
    """Certificate for ``||Im f||_cb <= 4 sqrt(delta)`` with ``delta = max(0, ||f||_cb - 1)``."""
    if not f.is_unital:
        raise DimensionError("the imaginary-part bound is stated for unital maps")
    norm_f = cb_norm_subspace(f).value
    delta = max(0.0, norm_f - 1.0)
    im = f.im_part()
    val = 0.0 if np.max(np.abs(im.coeffs)) == 0 else cb_norm_subspace(im).value
    return certify("imaginary-part.cb-bound", 4 * np.sqrt(delta), val, tol, inputs=(f,),
                   delta=delta, cb_norm=norm_f, in_hypothesis=bool(norm_f <= 2.0))


def scalar_im_bound(phi, x, tol=1e-9):
    """Certificate for ``|Im phi(x)| <= 2 sqrt(delta) ||x||`` on a Hermitian ``x``.

    ``phi`` is a unital functional: a SystemMap into the one-dimensional
    system.  Its norm is computed by the cb SDP (norm = cb norm for
    functionals).
    """
    if phi.codomain.n != 1:
        raise DimensionError("scalar bound needs a functional (codomain of size 1)")
    x, _ = mc.as_hermitian(x)
    norm_phi = cb_norm_subspace(phi).value
    delta = max(0.0, norm_phi - 1.0)
    val = abs(np.imag(phi.apply(x)[0, 0]))
    return certify("imaginary-part.functional-bound", 2 * np.sqrt(delta) * mc.operator_norm(x), val, tol,
                   delta=delta, functional_norm=norm_phi)


def cp_jordan_split(f):
    """Split a self-adjoint map on ``M_n`` as a difference of two cp maps."""
    C = choi(f)
    if not mc.is_hermitian(C.matrix, 1e-9):
        raise DimensionError("map is not self-adjoint (Choi matrix not Hermitian)")
    pos, neg = mc.jordan_split(C.matrix)
    return (inverse_choi(ChoiMatrix(C.in_dim, C.out_dim, pos), f.codomain),
            inverse_choi(ChoiMatrix(C.in_dim, C.out_dim, neg), f.codomain))


def constructive_ucp(f, tol=DEFAULT_TOL):
    """Cross-check for ucp approximation following the Jordan split recipe.

    Extends ``Re f`` to the input block algebra (Wittstock, via the cb SDP),
    splits the extension's Choi into cp parts ``phi1 - phi2``, finds a
    minimal-trace positive functional ``theta`` with ``theta(.) 1 - phi2`` cp,
    and renormalizes ``phi1 - phi2 + theta 1`` to a unital map.  Returns
    ``(extension, ||f - psi||_cb, ||theta||)``; the distance is an upper
    bound for the optimum computed by :func:`ucp_nearest`.
    """
    re_f = f.re_part()
    layout = _Layout(*map_data(re_f))
    sizes = [len(c) for c in layout.in_comps]
    rows, theta_norm = [], 0.0
    for comp in layout.out_comps:
        K = len(comp)
        ext = _cb_component(layout, comp, tol, sdp.DEFAULT_MAX_ITER)[2]
        splits = [mc.jordan_split((D + D.conj().T) / 2) for D in ext]
        # theta has Choi rho_s (x) I_K; minimize sum tr(rho_s) subject to rho_s (x) I - neg_s >= 0
        pb = sdp.ProblemBuilder()
        rho = [pb.add_block(a) for a in sizes]
        slack = [pb.add_block(a * K) for a in sizes]
        for rb, sb, a_s, (_, neg) in zip(rho, slack, sizes, splits):
            for p in range(a_s * K):
                for q in range(p, a_s * K):
                    i, a = divmod(p, K)
                    j, b = divmod(q, K)
                    terms = [(sb, q, p, 1.0)]
                    if a == b:
                        terms.append((rb, j, i, -1.0))
                    pb.add_real(terms, -np.real(neg[p, q]))
                    if p != q:
                        pb.add_imag(terms, -np.imag(neg[p, q]))
            pb.add_objective([(rb, i, i, 1.0) for i in range(a_s)])
        sol = sdp.require_optimal(sdp.solve(pb.build(), tol=tol), "auxiliary functional SDP")
        thetas = [mc.psd_projection(sol.primal[rb]) for rb in rho]
        theta_norm = max(theta_norm, float(sum(np.trace(t).real for t in thetas)))
        rows.append([pos - neg + np.kron(t, np.eye(K)) for (pos, neg), t in zip(splits, thetas)])
    fixed = UcpMap(layout.N, layout.K, layout.in_comps, layout.out_comps, rows).repaired()
    inputs, outputs = map_data(f)
    diff = [y - fixed.apply(x) for x, y in zip(inputs, outputs)]
    dist = cb_norm_data(inputs, diff, tol).value
    return fixed, dist, theta_norm


# -- functional norms and Auerbach constants ---------------------------------------------

def functional_norm(sys, w, tol=1e-8, rng=None, starts=6):
    """``(lower, upper)`` for the norm of ``x -> tr(w x)`` on ``sys``.

    The upper bound is the trace norm of an explicit extension to the
    ambient algebra (a minimal one found by SDP, then corrected to agree
    exactly on the basis); the lower bound comes from sampled ascent.
    """
    rng = rng or np.random.default_rng(0)
    lower = functional_norm_lower(sys, w, rng, starts=starts)
    comps = sys.support_components()
    target = np.array([np.trace(w @ a) for a in sys.basis])
    pb = sdp.ProblemBuilder()
    blocks = [pb.add_block(2 * len(c)) for c in comps]
    for l, a in enumerate(sys.basis):
        terms = []
        for blk, c in zip(blocks, comps):
            e = a[np.ix_(c, c)]
            m = len(c)
            rows, cols = np.nonzero(np.abs(e) > 0)
            for j, i in zip(rows, cols):
                terms.append((blk, m + j, i, e[j, i]))
        pb.add_complex(terms, target[l])
    for blk, c in zip(blocks, comps):
        pb.add_objective([(blk, i, i, 0.5) for i in range(2 * len(c))])
    sol = sdp.solve(pb.build(), tol=tol)
    Z = np.zeros((sys.n, sys.n), dtype=complex)
    for blk, c in zip(blocks, comps):
        m = len(c)
        Z[np.ix_(c, c)] = sol.primal[blk][:m, m:]
    resid = target - np.array([np.trace(Z @ a) for a in sys.basis])
    corr = np.tensordot(sys.gram_inv() @ resid, np.array(sys.basis), axes=1)
    ext = Z + corr
    upper = mc.trace_norm(ext)
    return lower, max(upper, lower)


def auerbach_constant(sys, tol=1e-8, rng=None):
    """``(lower, upper)`` for ``N = max_i max(||a_i||, ||a_i'||)`` over the basis and its dual."""
    duals = sys.dual_basis()
    lo = hi = max(mc.operator_norm(a) for a in sys.basis)
    for w in duals:
        l, u = functional_norm(sys, w, tol=tol, rng=rng)
        lo = max(lo, l)
        hi = max(hi, u)
    return lo, hi


# -- amplification ascent (independent lower bounds) ------------------------------

def amplification_ascent(images, n, k, level=None, starts=8, iters=300, rng=None, target=None):
    """Lower bound for ``||Phi||_cb`` on ``M_n`` by alternating maximization.

    ``images[i][j] = Phi(E_ij)``.  At level ``r`` it alternates between the
    best unit vectors ``u, v`` for the current ``X`` and the best ``X`` in the
    unit ball of ``M_r(M_n)`` for the current ``u, v`` (a polar factor).
    The default level is ``k``: for maps into ``M_k`` the cb norm is attained
    there, while level ``min(n, k)`` can fall short when ``n < k``.
    """
    rng = rng or np.random.default_rng(0)
    r = level or k
    P = np.asarray(images, dtype=complex).reshape(n, n, k, k)
    # Phi^(r)(X) blocks: Y[al, a, be, b] = sum_ij X[al, i, be, j] P[i, j, a, b]
    best = 0.0
    for s in range(starts):
        X = mc.random_complex((r * n, r * n), rng)
        X = mc.polar_unitary(X)
        val = 0.0
        for _ in range(iters):
            Xt = X.reshape(r, n, r, n)
            Y = np.einsum("aibj,ijcd->acbd", Xt, P).reshape(r * k, r * k)
            U, S, Vh = np.linalg.svd(Y)
            new = S[0]
            u = U[:, 0].reshape(r, k)
            v = Vh[0].conj().reshape(r, k)
            G = np.einsum("ac,ijcd,bd->aibj", u.conj(), P, v).reshape(r * n, r * n)
            # maximize Re tr(G^T X) over the unit ball: X = polar(conj(G))
            X = mc.polar_unitary(G.conj())
            if new <= val * (1 + 1e-13):
                val = max(val, new)
                break
            val = new
        best = max(best, val)
        if target is not None and best >= target:
            break
    return best


def full_map_images(f):
    """``Phi(E_ij)`` for a map on a full single-block domain."""
    _full_single(f.domain)
    n = f.domain.n
    units = mc.matrix_units(n)
    return [[f.apply(units[i, j]) for j in range(n)] for i in range(n)]


def subspace_ascent(inputs, outputs, level, starts=8, iters=200, rng=None):
    """Lower bound for ``||phi^(level)||`` over ``M_level(E)`` by normalized gradient ascent."""
    rng = rng or np.random.default_rng(0)
    X = np.array(inputs, dtype=complex)
    Y = np.array(outputs, dtype=complex)
    d = len(X)
    r = level

    def assemble(c, mats):
        m = mats.shape[1]
        return np.einsum("abl,lij->aibj", c, mats).reshape(r * m, r * m)

    def ratio(c):
        nx = mc.operator_norm(assemble(c, X))
        return (mc.operator_norm(assemble(c, Y)) / nx) if nx > 0 else 0.0

    def grad_norm(c, mats):
        A = assemble(c, mats)
        U, S, Vh = np.linalg.svd(A)
        m = mats.shape[1]
        u = U[:, 0].reshape(r, m)
        v = Vh[0].conj().reshape(r, m)
        # d||A||/d conj(c)[a, b, l] direction: conj(u_a^* mats_l v_b)
        g = np.einsum("ai,lij,bj->abl", u.conj(), mats, v).conj()
        return S[0], g

    best = 0.0
    for _ in range(starts):
        c = mc.random_complex((r, r, d), rng)
        val = ratio(c)
        step = 0.3
        for _ in range(iters):
            ny, gy = grad_norm(c, Y)
            nx, gx = grad_norm(c, X)
            g = gy / nx - ny * gx / nx ** 2
            gn = np.linalg.norm(g)
            if gn == 0:
                break
            cand = c + step * g / gn * np.linalg.norm(c)
            vc = ratio(cand)
            if vc > val:
                c, val = cand, vc
                step = min(1.0, step * 1.5)
            else:
                step *= 0.5
                if step < 1e-9:
                    break
        best = max(best, val)
    return best
